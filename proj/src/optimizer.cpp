#include "mvmlm/optimizer.hpp"

#include "mvmlm/error.hpp"

#include <cmath>
#include <Eigen/Eigenvalues>

#include <limits>

namespace mvmlm {

std::string to_string(OptimStatus s) {
    switch (s) {
        case OptimStatus::converged: return "converged";
        case OptimStatus::max_iter: return "max_iter";
        case OptimStatus::stalled: return "stalled";
    }
    return "stalled";
}

namespace {

constexpr double kArmijo = 1e-4;
constexpr double kMaxStep = 2.0;  // cap on the infinity norm of a step in theta
constexpr int kMaxHalvings = 50;
constexpr double kFlatUlps = 64.0;  // rounding band of the objective
constexpr double kHessStep = 1e-4;
constexpr int kMaxNewton = 5;
constexpr double kPolishSteps[] = {1.0, 0.97, 1.03, 0.93, 1.07, 0.88, 1.12, 0.5, 0.25, 0.125, 0.0625, 0.03125};

}  // namespace

OptimResult maximize_bfgs(const Objective& f, const Gradient& grad, Eigen::VectorXd x0, const OptimizerOptions& opts) {
    OptimResult res;
    auto safe_eval = [&](const Eigen::VectorXd& x) {
        ++res.evaluations;
        try {
            const double v = f(x);
            return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
        } catch (const Error&) {
            return -std::numeric_limits<double>::infinity();
        }
    };

    const auto n = x0.size();
    Eigen::VectorXd x = std::move(x0);
    double fx = safe_eval(x);
    if (!std::isfinite(fx)) throw NumericalError("objective is not finite at the starting point", INFINITY);
    res.initial_value = fx;
    res.trace.push_back(fx);
    Eigen::VectorXd g = grad(x);
    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
    bool fresh_H = true;
    int newton_steps = 0;
    bool polish_failed = false;  // at the current x

    auto finish = [&](OptimStatus status) {
        res.x = x;
        res.value = fx;
        res.gradient = g;
        res.status = status;
        return res;
    };

    // Hessian by central differences of the gradient, for the polishing step.
    auto hessian_at = [&](const Eigen::VectorXd& at) {
        Eigen::MatrixXd Hf(n, n);
        Eigen::VectorXd t = at;
        for (Eigen::Index k = 0; k < n; ++k) {
            const double h = kHessStep * (1.0 + std::abs(at(k)));
            t(k) = at(k) + h;
            const Eigen::VectorXd up = grad(t);
            t(k) = at(k) - h;
            const Eigen::VectorXd down = grad(t);
            t(k) = at(k);
            Hf.col(k) = (up - down) / (2.0 * h);
        }
        return Eigen::MatrixXd(0.5 * (Hf + Hf.transpose()));
    };

    if (g.lpNorm<Eigen::Infinity>() < opts.tol_grad) return finish(OptimStatus::converged);

    for (int iter = 1; iter <= opts.max_iter; ++iter) {
        res.iterations = iter;
        Eigen::VectorXd d = H * g;
        double slope = g.dot(d);
        if (!(slope > 0.0)) {
            H.setIdentity();
            fresh_H = true;
            d = g;
            slope = g.dot(d);
        }
        const double dmax = d.lpNorm<Eigen::Infinity>();
        double alpha = dmax > kMaxStep ? kMaxStep / dmax : 1.0;
        const double flat = kFlatUlps * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(fx));

        Eigen::VectorXd x_new;
        Eigen::VectorXd g_new;
        double f_new = -std::numeric_limits<double>::infinity();
        bool accepted = false;
        for (int k = 0; k < kMaxHalvings; ++k) {
            x_new = x + alpha * d;
            f_new = safe_eval(x_new);
            if (std::isfinite(f_new) && f_new >= fx + kArmijo * alpha * slope && f_new > fx + flat) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }

        // Near the optimum the attainable gain sinks below the rounding level
        // of f and noisy gradient differences spoil the BFGS update. Newton
        // steps on a differenced Hessian, judged by the gradient, finish the job.
        if (!accepted && g.lpNorm<Eigen::Infinity>() >= opts.tol_grad && newton_steps < kMaxNewton && !polish_failed) {
            ++newton_steps;
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(-hessian_at(x));
            const Eigen::VectorXd lam = es.eigenvalues();
            const double floor = 1e-10 * std::max(1.0, lam.cwiseAbs().maxCoeff());
            const Eigen::VectorXd inv = lam.unaryExpr([&](double v) { return 1.0 / std::max(std::abs(v), floor); });
            const Eigen::MatrixXd Hinv = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
            const Eigen::VectorXd step = Hinv * g;
            const double gmax = g.lpNorm<Eigen::Infinity>();
            // The predicted gain can be below one ulp of f, so whether the
            // full step registers as an increase is down to rounding. A few
            // lengths near 1 are tried before backing off.
            for (double a : kPolishSteps) {
                x_new = x + a * step;
                f_new = safe_eval(x_new);
                if (!(std::isfinite(f_new) && f_new >= fx)) continue;
                g_new = grad(x_new);
                if (g_new.lpNorm<Eigen::Infinity>() < gmax) {
                    H = Hinv;
                    fresh_H = false;
                    x = x_new;
                    fx = f_new;
                    g = g_new;
                    polish_failed = false;
                    res.trace.push_back(fx);
                    if (g.lpNorm<Eigen::Infinity>() < opts.tol_grad) return finish(OptimStatus::converged);
                    accepted = true;
                    break;
                }
            }
            if (accepted) continue;
            polish_failed = true;
        }
        if (!accepted) {
            if (g.lpNorm<Eigen::Infinity>() < opts.tol_grad) return finish(OptimStatus::converged);
            if (!fresh_H) {
                H.setIdentity();
                fresh_H = true;
                continue;
            }
            return finish(OptimStatus::stalled);
        }

        g_new = grad(x_new);
        const Eigen::VectorXd s = x_new - x;
        // Work with the minimization convention: y = grad(-f)_new - grad(-f)_old.
        const Eigen::VectorXd y = g - g_new;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (fresh_H) {
                H *= sy / y.squaredNorm();
                fresh_H = false;
            }
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
            H = (I - rho * s * y.transpose()) * H * (I - rho * y * s.transpose()) + rho * s * s.transpose();
        }

        const double rel_change = std::abs(f_new - fx) / std::max(1.0, std::abs(fx));
        x = x_new;
        fx = f_new;
        g = g_new;
        polish_failed = false;
        res.trace.push_back(fx);
        if (rel_change < opts.tol_loglik && g.lpNorm<Eigen::Infinity>() < opts.tol_grad) {
            return finish(OptimStatus::converged);
        }
    }
    return finish(OptimStatus::max_iter);
}

}  // namespace mvmlm
