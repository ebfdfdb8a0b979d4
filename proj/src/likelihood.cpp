#include "mvmlm/likelihood.hpp"

#include "mvmlm/error.hpp"

#include <cmath>
#include <map>
#include <numbers>

namespace mvmlm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2 pi)

struct Factor {
    Eigen::LLT<Eigen::MatrixXd> llt;
    double logdet = 0.0;
};

Factor factor_pd(const Eigen::MatrixXd& S, const char* what) {
    Factor f{Eigen::LLT<Eigen::MatrixXd>(S), 0.0};
    const double rcond = f.llt.info() == Eigen::Success ? f.llt.rcond() : 0.0;
    if (f.llt.info() != Eigen::Success || !(rcond > 1e-15)) {
        throw NumericalError(std::string(what) + " is numerically singular", rcond > 0.0 ? 1.0 / rcond : INFINITY);
    }
    const Eigen::MatrixXd L = f.llt.matrixL();
    f.logdet = 2.0 * L.diagonal().array().log().sum();
    return f;
}

// Student-major residual vector of one class reshaped to n x M.
Eigen::MatrixXd as_student_rows(const Eigen::VectorXd& e, int n, int M) {
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(e.data(), n, M);
}

}  // namespace

MarginalBlocks marginal_blocks(const CovarianceParams& c, int n) {
    if (n < 1) throw ValidationError("class size must be at least 1");
    const auto sig = factor_pd(c.sigma, "Sigma");
    const Eigen::MatrixXd S = c.sigma + static_cast<double>(n) * c.tau;
    const auto big = factor_pd(S, "Sigma + n T");
    MarginalBlocks out;
    out.A = big.llt.solve(Eigen::MatrixXd::Identity(c.dim(), c.dim()));
    out.A = 0.5 * (out.A + out.A.transpose());
    out.logdet = big.logdet + static_cast<double>(n - 1) * sig.logdet;
    if (!std::isfinite(out.logdet)) throw NumericalError("log|V| is not finite", INFINITY);
    return out;
}

LikelihoodValue log_likelihood(const CovarianceParams& c, const Eigen::VectorXd& beta, const StackedDesign& D) {
    if (beta.size() != D.p) throw ValidationError("beta has the wrong length");
    if (c.dim() != D.M) throw ValidationError("covariance dimension does not match the design");
    const auto sig = factor_pd(c.sigma, "Sigma");
    const Eigen::MatrixXd sigma_inv = sig.llt.solve(Eigen::MatrixXd::Identity(D.M, D.M));
    LikelihoodValue out;
    out.per_class.reserve(D.classes.size());
    std::map<int, MarginalBlocks> cache;
    for (const auto& blk : D.classes) {
        auto it = cache.find(blk.n);
        if (it == cache.end()) it = cache.emplace(blk.n, marginal_blocks(c, blk.n)).first;
        const auto& mb = it->second;
        const Eigen::VectorXd e = blk.y - blk.X * beta;
        const Eigen::MatrixXd E = as_student_rows(e, blk.n, D.M);
        const Eigen::RowVectorXd mean = E.colwise().mean();
        const Eigen::MatrixXd dev = E.rowwise() - mean;
        const double within = (dev * sigma_inv).cwiseProduct(dev).sum();
        const double between = static_cast<double>(blk.n) * mean * mb.A * mean.transpose();
        const double ll = -0.5 * (static_cast<double>(D.M * blk.n) * kLog2Pi + mb.logdet + within + between);
        out.per_class.push_back(ll);
        out.logL += ll;
    }
    return out;
}

GlsResult profile_beta_gls(const CovarianceParams& c, const StackedDesign& D) {
    const auto sig = factor_pd(c.sigma, "Sigma");
    const Eigen::MatrixXd sigma_inv = sig.llt.solve(Eigen::MatrixXd::Identity(D.M, D.M));
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(D.p, D.p);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(D.p);
    std::map<int, MarginalBlocks> cache;
    for (const auto& blk : D.classes) {
        auto it = cache.find(blk.n);
        if (it == cache.end()) it = cache.emplace(blk.n, marginal_blocks(c, blk.n)).first;
        const auto& A = it->second.A;
        const double n = static_cast<double>(blk.n);
        // class means of the M x p student blocks and of y
        Eigen::MatrixXd Xbar = Eigen::MatrixXd::Zero(D.M, D.p);
        Eigen::VectorXd ybar = Eigen::VectorXd::Zero(D.M);
        for (int i = 0; i < blk.n; ++i) {
            Xbar += blk.X.middleRows(static_cast<Eigen::Index>(i) * D.M, D.M);
            ybar += blk.y.segment(static_cast<Eigen::Index>(i) * D.M, D.M);
        }
        Xbar /= n;
        ybar /= n;
        info += n * Xbar.transpose() * A * Xbar;
        rhs += n * Xbar.transpose() * A * ybar;
        for (int i = 0; i < blk.n; ++i) {
            const Eigen::MatrixXd dX = blk.X.middleRows(static_cast<Eigen::Index>(i) * D.M, D.M) - Xbar;
            const Eigen::VectorXd dy = blk.y.segment(static_cast<Eigen::Index>(i) * D.M, D.M) - ybar;
            info += dX.transpose() * sigma_inv * dX;
            rhs += dX.transpose() * sigma_inv * dy;
        }
    }
    info = 0.5 * (info + info.transpose());
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    // LDLT pseudo-inverts zero pivots, so rcond alone misses exact singularity
    const Eigen::VectorXd piv = ldlt.vectorD().cwiseAbs();
    if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-13) || !(piv.minCoeff() > 1e-13 * piv.maxCoeff())) {
        throw RankDeficiencyError({}, "GLS information matrix is singular; the design is rank deficient");
    }
    GlsResult out;
    out.beta = ldlt.solve(rhs);
    out.cov = ldlt.solve(Eigen::MatrixXd::Identity(D.p, D.p));
    out.cov = 0.5 * (out.cov + out.cov.transpose());
    return out;
}

ProfiledLikelihood::ProfiledLikelihood(const StackedDesign& D) : M_(D.M), p_(D.p), n_students_(D.n_students()) {
    if (D.classes.empty()) throw EmptyAnalysisError("design has no classes");
    const Eigen::MatrixXd X = D.stacked_X();
    const Eigen::VectorXd y = D.stacked_y();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    beta_ols_ = qr.solve(y);

    const int q = p_ + 1;
    within_.assign(static_cast<std::size_t>(M_ * M_), Eigen::MatrixXd::Zero(q, q));
    std::map<int, SizeGroup> groups;
    Eigen::MatrixXd Z;
    for (const auto& blk : D.classes) {
        const int n = blk.n;
        Z.resize(static_cast<Eigen::Index>(n) * M_, q);
        Z.leftCols(p_) = blk.X;
        Z.col(p_) = blk.y - blk.X * beta_ols_;
        Eigen::MatrixXd zbar = Eigen::MatrixXd::Zero(M_, q);
        for (int i = 0; i < n; ++i) zbar += Z.middleRows(static_cast<Eigen::Index>(i) * M_, M_);
        zbar /= static_cast<double>(n);
        auto& g = groups[n];
        if (g.moments.empty()) {
            g.n = n;
            g.moments.assign(static_cast<std::size_t>(M_ * M_), Eigen::MatrixXd::Zero(q, q));
        }
        g.count += 1;
        for (int a = 0; a < M_; ++a) {
            for (int b = 0; b < M_; ++b) {
                g.moments[static_cast<std::size_t>(a * M_ + b)].noalias() +=
                    static_cast<double>(n) * zbar.row(a).transpose() * zbar.row(b);
            }
        }
        if (n > 1) {
            for (int i = 0; i < n; ++i) {
                const Eigen::MatrixXd dz = Z.middleRows(static_cast<Eigen::Index>(i) * M_, M_) - zbar;
                for (int a = 0; a < M_; ++a) {
                    for (int b = 0; b < M_; ++b) {
                        within_[static_cast<std::size_t>(a * M_ + b)].noalias() += dz.row(a).transpose() * dz.row(b);
                    }
                }
            }
        }
    }
    for (auto& [n, g] : groups) groups_.push_back(std::move(g));
}

ProfiledLikelihood::Point ProfiledLikelihood::evaluate(const CovarianceParams& c) const {
    const int q = p_ + 1;
    const auto sig = factor_pd(c.sigma, "Sigma");
    Point pt;
    pt.sigma_inv = sig.llt.solve(Eigen::MatrixXd::Identity(M_, M_));
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(q, q);
    for (int a = 0; a < M_; ++a) {
        for (int b = 0; b < M_; ++b) Q += pt.sigma_inv(a, b) * within_[static_cast<std::size_t>(a * M_ + b)];
    }
    double logdet = 0.0;
    pt.A.reserve(groups_.size());
    for (const auto& g : groups_) {
        auto mb = marginal_blocks(c, g.n);
        for (int a = 0; a < M_; ++a) {
            for (int b = 0; b < M_; ++b) Q += mb.A(a, b) * g.moments[static_cast<std::size_t>(a * M_ + b)];
        }
        logdet += static_cast<double>(g.count) * mb.logdet;
        pt.A.push_back(std::move(mb.A));
    }
    Q = 0.5 * (Q + Q.transpose());
    pt.information = Q.topLeftCorner(p_, p_);
    Eigen::LLT<Eigen::MatrixXd> llt(pt.information);
    if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-13)) {
        throw RankDeficiencyError({}, "GLS information matrix is singular; the design is rank deficient");
    }
    const Eigen::VectorXd delta = llt.solve(Q.col(p_).head(p_));
    const double quad = Q(p_, p_) - Q.col(p_).head(p_).dot(delta);
    pt.beta = beta_ols_ + delta;
    pt.logL = -0.5 * (static_cast<double>(n_students_ * M_) * kLog2Pi + logdet + quad);

    Eigen::VectorXd coef(q);
    coef.head(p_) = -delta;
    coef(p_) = 1.0;
    auto scatter = [&](const std::vector<Eigen::MatrixXd>& blocks) {
        Eigen::MatrixXd S(M_, M_);
        for (int a = 0; a < M_; ++a) {
            for (int b = 0; b < M_; ++b) S(a, b) = coef.dot(blocks[static_cast<std::size_t>(a * M_ + b)] * coef);
        }
        return Eigen::MatrixXd(0.5 * (S + S.transpose()));
    };
    pt.within_scatter = scatter(within_);
    for (const auto& g : groups_) pt.between_scatter.push_back(scatter(g.moments));
    return pt;
}

double ProfiledLikelihood::value(const Eigen::VectorXd& theta) const {
    return evaluate(CovarianceParams::from_theta(theta, M_)).logL;
}

void ProfiledLikelihood::symmetric_gradients(const Point& pt, const CovarianceParams& c, Eigen::MatrixXd& g_sigma,
                                             Eigen::MatrixXd& g_tau) const {
    (void)c;
    const auto& Si = pt.sigma_inv;
    Eigen::MatrixXd ds = -Si * pt.within_scatter * Si;
    Eigen::MatrixXd dt = Eigen::MatrixXd::Zero(M_, M_);
    for (std::size_t k = 0; k < groups_.size(); ++k) {
        const auto& g = groups_[k];
        const auto& A = pt.A[k];
        const double cnt = static_cast<double>(g.count);
        const double n = static_cast<double>(g.n);
        const Eigen::MatrixXd ABA = A * pt.between_scatter[k] * A;
        ds += cnt * (A + (n - 1.0) * Si) - ABA;
        dt += cnt * n * A - n * ABA;
    }
    g_sigma = -0.5 * ds;
    g_tau = -0.5 * dt;
}

Eigen::VectorXd chain_to_theta(const Eigen::MatrixXd& g_sigma, const Eigen::MatrixXd& g_tau,
                               const Eigen::VectorXd& theta, int M) {
    const int h = M * (M + 1) / 2;
    Eigen::VectorXd out(2 * h);
    auto one = [&](const Eigen::MatrixXd& G, Eigen::Index offset) {
        Eigen::MatrixXd L = Eigen::MatrixXd::Zero(M, M);
        Eigen::Index k = offset;
        for (int r = 0; r < M; ++r) {
            for (int c = 0; c <= r; ++c) L(r, c) = (r == c) ? std::exp(theta(k++)) : theta(k++);
        }
        const Eigen::MatrixXd D = 2.0 * G * L;
        k = offset;
        for (int r = 0; r < M; ++r) {
            for (int c = 0; c <= r; ++c) out(k++) = (r == c) ? D(r, c) * L(r, r) : D(r, c);
        }
    };
    one(g_sigma, 0);
    one(g_tau, h);
    return out;
}

Eigen::VectorXd ProfiledLikelihood::analytic_gradient(const Eigen::VectorXd& theta) const {
    const auto c = CovarianceParams::from_theta(theta, M_);
    const auto pt = evaluate(c);
    Eigen::MatrixXd gs, gt;
    symmetric_gradients(pt, c, gs, gt);
    return chain_to_theta(gs, gt, theta, M_);
}

Eigen::VectorXd ProfiledLikelihood::fd_gradient(const Eigen::VectorXd& theta, double rel_step) const {
    Eigen::VectorXd g(theta.size());
    Eigen::VectorXd t = theta;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
        const double h = rel_step * (1.0 + std::abs(theta(k)));
        t(k) = theta(k) + h;
        const double up = value(t);
        t(k) = theta(k) - h;
        const double down = value(t);
        t(k) = theta(k);
        g(k) = (up - down) / (2.0 * h);
    }
    return g;
}

Eigen::VectorXd ProfiledLikelihood::gradient(const Eigen::VectorXd& theta, GradientMethod method) const {
    Eigen::VectorXd g = method == GradientMethod::analytic ? analytic_gradient(theta) : fd_gradient(theta);
    for (Eigen::Index k = 0; k < g.size(); ++k) {
        if (!std::isfinite(g(k))) {
            throw NumericalError("non-finite gradient in coordinate " + std::to_string(k), INFINITY);
        }
    }
    return g;
}

Eigen::VectorXd ProfiledLikelihood::natural_gradient(const CovarianceParams& c) const {
    const auto pt = evaluate(c);
    Eigen::MatrixXd gs, gt;
    symmetric_gradients(pt, c, gs, gt);
    const int h = M_ * (M_ + 1) / 2;
    Eigen::VectorXd out(2 * h);
    Eigen::Index k = 0;
    for (const auto* G : {&gs, &gt}) {
        for (int r = 0; r < M_; ++r) {
            for (int col = 0; col <= r; ++col) out(k++) = (r == col) ? (*G)(r, col) : 2.0 * (*G)(r, col);
        }
    }
    return out;
}

double ProfiledLikelihood::gradient_self_check(const Eigen::VectorXd& theta) const {
    const auto a = analytic_gradient(theta);
    const auto f = fd_gradient(theta, 1e-5);
    double worst = 0.0;
    for (Eigen::Index k = 0; k < a.size(); ++k) {
        worst = std::max(worst, std::abs(a(k) - f(k)) / std::max(1.0, std::abs(f(k))));
    }
    return worst;
}

Eigen::VectorXd grad_loglik(const Eigen::VectorXd& theta, const StackedDesign& D, GradientMethod method) {
    return ProfiledLikelihood(D).gradient(theta, method);
}

}  // namespace mvmlm
