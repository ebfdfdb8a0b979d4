#include "mvmlm/error.hpp"
#include "mvmlm/fit.hpp"
#include "mvmlm/likelihood.hpp"

#include "../support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace mvmlm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

CovarianceParams study_like() {
    MatrixXd S(3, 3), T(3, 3);
    S << 3716.1, 2400.9, 2757.4, 2400.9, 3500.1, 2452.3, 2757.4, 2452.3, 3471.7;
    T << 725.7, 915.2, 931.6, 915.2, 1332.3, 1266.1, 931.6, 1266.1, 1274.1;
    return {S, T};
}

FitOptions analytic() {
    FitOptions o;
    o.gradient = GradientMethod::analytic;
    return o;
}

bool psd(const MatrixXd& A) {
    if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, A.cwiseAbs().maxCoeff())) return false;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(A);
    return es.eigenvalues().minCoeff() > -1e-9 * std::max(1.0, es.eigenvalues().maxCoeff());
}

/// Random-intercept ML by a one-dimensional search over rho = tau^2 / sigma^2
/// with sigma^2 and beta concentrated out.
struct UnivariateMl {
    double sigma2, tau2, logL;
    VectorXd beta;
};

UnivariateMl hand_univariate(const StackedDesign& D) {
    const double N = D.n_students();
    auto concentrated = [&](double rho, UnivariateMl* out) {
        MatrixXd info = MatrixXd::Zero(D.p, D.p);
        VectorXd rhs = VectorXd::Zero(D.p);
        for (const auto& b : D.classes) {
            // V / sigma^2 = I + rho J; inverse = I - rho / (1 + n rho) J
            const double c = rho / (1.0 + b.n * rho);
            const VectorXd sx = b.X.colwise().sum().transpose();
            info += b.X.transpose() * b.X - c * sx * sx.transpose();
            rhs += b.X.transpose() * b.y - c * sx * b.y.sum();
        }
        const VectorXd beta = info.ldlt().solve(rhs);
        double Q = 0.0, logdet = 0.0;
        for (const auto& b : D.classes) {
            const VectorXd e = b.y - b.X * beta;
            const double c = rho / (1.0 + b.n * rho);
            Q += e.squaredNorm() - c * e.sum() * e.sum();
            logdet += std::log(1.0 + b.n * rho);
        }
        const double s2 = Q / N;
        const double ll = -0.5 * (N * std::log(2 * M_PI) + N * std::log(s2) + logdet + N);
        if (out) *out = {s2, rho * s2, ll, beta};
        return ll;
    };
    // golden section on log rho
    double a = std::log(1e-6), b = std::log(1e3);
    const double gr = (std::sqrt(5.0) - 1) / 2;
    double c = b - gr * (b - a), d = a + gr * (b - a);
    double fc = concentrated(std::exp(c), nullptr), fd = concentrated(std::exp(d), nullptr);
    for (int it = 0; it < 200; ++it) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = concentrated(std::exp(c), nullptr);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = concentrated(std::exp(d), nullptr);
        }
    }
    UnivariateMl out;
    concentrated(std::exp(0.5 * (a + b)), &out);
    return out;
}

}  // namespace

TEST_CASE("fit recovers a well-posed instance and satisfies its invariants") {
    std::mt19937_64 g(20);
    oracle::InstanceShape shape;
    shape.J = 150;
    shape.n_min = 10;
    shape.n_max = 20;
    const auto truth = study_like();
    const auto D = oracle::random_design(shape, truth, g);
    const auto F = fit_ml(D);
    REQUIRE(F.converged());
    CHECK(F.logL >= F.logL_initial);
    for (std::size_t i = 1; i < F.trace.size(); ++i) CHECK(F.trace[i] >= F.trace[i - 1]);
    CHECK(Eigen::LLT<MatrixXd>(F.sigma).info() == Eigen::Success);
    CHECK(Eigen::LLT<MatrixXd>(F.tau).info() == Eigen::Success);
    CHECK(psd(F.cov_model));
    CHECK(psd(F.cov_robust));
    // beta and C_model come from GLS at the estimate
    const auto ref = oracle::dense_gls(F.params(), D);
    CHECK(oracle::max_rel_err(F.beta, ref.beta) < 1e-8);
    CHECK(oracle::max_rel_err(F.cov_model, ref.cov) < 1e-8);
    // stationarity
    ProfiledLikelihood L(D);
    const auto grad = L.analytic_gradient(F.theta);
    CHECK(grad.lpNorm<Eigen::Infinity>() < 1e-4 * std::max(1.0, std::abs(F.logL)));
    CHECK(F.convergence.grad_norm < 1e-5);
    // sanity against truth
    for (int m = 0; m < 3; ++m) {
        CHECK(std::abs(F.sigma(m, m) - truth.sigma(m, m)) < 0.15 * truth.sigma(m, m));
        CHECK(std::abs(F.tau(m, m) - truth.tau(m, m)) < 0.5 * truth.tau(m, m));
    }
    CHECK(F.varcomps.size() == 12);
    CHECK(F.varcomps[1].name == "sigma(read,math)");
    CHECK(F.varcomps[6].name == "tau(read)");
}

TEST_CASE("central-difference and analytic fits agree") {
    std::mt19937_64 g(21);
    oracle::InstanceShape shape;
    shape.J = 60;
    shape.n_min = 5;
    shape.n_max = 15;
    const auto D = oracle::random_design(shape, study_like(), g);
    const auto a = fit_ml(D, analytic());
    const auto f = fit_ml(D);
    REQUIRE(a.converged());
    REQUIRE(f.converged());
    CHECK(std::abs(a.logL - f.logL) < 1e-6);
    CHECK(oracle::max_rel_err(a.sigma, f.sigma) < 1e-4);
}

TEST_CASE("no class effects: fitted ICC is small") {
    std::mt19937_64 g(22);
    oracle::InstanceShape shape;
    shape.J = 200;
    shape.n_min = 12;
    shape.n_max = 20;
    auto truth = study_like();
    truth.tau = 1e-9 * MatrixXd::Identity(3, 3);
    const auto F = fit_ml(oracle::random_design(shape, truth, g), analytic());
    const auto r = decompose(F);
    for (int m = 0; m < 3; ++m) CHECK(r.icc(m) < 2.0);
}

TEST_CASE("a singular between-class optimum is flagged") {
    std::mt19937_64 g(25);
    oracle::InstanceShape shape;
    shape.J = 40;
    shape.n_min = 4;
    shape.n_max = 12;
    // with 40 classes the ML estimate of this nearly collinear T has rank 2
    const auto F = fit_ml(oracle::random_design(shape, study_like(), g), analytic());
    CHECK(F.convergence.near_singular_tau);
    CHECK(F.logL >= F.logL_initial);
}

TEST_CASE("J = 5: fitted maximum matches a dense grid search on a two-parameter slice") {
    std::mt19937_64 g(23);
    oracle::InstanceShape shape;
    shape.J = 5;
    shape.n_min = 3;
    shape.n_max = 6;
    shape.classes_per_school = 1;
    const auto D = oracle::random_design(shape, {oracle::random_pd(3, g, 4.0), oracle::random_pd(3, g, 2.0)}, g);
    const auto F = fit_ml(D, analytic());
    REQUIRE(F.converged());
    // slice through log sigma_11 and log tau_11, profiled over beta by dense GLS
    auto dense_profile = [&](double d0, double d6) {
        VectorXd th = F.theta;
        th(0) += d0;
        th(6) += d6;
        const auto c = CovarianceParams::from_theta(th, 3);
        return oracle::dense_loglik(c, oracle::dense_gls(c, D).beta, D);
    };
    double best = -INFINITY, c0 = 0.0, c6 = 0.0, half = 1.0;
    for (int zoom = 0; zoom < 8; ++zoom) {
        double b0 = c0, b6 = c6;
        for (int i = -10; i <= 10; ++i) {
            for (int k = -10; k <= 10; ++k) {
                const double v = dense_profile(c0 + half * i / 10.0, c6 + half * k / 10.0);
                if (v > best) {
                    best = v;
                    b0 = c0 + half * i / 10.0;
                    b6 = c6 + half * k / 10.0;
                }
            }
        }
        c0 = b0;
        c6 = b6;
        half /= 5.0;
    }
    CHECK(std::abs(best - F.logL) < 1e-4);
    CHECK(std::abs(c0) < 1e-2);
    CHECK(std::abs(c6) < 1e-2);
}

TEST_CASE("M = 1 agrees with a hand-rolled random-intercept ML fit") {
    std::mt19937_64 g(24);
    oracle::InstanceShape shape;
    shape.M = 1;
    shape.q = 2;
    shape.J = 80;
    shape.n_min = 3;
    shape.n_max = 25;
    for (int rep = 0; rep < 3; ++rep) {
        const auto D = oracle::random_design(shape, {50.0 * MatrixXd::Ones(1, 1), 12.0 * MatrixXd::Ones(1, 1)}, g);
        const auto F = fit_ml(D, analytic());
        const auto H = hand_univariate(D);
        REQUIRE(F.converged());
        CHECK(oracle::rel_err(F.sigma(0, 0), H.sigma2) < 1e-6);
        CHECK(oracle::rel_err(F.tau(0, 0), H.tau2) < 1e-6);
        CHECK(oracle::rel_err(F.logL, H.logL) < 1e-9);
        CHECK(oracle::max_rel_err(F.beta, H.beta) < 1e-6);
    }
}

TEST_CASE("scale equivariance") {
    std::mt19937_64 g(25);
    oracle::InstanceShape shape;
    shape.J = 150;
    shape.n_min = 8;
    shape.n_max = 16;
    const auto D = oracle::random_design(shape, study_like(), g);
    StackedDesign S = D;
    const double c = 3.5;
    for (auto& b : S.classes) b.y *= c;
    const auto a = fit_ml(D, analytic());
    const auto s = fit_ml(S, analytic());
    REQUIRE(a.converged());
    REQUIRE(s.converged());
    CHECK(oracle::max_rel_err(s.beta, c * a.beta) < 1e-8);
    CHECK(oracle::max_rel_err(s.sigma, c * c * a.sigma) < 1e-8);
    CHECK(oracle::max_rel_err(s.tau, c * c * a.tau) < 1e-8);
    const auto ra = decompose(a), rs = decompose(s);
    CHECK((ra.within_corr - rs.within_corr).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((ra.between_corr - rs.between_corr).cwiseAbs().maxCoeff() < 1e-8);
    // icc is in percent; compared as a proportion like the correlations
    CHECK((ra.icc - rs.icc).cwiseAbs().maxCoeff() / 100.0 < 1e-8);
}

TEST_CASE("fitting twice is bit-identical") {
    std::mt19937_64 g(26);
    oracle::InstanceShape shape;
    shape.J = 30;
    const auto D = oracle::random_design(shape, study_like(), g);
    const auto a = fit_ml(D), b = fit_ml(D);
    CHECK(a.logL == b.logL);
    CHECK(a.beta == b.beta);
    CHECK(a.sigma == b.sigma);
    CHECK(a.cov_robust == b.cov_robust);
}

TEST_CASE("iteration cap flags the result and keeps the best iterate") {
    std::mt19937_64 g(27);
    oracle::InstanceShape shape;
    shape.J = 40;
    const auto D = oracle::random_design(shape, study_like(), g);
    FitOptions o;
    o.optimizer.max_iter = 2;
    const auto F = fit_ml(D, o);
    CHECK(F.convergence.status == OptimStatus::max_iter);
    CHECK(!F.converged());
    CHECK(F.logL >= F.logL_initial);
    CHECK(F.convergence.iterations == 2);
}

TEST_CASE("robust covariance") {
    std::mt19937_64 g(28);
    SUBCASE("a single school is an error") {
        oracle::InstanceShape shape;
        shape.J = 6;
        shape.classes_per_school = 100;
        const auto D = oracle::random_design(shape, study_like(), g);
        const auto F = fit_ml(D, analytic());
        CHECK_THROWS_AS(robust_cluster_cov(F, D, school_clusters(D)), ValidationError);
    }
    SUBCASE("one class per school, correct model: robust close to model SEs") {
        oracle::InstanceShape shape;
        shape.J = 600;
        shape.n_min = 8;
        shape.n_max = 16;
        shape.classes_per_school = 1;
        const auto D = oracle::random_design(shape, study_like(), g);
        const auto F = fit_ml(D, analytic());
        REQUIRE(F.converged());
        for (int k = 0; k < D.p; ++k) {
            const double ratio = std::sqrt(F.cov_robust(k, k) / F.cov_model(k, k));
            CHECK(ratio > 0.8);
            CHECK(ratio < 1.2);
        }
    }
    SUBCASE("duplicated classes in two-class schools inflate the robust SEs") {
        oracle::InstanceShape shape;
        shape.J = 60;
        shape.classes_per_school = 1;
        auto D = oracle::random_design(shape, study_like(), g);
        const auto n = D.classes.size();
        for (std::size_t j = 0; j < n; ++j) {
            auto copy = D.classes[j];
            copy.class_id += "-dup";
            D.classes.push_back(copy);
        }
        const auto F = fit_ml(D, analytic());
        REQUIRE(F.converged());
        for (int k = 0; k < D.p; ++k) CHECK(F.cov_robust(k, k) > F.cov_model(k, k));
    }
    SUBCASE("small-sample correction scales the meat by K / (K - 1)") {
        oracle::InstanceShape shape;
        shape.J = 20;
        const auto D = oracle::random_design(shape, study_like(), g);
        const auto F = fit_ml(D, analytic());
        const auto a = robust_cluster_cov(F, D, school_clusters(D), false);
        const auto b = robust_cluster_cov(F, D, school_clusters(D), true);
        const double K = 10.0;
        CHECK(oracle::max_rel_err(b, a * K / (K - 1)) < 1e-12);
    }
}

TEST_CASE("correlation decomposition") {
    SUBCASE("Sigma = T = I") {
        const auto r = decompose(MatrixXd::Identity(3, 3), MatrixXd::Identity(3, 3), {"a", "b", "c"});
        for (int i = 0; i < 3; ++i) {
            for (int k = 0; k < 3; ++k) {
                if (i == k) {
                    CHECK(r.pct_between(i, k) == doctest::Approx(50.0));
                    CHECK(r.icc(i) == doctest::Approx(50.0));
                } else {
                    CHECK(r.within_corr(i, k) == 0.0);
                    CHECK(r.between_corr(i, k) == 0.0);
                    CHECK(r.total_corr(i, k) == 0.0);
                }
            }
        }
    }
    SUBCASE("random PD pairs") {
        std::mt19937_64 g(29);
        for (int rep = 0; rep < 100; ++rep) {
            const MatrixXd S = oracle::random_pd(3, g, 5.0), T = oracle::random_pd(3, g, 1.0);
            const auto r = decompose(S, T);
            const MatrixXd tot = S + T;
            for (int i = 0; i < 3; ++i) {
                CHECK(r.within_corr(i, i) == doctest::Approx(1.0));
                CHECK(r.icc(i) == doctest::Approx(100.0 * T(i, i) / (S(i, i) + T(i, i))).epsilon(1e-12));
                CHECK(r.icc(i) > 0.0);
                CHECK(r.icc(i) < 100.0);
                for (int k = 0; k < 3; ++k) {
                    CHECK(std::abs(r.total_corr(i, k) - tot(i, k) / std::sqrt(tot(i, i) * tot(k, k))) < 1e-12);
                    CHECK(std::abs(r.within_corr(i, k)) <= 1.0);
                    CHECK(std::abs(r.between_corr(i, k)) <= 1.0);
                }
            }
        }
    }
    SUBCASE("not positive definite") {
        CHECK_THROWS_AS(decompose(MatrixXd::Zero(2, 2), MatrixXd::Identity(2, 2)), ValidationError);
    }
}

TEST_CASE("variance explained") {
    std::mt19937_64 g(30);
    std::normal_distribution<double> z;
    // class-level covariate carrying 30% of the between-class variance
    const double tau_total = 100.0, sigma2 = 400.0, b = std::sqrt(0.3 * tau_total);
    StackedDesign full, null;
    full.M = null.M = 1;
    full.p = 2;
    null.p = 1;
    full.layout.outcomes = null.layout.outcomes = {"y"};
    full.layout.coefficients = {{"y:(intercept)", "(intercept)", 0}, {"y:x", "x", 0}};
    null.layout.coefficients = {{"y:(intercept)", "(intercept)", 0}};
    for (int j = 0; j < 2000; ++j) {
        const int n = 10;
        const double x = z(g), u = std::sqrt(0.7 * tau_total) * z(g);
        ClassBlock blk;
        blk.class_id = "c" + std::to_string(j);
        blk.school_id = "s" + std::to_string(j / 2);
        blk.n = n;
        blk.y.resize(n);
        blk.X.resize(n, 2);
        for (int i = 0; i < n; ++i) {
            blk.student_ids.push_back(blk.class_id + "-" + std::to_string(i));
            blk.X(i, 0) = 1.0;
            blk.X(i, 1) = x;
            blk.y(i) = 500.0 + b * x + u + std::sqrt(sigma2) * z(g);
        }
        full.classes.push_back(blk);
        blk.X.conservativeResize(n, 1);
        null.classes.push_back(blk);
    }
    const auto fn = fit_ml(null, analytic()), ff = fit_ml(full, analytic());
    const auto v = variance_explained(fn, ff);
    CHECK(std::abs(v.between_reduction(0) - 30.0) < 5.0);
    CHECK(std::abs(v.within_reduction(0)) < 2.0);
    const auto same = variance_explained(fn, fn);
    CHECK(same.between_reduction(0) == 0.0);
    CHECK(same.within_reduction(0) == 0.0);

    FitResult other = fn;
    other.layout.outcomes = {"z"};
    CHECK_THROWS_AS(variance_explained(fn, other), ValidationError);
}
