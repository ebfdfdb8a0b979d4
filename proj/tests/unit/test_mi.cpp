#include "mvmlm/error.hpp"
#include "mvmlm/mi.hpp"
#include "mvmlm/simulate.hpp"

#include "../support/oracles.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace mvmlm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Draws {
    std::vector<VectorXd> theta;
    std::vector<MatrixXd> U;
};

Draws random_draws(int m, int k, std::mt19937_64& g, double spread = 1.0) {
    std::normal_distribution<double> z;
    Draws d;
    VectorXd centre(k);
    for (int i = 0; i < k; ++i) centre(i) = z(g);
    for (int l = 0; l < m; ++l) {
        VectorXd t(k);
        for (int i = 0; i < k; ++i) t(i) = centre(i) + spread * z(g);
        d.theta.push_back(t);
        d.U.push_back(oracle::random_pd(k, g, 0.5));
    }
    return d;
}

SimConfig small_config(int per_area, std::uint64_t seed) {
    auto c = SimConfig::study_defaults();
    c.classes_per_area = std::vector<int>(c.areas.size(), per_area);
    c.seed = seed;
    return c;
}

CoefficientLayout layout_with_common() {
    CoefficientLayout L;
    L.outcomes = {"read", "math", "scie"};
    for (int m = 0; m < 3; ++m) L.coefficients.push_back({L.outcomes[m] + ":(intercept)", "(intercept)", m});
    for (int m = 0; m < 3; ++m) L.coefficients.push_back({L.outcomes[m] + ":female", "female", m});
    L.coefficients.push_back({"gva_below", "gva_below", -1});
    L.coefficients.push_back({"read:extra", "extra", 0});
    L.coefficients.push_back({"math:extra", "extra", 1});
    return L;
}

}  // namespace

TEST_CASE("Rubin rules on the two-imputation hand example") {
    const auto s = rubin_combine({1.0, 3.0}, {1.0, 1.0}, "x");
    CHECK(s.estimate == 2.0);
    CHECK(s.within == 1.0);
    CHECK(s.between == 2.0);
    CHECK(s.total == 4.0);
    CHECK(s.df == doctest::Approx(16.0 / 9.0).epsilon(1e-15));
    CHECK(s.se() == 2.0);
    CHECK(s.name == "x");
}

TEST_CASE("identical imputations have no between variance") {
    const auto s = rubin_combine({5.5, 5.5, 5.5, 5.5, 5.5}, {0.3, 0.3, 0.3, 0.3, 0.3});
    CHECK(s.estimate == 5.5);
    CHECK(s.between == 0.0);
    CHECK(s.total == s.within);
    CHECK(s.df == kDfCap);
    CHECK_THROWS_AS(rubin_combine({}, {}), ValidationError);
    CHECK_THROWS_AS(rubin_combine({1.0}, {1.0, 2.0}), ValidationError);
}

TEST_CASE("Rubin combining ignores the imputation order") {
    std::mt19937_64 g(51);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> e(5), v(5);
        for (int l = 0; l < 5; ++l) {
            e[l] = z(g);
            v[l] = std::exp(z(g));
        }
        const auto a = rubin_combine(e, v);
        std::vector<std::size_t> perm = {0, 1, 2, 3, 4};
        std::shuffle(perm.begin(), perm.end(), g);
        std::vector<double> e2, v2;
        for (auto i : perm) {
            e2.push_back(e[i]);
            v2.push_back(v[i]);
        }
        const auto b = rubin_combine(e2, v2);
        CHECK(b.estimate == doctest::Approx(a.estimate).epsilon(1e-13));
        CHECK(b.total == doctest::Approx(a.total).epsilon(1e-13));
        CHECK(b.df == doctest::Approx(a.df).epsilon(1e-12));

        auto d = random_draws(5, 2, g);
        const auto t1 = d1_test(d.theta, d.U);
        std::reverse(d.theta.begin(), d.theta.end());
        std::reverse(d.U.begin(), d.U.end());
        const auto t2 = d1_test(d.theta, d.U);
        CHECK(t2.statistic == doctest::Approx(t1.statistic).epsilon(1e-12));
        CHECK(t2.p_value == doctest::Approx(t1.p_value).epsilon(1e-10));
    }
}

TEST_CASE("total variance grows with the between variance") {
    std::mt19937_64 g(52);
    std::normal_distribution<double> z;
    std::vector<double> dev(5);
    for (auto& x : dev) x = z(g);
    const std::vector<double> var(5, 1.7);
    double last = -1.0;
    for (double spread = 0.0; spread < 5.0; spread += 0.25) {
        std::vector<double> e;
        for (double x : dev) e.push_back(3.0 + spread * x);
        const auto s = rubin_combine(e, var);
        CHECK(s.within == doctest::Approx(1.7));
        CHECK(s.total >= s.within);
        CHECK(s.total >= last);
        last = s.total;
    }
}

TEST_CASE("D1 of a zero mean is zero with p-value one") {
    std::vector<VectorXd> th = {VectorXd::Constant(2, 1.0), VectorXd::Constant(2, -1.0)};
    std::vector<MatrixXd> U = {MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2)};
    const auto t = d1_test(th, U);
    CHECK(t.statistic == 0.0);
    CHECK(t.p_value == 1.0);
    CHECK(t.k == 2);
}

TEST_CASE("D1 is invariant to reparameterizing the contrast rows") {
    std::mt19937_64 g(53);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 30; ++rep) {
        const int k = 1 + rep % 3;
        const auto d = random_draws(5, k, g, 0.7);
        MatrixXd G(k, k);
        do {
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) G(i, j) = z(g);
        } while (std::abs(G.determinant()) < 0.1);
        Draws e;
        for (std::size_t l = 0; l < d.theta.size(); ++l) {
            e.theta.push_back(G * d.theta[l]);
            e.U.push_back(G * d.U[l] * G.transpose());
        }
        const auto a = d1_test(d.theta, d.U);
        const auto b = d1_test(e.theta, e.U);
        CHECK(b.statistic == doctest::Approx(a.statistic).epsilon(1e-9));
        CHECK(b.r == doctest::Approx(a.r).epsilon(1e-9));
        CHECK(b.p_value == doctest::Approx(a.p_value).epsilon(1e-8));
    }
}

TEST_CASE("identical imputations reduce D1 to the Wald chi-square test") {
    std::mt19937_64 g(54);
    for (int rep = 0; rep < 20; ++rep) {
        const int k = 1 + rep % 3;
        const auto d = random_draws(1, k, g);
        const std::vector<VectorXd> th(5, d.theta[0]);
        const std::vector<MatrixXd> U(5, d.U[0]);
        const auto t = d1_test(th, U);
        const double wald = d.theta[0].dot(d.U[0].ldlt().solve(d.theta[0]));
        CHECK(t.r == 0.0);
        CHECK(t.nu == kDfCap);
        CHECK(std::abs(t.statistic * k - wald) <= 1e-8 * std::max(1.0, wald));
        boost::math::chi_squared_distribution<double> chi(k);
        CHECK(t.p_value == doctest::Approx(boost::math::cdf(boost::math::complement(chi, wald))).epsilon(1e-10));
    }
}

TEST_CASE("one contrast row is the squared scalar MI t-test") {
    std::mt19937_64 g(55);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 20; ++rep) {
        // m = 5 keeps k(m-1) = 4 on the branch where the F df equals the scalar df
        std::vector<double> e, v;
        std::vector<VectorXd> th;
        std::vector<MatrixXd> U;
        for (int l = 0; l < 5; ++l) {
            e.push_back(0.8 + 0.6 * z(g));
            v.push_back(0.2 + 0.1 * std::abs(z(g)));
            th.push_back(VectorXd::Constant(1, e.back()));
            U.push_back(MatrixXd::Constant(1, 1, v.back()));
        }
        const auto s = rubin_combine(e, v);
        const auto t = d1_test(th, U);
        const double tstat = s.estimate / s.se();
        CHECK(t.statistic == doctest::Approx(tstat * tstat).epsilon(1e-12));
        CHECK(t.nu == doctest::Approx(s.df).epsilon(1e-12));
        boost::math::students_t_distribution<double> T(s.df);
        const double p = 2.0 * boost::math::cdf(boost::math::complement(T, std::abs(tstat)));
        CHECK(t.p_value == doctest::Approx(p).epsilon(1e-9));
    }
}

TEST_CASE("D1 denominator df follows both branches") {
    std::mt19937_64 g(56);
    // t = k(m - 1) = 8 > 4
    const auto d = random_draws(5, 2, g);
    const auto t = d1_test(d.theta, d.U);
    const double tt = 8.0;
    const double f = 1.0 + (1.0 - 2.0 / tt) / t.r;
    CHECK(t.nu == doctest::Approx(std::min(4.0 + (tt - 4.0) * f * f, kDfCap)));
    // t = 2 <= 4
    const auto d2 = random_draws(3, 1, g);
    const auto t2 = d1_test(d2.theta, d2.U);
    const double f2 = 1.0 + 1.0 / t2.r;
    CHECK(t2.nu == doctest::Approx(std::min(2.0 * 2.0 * f2 * f2 / 2.0, kDfCap)));
    CHECK(t2.p_value >= 0.0);
    CHECK(t2.p_value <= 1.0);
}

TEST_CASE("D1 input errors") {
    std::mt19937_64 g(57);
    const auto d = random_draws(1, 2, g);
    CHECK_THROWS_AS(d1_test(d.theta, d.U), ValidationError);
    std::vector<MatrixXd> singular(2, MatrixXd::Zero(2, 2));
    CHECK_THROWS_AS(d1_test({d.theta[0], d.theta[0]}, singular), NumericalError);
    CHECK_THROWS_AS(d1_test({d.theta[0], VectorXd::Zero(3)}, {d.U[0], d.U[0]}), ValidationError);
}

TEST_CASE("equality contrasts") {
    const auto L = layout_with_common();
    const MatrixXd C = equality_contrast(L, "female");
    REQUIRE(C.rows() == 2);
    REQUIRE(C.cols() == L.size());
    CHECK(C(0, 3) == 1.0);
    CHECK(C(0, 4) == -1.0);
    CHECK(C(1, 4) == 1.0);
    CHECK(C(1, 5) == -1.0);
    CHECK(C.cwiseAbs().sum() == 4.0);

    VectorXd beta = VectorXd::LinSpaced(L.size(), 1.0, 9.0);
    beta.segment(3, 3).setConstant(-11.96);
    CHECK(C * beta == VectorXd::Zero(2));

    CHECK_THROWS_AS(equality_contrast(L, "gva_below"), ValidationError);
    CHECK_THROWS_AS(equality_contrast(L, "extra"), ValidationError);
    CHECK_THROWS_AS(equality_contrast(L, "nothing"), ValidationError);

    CoefficientLayout two;
    two.outcomes = {"read", "math"};
    two.coefficients = {{"read:female", "female", 0}, {"math:female", "female", 1}};
    const MatrixXd C2 = equality_contrast(two, "female");
    CHECK(C2.rows() == 1);
    CHECK(C2(0, 0) == 1.0);
    CHECK(C2(0, 1) == -1.0);

    const auto terms = testable_terms(L);
    CHECK(terms == std::vector<std::string>{"(intercept)", "female"});
}

TEST_CASE("fit_mi on simulated plausible values") {
    auto c = small_config(10, 501);
    const auto sim = simulate_population(c);
    const auto spec = generative_model(c);
    MIOptions o1;
    const auto a = fit_mi(sim.data, spec, o1);
    MIOptions o4;
    o4.threads = 4;
    const auto b = fit_mi(sim.data, spec, o4);
    REQUIRE(a.m() == 5);
    CHECK_FALSE(a.flagged);
    // thread count does not change the result
    for (std::size_t i = 0; i < a.coefficients.size(); ++i) {
        CHECK(a.coefficients[i].estimate == b.coefficients[i].estimate);
        CHECK(a.coefficients[i].total == b.coefficients[i].total);
    }
    for (const auto& s : a.coefficients) {
        CHECK(s.total >= s.within);
        CHECK(s.between > 0.0);
    }
    MatrixXd sig = MatrixXd::Zero(3, 3);
    for (const auto& f : a.fits) sig += f.sigma / 5.0;
    CHECK(oracle::max_rel_err(a.sigma, sig) < 1e-12);
    for (const auto& term : testable_terms(a.layout)) {
        const auto t = equality_test(a, term);
        CHECK(t.k == 2);
        CHECK(t.p_value >= 0.0);
        CHECK(t.p_value <= 1.0);
        CHECK(t.statistic >= 0.0);
    }
    CHECK_THROWS_AS(equality_test(a, "no_such_term"), ValidationError);

    // model-based covariance enters on request
    const auto mm = combine_fits(a.fits, CovarianceChoice::model);
    CHECK(mm.coefficients[0].within == doctest::Approx(
                                         (a.fits[0].cov_model(0, 0) + a.fits[1].cov_model(0, 0) + a.fits[2].cov_model(0, 0) +
                                          a.fits[3].cov_model(0, 0) + a.fits[4].cov_model(0, 0)) /
                                         5.0));
}

TEST_CASE("error-free plausible values give zero between variance") {
    auto c = small_config(8, 502);
    c.sd_meas = 0.0;
    c.n_pv = 3;
    const auto sim = simulate_population(c);
    const auto mi = fit_mi(sim.data, generative_model(c));
    for (const auto& s : mi.coefficients) {
        CHECK(s.between == 0.0);
        CHECK(s.total == s.within);
        CHECK(s.df == kDfCap);
    }
}

TEST_CASE("non-converged imputations are flagged and left out") {
    std::mt19937_64 g(58);
    oracle::InstanceShape shape;
    shape.J = 30;
    shape.classes_per_school = 3;
    MatrixXd S = MatrixXd::Identity(3, 3) * 100.0, T = MatrixXd::Identity(3, 3) * 30.0;
    std::vector<FitResult> fits;
    for (int l = 0; l < 4; ++l) fits.push_back(fit_ml(oracle::random_design(shape, {S, T}, g)));
    fits[2].convergence.status = OptimStatus::max_iter;
    const auto mi = combine_fits(fits);
    CHECK(mi.flagged);
    CHECK(mi.m() == 3);
    CHECK(mi.used == std::vector<bool>{true, true, false, true});
    REQUIRE(mi.warnings.size() == 1);
    CHECK(mi.warnings[0].find("plausible value 3") != std::string::npos);
    const auto ref = rubin_combine({fits[0].beta(0), fits[1].beta(0), fits[3].beta(0)},
                                   {fits[0].cov_robust(0, 0), fits[1].cov_robust(0, 0), fits[3].cov_robust(0, 0)});
    CHECK(mi.coefficients[0].estimate == doctest::Approx(ref.estimate).epsilon(1e-14));
    CHECK(mi.coefficients[0].total == doctest::Approx(ref.total).epsilon(1e-14));

    for (auto& f : fits) f.convergence.status = OptimStatus::stalled;
    CHECK_THROWS_AS(combine_fits(fits), NumericalError);
}

TEST_CASE("fit_mi needs at least two plausible values") {
    auto c = small_config(4, 503);
    c.n_pv = 1;
    const auto sim = simulate_population(c);
    CHECK_THROWS_AS(fit_mi(sim.data, generative_model(c)), ValidationError);
    CHECK(covariance_choice_from_string("model") == CovarianceChoice::model);
    CHECK_THROWS_AS(covariance_choice_from_string("sandwich"), ValidationError);
}
