#include "mvmlm/mi.hpp"

#include "mvmlm/error.hpp"
#include "mvmlm/transforms.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/fisher_f.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <thread>

namespace mvmlm {

double ScalarPool::se() const { return std::sqrt(total); }

ScalarPool rubin_combine(const std::vector<double>& est, const std::vector<double>& var, std::string name) {
    if (est.size() != var.size()) throw ValidationError("estimates and variances differ in length");
    if (est.empty()) throw ValidationError("nothing to combine");
    const double m = static_cast<double>(est.size());
    ScalarPool s;
    s.name = std::move(name);
    // shifted by the first estimate so identical imputations give B = 0 exactly
    double shift = 0.0, wsum = 0.0;
    for (std::size_t l = 0; l < est.size(); ++l) {
        shift += est[l] - est[0];
        wsum += var[l];
    }
    s.estimate = est[0] + shift / m;
    s.within = wsum / m;
    double ss = 0.0;
    for (double e : est) ss += (e - s.estimate) * (e - s.estimate);
    s.between = est.size() > 1 ? ss / (m - 1.0) : 0.0;
    const double inflated = (1.0 + 1.0 / m) * s.between;
    s.total = s.within + inflated;
    if (inflated > 0.0 && est.size() > 1) {
        const double ratio = 1.0 + s.within / inflated;
        s.df = std::min((m - 1.0) * ratio * ratio, kDfCap);
    } else {
        s.df = kDfCap;
    }
    return s;
}

EqualityTest d1_test(const std::vector<Eigen::VectorXd>& theta, const std::vector<Eigen::MatrixXd>& U) {
    if (theta.size() != U.size()) throw ValidationError("estimates and covariances differ in count");
    if (theta.size() < 2) throw ValidationError("the D1 test needs at least two imputations");
    const auto m = static_cast<double>(theta.size());
    const auto k = theta.front().size();
    if (k < 1) throw ValidationError("empty contrast");

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(k, k);
    for (std::size_t l = 0; l < theta.size(); ++l) {
        if (theta[l].size() != k || U[l].rows() != k || U[l].cols() != k) {
            throw ValidationError("inconsistent contrast dimensions across imputations");
        }
        mean += theta[l] - theta[0];
        W += U[l];
    }
    mean = theta[0] + mean / m;
    W /= m;
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(k, k);
    for (const auto& t : theta) B += (t - mean) * (t - mean).transpose();
    B /= (m - 1.0);

    Eigen::LDLT<Eigen::MatrixXd> ldlt(0.5 * (W + W.transpose()));
    const double scale = W.diagonal().cwiseAbs().maxCoeff();
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(scale > 0.0) ||
        ldlt.vectorD().minCoeff() <= 1e-13 * scale) {
        throw NumericalError("within-imputation covariance of the contrast is singular", INFINITY);
    }

    EqualityTest t;
    t.k = static_cast<int>(k);
    const double kd = static_cast<double>(k);
    t.r = (1.0 + 1.0 / m) * (ldlt.solve(B)).trace() / kd;
    if (t.r < 0.0) t.r = 0.0;
    t.statistic = mean.dot(ldlt.solve(mean)) / (kd * (1.0 + t.r));
    if (!(t.statistic > 0.0)) {
        t.statistic = std::max(t.statistic, 0.0);
        t.p_value = 1.0;
    }

    double nu = std::numeric_limits<double>::infinity();
    if (t.r > 0.0) {
        const double tt = kd * (m - 1.0);
        if (tt > 4.0) {
            const double f = 1.0 + (1.0 - 2.0 / tt) / t.r;
            nu = 4.0 + (tt - 4.0) * f * f;
        } else {
            const double f = 1.0 + 1.0 / t.r;
            nu = tt * (1.0 + 1.0 / kd) * f * f / 2.0;
        }
    }
    t.nu = std::min(nu, kDfCap);
    if (t.statistic > 0.0) {
        if (std::isfinite(nu)) {
            boost::math::fisher_f_distribution<double> F(kd, nu);
            t.p_value = boost::math::cdf(boost::math::complement(F, t.statistic));
        } else {
            boost::math::chi_squared_distribution<double> chi(kd);
            t.p_value = boost::math::cdf(boost::math::complement(chi, kd * t.statistic));
        }
    }
    return t;
}

Eigen::MatrixXd equality_contrast(const CoefficientLayout& layout, const std::string& term) {
    const int M = static_cast<int>(layout.outcomes.size());
    if (layout.is_common(term)) {
        throw ValidationError("term '" + term + "' is shared across outcomes; there is nothing to test");
    }
    std::vector<int> idx;
    for (int m = 0; m < M; ++m) {
        const int i = layout.index_of(term, m);
        if (i < 0) {
            throw ValidationError("term '" + term + "' has no coefficient for outcome '" +
                                  layout.outcomes[static_cast<std::size_t>(m)] + "'");
        }
        idx.push_back(i);
    }
    if (M < 2) throw ValidationError("equality across outcomes needs at least two outcomes");
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(M - 1, layout.size());
    for (int r = 0; r + 1 < M; ++r) {
        C(r, idx[static_cast<std::size_t>(r)]) = 1.0;
        C(r, idx[static_cast<std::size_t>(r + 1)]) = -1.0;
    }
    return C;
}

std::vector<std::string> testable_terms(const CoefficientLayout& layout) {
    std::vector<std::string> out;
    const int M = static_cast<int>(layout.outcomes.size());
    if (M < 2) return out;
    for (const auto& c : layout.coefficients) {
        if (c.outcome != 0) continue;
        bool all = true;
        for (int m = 1; m < M; ++m) all = all && layout.index_of(c.term, m) >= 0;
        if (all) out.push_back(c.term);
    }
    return out;
}

std::string to_string(CovarianceChoice c) { return c == CovarianceChoice::robust ? "robust" : "model"; }

CovarianceChoice covariance_choice_from_string(const std::string& s) {
    if (s == "robust") return CovarianceChoice::robust;
    if (s == "model") return CovarianceChoice::model;
    throw ValidationError("unknown covariance choice '" + s + "' (expected robust or model)");
}

int MIFitResult::m() const { return static_cast<int>(used_indices().size()); }

Eigen::VectorXd MIFitResult::beta() const {
    Eigen::VectorXd b(static_cast<Eigen::Index>(coefficients.size()));
    for (std::size_t i = 0; i < coefficients.size(); ++i) b(static_cast<Eigen::Index>(i)) = coefficients[i].estimate;
    return b;
}

const Eigen::MatrixXd& MIFitResult::coef_cov(std::size_t l) const {
    const auto& f = fits.at(l);
    return covariance == CovarianceChoice::robust ? f.cov_robust : f.cov_model;
}

std::vector<std::size_t> MIFitResult::used_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < used.size(); ++l) {
        if (used[l]) out.push_back(l);
    }
    return out;
}

MIFitResult combine_fits(std::vector<FitResult> fits, CovarianceChoice covariance) {
    if (fits.empty()) throw ValidationError("no imputations to combine");
    MIFitResult mi;
    mi.covariance = covariance;
    mi.layout = fits.front().layout;
    for (const auto& f : fits) {
        if (f.layout.names() != mi.layout.names()) throw ValidationError("imputations have different coefficient layouts");
        mi.used.push_back(f.converged());
    }
    mi.fits = std::move(fits);
    for (std::size_t l = 0; l < mi.fits.size(); ++l) {
        if (!mi.used[l]) {
            mi.flagged = true;
            mi.warnings.push_back("plausible value " + std::to_string(l + 1) + " did not converge (" +
                                  to_string(mi.fits[l].convergence.status) + "); excluded from combining");
        }
    }
    const auto use = mi.used_indices();
    if (use.empty()) throw NumericalError("no imputation converged", INFINITY);
    if (use.size() < 2) mi.warnings.push_back("fewer than two usable imputations; between variance is zero");

    if (covariance == CovarianceChoice::robust) {
        for (auto l : use) {
            if (!mi.fits[l].cov_robust.allFinite()) {
                throw ValidationError("robust covariance unavailable (fewer than two schools); use model-based");
            }
        }
    }

    const auto names = mi.layout.names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        std::vector<double> est, var;
        const auto ii = static_cast<Eigen::Index>(i);
        for (auto l : use) {
            est.push_back(mi.fits[l].beta(ii));
            var.push_back(mi.coef_cov(l)(ii, ii));
        }
        mi.coefficients.push_back(rubin_combine(est, var, names[i]));
    }

    const auto& vc0 = mi.fits[use.front()].varcomps;
    for (std::size_t i = 0; i < vc0.size(); ++i) {
        std::vector<double> est, var;
        for (auto l : use) {
            const auto& v = mi.fits[l].varcomps[i];
            est.push_back(v.estimate);
            const double se = covariance == CovarianceChoice::robust && std::isfinite(v.se_robust) ? v.se_robust : v.se_model;
            var.push_back(se * se);
        }
        mi.varcomps.push_back(rubin_combine(est, var, vc0[i].name));
    }

    mi.sigma = Eigen::MatrixXd::Zero(mi.fits[use.front()].sigma.rows(), mi.fits[use.front()].sigma.cols());
    mi.tau = mi.sigma;
    for (auto l : use) {
        mi.sigma += mi.fits[l].sigma;
        mi.tau += mi.fits[l].tau;
    }
    mi.sigma /= static_cast<double>(use.size());
    mi.tau /= static_cast<double>(use.size());
    return mi;
}

MIFitResult fit_mi(const Dataset& d, const ModelSpec& spec, const MIOptions& opts) {
    if (d.n_pv < 2) throw ValidationError("multiple-imputation fitting needs at least two plausible values");
    const auto prepared = prepare_analysis(d, spec);
    const int m = d.n_pv;
    std::vector<FitResult> fits(static_cast<std::size_t>(m));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(m));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int l = next++; l < m; l = next++) {
            try {
                const auto D = build_design(prepared.data, spec, l + 1);
                fits[static_cast<std::size_t>(l)] = fit_ml(D, opts.fit);
            } catch (...) {
                errors[static_cast<std::size_t>(l)] = std::current_exception();
            }
        }
    };
    const int n_threads = std::clamp(opts.threads, 1, m);
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    auto mi = combine_fits(std::move(fits), opts.covariance);
    mi.warnings.insert(mi.warnings.begin(), prepared.warnings.begin(), prepared.warnings.end());
    return mi;
}

EqualityTest equality_test(const MIFitResult& mi, const std::string& term) {
    const Eigen::MatrixXd C = equality_contrast(mi.layout, term);
    std::vector<Eigen::VectorXd> theta;
    std::vector<Eigen::MatrixXd> U;
    for (auto l : mi.used_indices()) {
        theta.push_back(C * mi.fits[l].beta);
        U.push_back(C * mi.coef_cov(l) * C.transpose());
    }
    auto t = d1_test(theta, U);
    t.term = term;
    t.C = C;
    return t;
}

}  // namespace mvmlm
