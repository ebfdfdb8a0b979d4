#pragma once

#include "mvmlm/dataset.hpp"
#include "mvmlm/design.hpp"
#include "mvmlm/fit.hpp"
#include "mvmlm/model_spec.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace mvmlm {

/// Reported degrees of freedom never exceed this value.
inline constexpr double kDfCap = 1e6;

/// Rubin's rules for one scalar.
struct ScalarPool {
    std::string name;
    double estimate = 0.0;
    double within = 0.0;   // W, mean of the per-imputation variances
    double between = 0.0;  // B, sample variance of the estimates
    double total = 0.0;    // W + (1 + 1/m) B
    double df = kDfCap;
    double se() const;
};

ScalarPool rubin_combine(const std::vector<double>& estimates, const std::vector<double>& variances,
                         std::string name = {});

struct EqualityTest {
    std::string term;
    Eigen::MatrixXd C;  // k x p contrast
    double statistic = 0.0;  // D1
    int k = 1;
    double nu = kDfCap;  // denominator df, capped for reporting
    double p_value = 1.0;
    double r = 0.0;  // relative increase in variance
};

/// The D1 Wald test of theta = 0 pooled over m imputations. `theta[l]` and
/// `U[l]` are the contrast estimate and its covariance in imputation l.
EqualityTest d1_test(const std::vector<Eigen::VectorXd>& theta, const std::vector<Eigen::MatrixXd>& U);

/// (M-1) x p contrast of adjacent-outcome differences for `term`.
Eigen::MatrixXd equality_contrast(const CoefficientLayout& layout, const std::string& term);

enum class CovarianceChoice { robust, model };

std::string to_string(CovarianceChoice c);
CovarianceChoice covariance_choice_from_string(const std::string& s);

struct MIOptions {
    FitOptions fit;
    CovarianceChoice covariance = CovarianceChoice::robust;
    int threads = 1;
};

struct MIFitResult {
    std::vector<FitResult> fits;      // one per plausible value, in PV order
    std::vector<bool> used;           // converged fits enter the combination
    CoefficientLayout layout;
    CovarianceChoice covariance = CovarianceChoice::robust;
    std::vector<ScalarPool> coefficients;
    std::vector<ScalarPool> varcomps;  // descriptive
    Eigen::MatrixXd sigma;             // mean over used fits
    Eigen::MatrixXd tau;
    std::vector<std::string> warnings;
    bool flagged = false;  // some imputation did not converge

    int m() const;
    Eigen::VectorXd beta() const;
    /// Coefficient covariance of imputation l under the chosen covariance.
    const Eigen::MatrixXd& coef_cov(std::size_t l) const;
    std::vector<std::size_t> used_indices() const;
};

/// Rubin-combines already fitted imputations (all with the same layout).
MIFitResult combine_fits(std::vector<FitResult> fits, CovarianceChoice covariance = CovarianceChoice::robust);

/// Fits the model separately on every plausible value and combines. The data
/// is prepared once; each fit derives starting values from its own moments.
MIFitResult fit_mi(const Dataset& d, const ModelSpec& spec, const MIOptions& opts = {});

/// D1 test that the term's coefficients are equal across outcomes.
EqualityTest equality_test(const MIFitResult& mi, const std::string& term);

/// Terms (intercept included) with a coefficient on every outcome.
std::vector<std::string> testable_terms(const CoefficientLayout& layout);

}  // namespace mvmlm
