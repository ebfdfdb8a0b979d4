#pragma once

#include "mvmlm/covariance.hpp"
#include "mvmlm/design.hpp"
#include "mvmlm/likelihood.hpp"
#include "mvmlm/optimizer.hpp"

#include <Eigen/Dense>

#include <string>
#include <unordered_map>
#include <vector>

namespace mvmlm {

struct FitOptions {
    OptimizerOptions optimizer;
    GradientMethod gradient = GradientMethod::central_difference;
    /// Multiply the robust meat by K / (K - 1), K the number of clusters.
    bool cluster_correction = false;
};

struct Convergence {
    OptimStatus status = OptimStatus::max_iter;
    int iterations = 0;
    int evaluations = 0;
    double grad_norm = 0.0;  // infinity norm in theta at the returned point
    bool near_singular_tau = false;
};

/// A (co)variance parameter of Sigma or T with model-based and robust SEs.
struct VarianceComponent {
    std::string name;  // e.g. "sigma(read,math)", "tau(math)"
    double estimate = 0.0;
    double se_model = 0.0;
    double se_robust = 0.0;
};

struct FitResult {
    CoefficientLayout layout;
    Eigen::VectorXd beta;
    Eigen::MatrixXd sigma;
    Eigen::MatrixXd tau;
    double logL = 0.0;
    double logL_initial = 0.0;
    Eigen::MatrixXd cov_model;
    Eigen::MatrixXd cov_robust;
    std::vector<VarianceComponent> varcomps;
    Convergence convergence;
    int n_students = 0;
    int n_classes = 0;
    int n_schools = 0;
    std::vector<std::string> class_ids;
    Eigen::VectorXd theta;
    std::vector<double> trace;

    bool converged() const { return convergence.status == OptimStatus::converged; }
    const std::vector<std::string>& outcomes() const { return layout.outcomes; }
    CovarianceParams params() const { return {sigma, tau}; }
};

/// Sigma0 from pooled within-class OLS residuals; T0 from the covariance of
/// class-mean residuals with eigenvalues floored at 0.1 * min(diag Sigma0) / nbar.
CovarianceParams starting_values(const StackedDesign& D);

/// Responses divided per outcome by the within-class SD of the starting
/// values. Optimizing on this copy makes the iterate path independent of the
/// units of y.
struct StandardizedDesign {
    StackedDesign design;
    Eigen::VectorXd scale;  // per outcome

    explicit StandardizedDesign(const StackedDesign& D);
    /// Log-Cholesky theta on the standardized scale to the original scale.
    Eigen::VectorXd unscale_theta(const Eigen::VectorXd& theta) const;
    /// Sum over students of log |d y / d y_std|, weighted by `class_weights` if given.
    double log_jacobian(const std::vector<double>& class_weights = {}) const;
};

/// ML fit by BFGS on the beta-profiled likelihood. Non-convergence does not
/// throw; the result is flagged and carries the best iterate.
FitResult fit_ml(const StackedDesign& D, const FitOptions& opts = {});

/// class id -> school id as recorded in the design.
std::unordered_map<std::string, std::string> school_clusters(const StackedDesign& D);

/// Sandwich C (sum_k s_k s_k') C with C = cov_model and s_k the summed class
/// scores X_j' V_j^{-1} (y_j - X_j beta) of cluster k.
Eigen::MatrixXd robust_cluster_cov(const FitResult& F, const StackedDesign& D,
                                   const std::unordered_map<std::string, std::string>& cluster,
                                   bool small_sample_correction = false);

/// Per-class score contributions at (params, beta): columns are classes.
struct ClassScores {
    Eigen::MatrixXd beta;     // p x J
    Eigen::MatrixXd natural;  // 2 * M(M+1)/2 x J, w.r.t. (vech Sigma, vech T)
};
ClassScores class_scores(const CovarianceParams& c, const Eigen::VectorXd& beta, const StackedDesign& D);

/// Central-difference Jacobian of a gradient function; symmetrized.
Eigen::MatrixXd fd_hessian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& grad,
                           const Eigen::VectorXd& x, const Eigen::VectorXd& steps);

std::vector<std::string> varcomp_names(const std::vector<std::string>& outcomes);

struct DecompositionReport {
    std::vector<std::string> outcomes;
    Eigen::MatrixXd within_corr;
    Eigen::MatrixXd between_corr;
    Eigen::MatrixXd total_corr;
    Eigen::MatrixXd pct_between;  // 100 * T ./ (Sigma + T)
    Eigen::VectorXd icc;          // percent
};

DecompositionReport decompose(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& tau,
                              std::vector<std::string> outcomes = {});
DecompositionReport decompose(const FitResult& F);

Eigen::MatrixXd correlation(const Eigen::MatrixXd& S);

struct VarianceExplained {
    std::vector<std::string> outcomes;
    Eigen::VectorXd within_reduction;   // percent, may be negative
    Eigen::VectorXd between_reduction;  // percent, may be negative
    Eigen::VectorXd residual_icc;       // percent, from the full model
};

VarianceExplained variance_explained(const FitResult& null_fit, const FitResult& full_fit);

}  // namespace mvmlm
