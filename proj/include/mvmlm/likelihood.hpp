#pragma once

#include "mvmlm/covariance.hpp"
#include "mvmlm/design.hpp"

#include <Eigen/Dense>

#include <vector>

namespace mvmlm {

/// For a class of n students V = I_n (x) Sigma + J_n (x) T. With P1 = J_n / n,
/// V^{-1} = P1 (x) A + (I - P1) (x) Sigma^{-1} where A = (Sigma + n T)^{-1},
/// and log|V| = log|Sigma + n T| + (n - 1) log|Sigma|.
struct MarginalBlocks {
    Eigen::MatrixXd A;
    double logdet = 0.0;
};

/// Throws NumericalError (carrying the condition estimate) when Sigma + nT or
/// Sigma is numerically singular.
MarginalBlocks marginal_blocks(const CovarianceParams& c, int n);

struct LikelihoodValue {
    double logL = 0.0;
    std::vector<double> per_class;
};

/// Exact Gaussian log-likelihood at fixed beta, accumulated class by class.
LikelihoodValue log_likelihood(const CovarianceParams& c, const Eigen::VectorXd& beta, const StackedDesign& D);

struct GlsResult {
    Eigen::VectorXd beta;
    Eigen::MatrixXd cov;  // (sum_j X_j' V_j^{-1} X_j)^{-1}
};

/// GLS fixed effects for given covariance parameters. Throws
/// RankDeficiencyError when the information matrix is singular.
GlsResult profile_beta_gls(const CovarianceParams& c, const StackedDesign& D);

enum class GradientMethod { central_difference, analytic };

/// Relative step used by the optimizer's central differences:
/// h_k = kFdStep * (1 + |theta_k|).
inline constexpr double kFdStep = 2e-6;

/// The beta-profiled log-likelihood as a function of theta.
///
/// The design is reduced once to within-class and between-class moment
/// matrices of [X | r0] for every outcome pair (r0 are OLS residuals, which
/// keeps the quadratic forms well scaled). Classes of equal size share one
/// between-class moment, so an evaluation costs O(#distinct class sizes * M^2
/// * p^2) regardless of N.
class ProfiledLikelihood {
public:
    explicit ProfiledLikelihood(const StackedDesign& D);

    struct Point {
        double logL = 0.0;
        Eigen::VectorXd beta;
        Eigen::MatrixXd information;     // sum_j X_j' V_j^{-1} X_j
        Eigen::MatrixXd within_scatter;  // sum_ij (e_ij - e_j)(e_ij - e_j)'
        std::vector<Eigen::MatrixXd> between_scatter;  // per size group: sum_j n e_j e_j'
        std::vector<Eigen::MatrixXd> A;                // per size group
        Eigen::MatrixXd sigma_inv;
    };

    int M() const { return M_; }
    int p() const { return p_; }
    int n_theta() const { return CovarianceParams::n_theta(M_); }
    int n_students() const { return n_students_; }
    const Eigen::VectorXd& ols_beta() const { return beta_ols_; }

    Point evaluate(const CovarianceParams& c) const;
    double value(const Eigen::VectorXd& theta) const;

    Eigen::VectorXd gradient(const Eigen::VectorXd& theta, GradientMethod method) const;
    Eigen::VectorXd analytic_gradient(const Eigen::VectorXd& theta) const;
    Eigen::VectorXd fd_gradient(const Eigen::VectorXd& theta, double rel_step = kFdStep) const;

    /// Gradient with respect to (vech Sigma, vech T), off-diagonal entries
    /// treated as single parameters.
    Eigen::VectorXd natural_gradient(const CovarianceParams& c) const;

    /// Largest relative discrepancy between the analytic and FD gradients.
    double gradient_self_check(const Eigen::VectorXd& theta) const;

private:
    struct SizeGroup {
        int n = 0;
        int count = 0;
        std::vector<Eigen::MatrixXd> moments;  // M*M blocks of (p+1) x (p+1)
    };

    void symmetric_gradients(const Point& pt, const CovarianceParams& c, Eigen::MatrixXd& g_sigma,
                             Eigen::MatrixXd& g_tau) const;

    int M_ = 0;
    int p_ = 0;
    int n_students_ = 0;
    Eigen::VectorXd beta_ols_;
    std::vector<Eigen::MatrixXd> within_;  // M*M blocks of (p+1) x (p+1)
    std::vector<SizeGroup> groups_;
};

/// Gradient of the profiled log-likelihood in the unconstrained
/// parameterization. Throws NumericalError naming the first non-finite
/// coordinate.
Eigen::VectorXd grad_loglik(const Eigen::VectorXd& theta, const StackedDesign& D,
                            GradientMethod method = GradientMethod::central_difference);

/// Chain rule from symmetric-matrix gradients to the log-Cholesky coordinates.
Eigen::VectorXd chain_to_theta(const Eigen::MatrixXd& g_sigma, const Eigen::MatrixXd& g_tau,
                               const Eigen::VectorXd& theta, int M);

}  // namespace mvmlm
