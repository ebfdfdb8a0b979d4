#pragma once

#include <Eigen/Dense>

namespace mvmlm {

/// Within-class (Sigma) and between-class (T) covariance matrices, both M x M
/// in score points squared.
///
/// The unconstrained vector theta stacks the lower Cholesky factors of Sigma
/// then T, row by row ((0,0), (1,0), (1,1), (2,0), ...), with log-transformed
/// diagonals. Any real theta maps to a positive-definite pair.
struct CovarianceParams {
    Eigen::MatrixXd sigma;
    Eigen::MatrixXd tau;

    int dim() const { return static_cast<int>(sigma.rows()); }

    static int n_theta(int M) { return M * (M + 1); }

    Eigen::VectorXd to_theta() const;
    static CovarianceParams from_theta(const Eigen::VectorXd& theta, int M);
};

/// Lower Cholesky factor with log diagonal, packed row-wise.
Eigen::VectorXd pack_log_cholesky(const Eigen::MatrixXd& S);
Eigen::MatrixXd unpack_log_cholesky(const Eigen::Ref<const Eigen::VectorXd>& v, int M);

/// Symmetrize and floor eigenvalues at `floor`.
Eigen::MatrixXd project_pd(const Eigen::MatrixXd& S, double floor);

/// vech with rows (0,0), (1,0), (1,1), ...; used for reporting.
Eigen::VectorXd vech(const Eigen::MatrixXd& S);

}  // namespace mvmlm
