#include "mvmlm/covariance.hpp"

#include "mvmlm/error.hpp"

#include <cmath>

namespace mvmlm {

Eigen::VectorXd pack_log_cholesky(const Eigen::MatrixXd& S) {
    const auto M = S.rows();
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw NumericalError("matrix is not positive definite", INFINITY);
    const Eigen::MatrixXd L = llt.matrixL();
    Eigen::VectorXd v(M * (M + 1) / 2);
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < M; ++r) {
        for (Eigen::Index c = 0; c <= r; ++c) v(k++) = (r == c) ? std::log(L(r, c)) : L(r, c);
    }
    return v;
}

Eigen::MatrixXd unpack_log_cholesky(const Eigen::Ref<const Eigen::VectorXd>& v, int M) {
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(M, M);
    Eigen::Index k = 0;
    for (int r = 0; r < M; ++r) {
        for (int c = 0; c <= r; ++c) L(r, c) = (r == c) ? std::exp(v(k++)) : v(k++);
    }
    return L * L.transpose();
}

Eigen::VectorXd CovarianceParams::to_theta() const {
    const int M = dim();
    const int h = M * (M + 1) / 2;
    Eigen::VectorXd theta(2 * h);
    theta.head(h) = pack_log_cholesky(sigma);
    theta.tail(h) = pack_log_cholesky(tau);
    return theta;
}

CovarianceParams CovarianceParams::from_theta(const Eigen::VectorXd& theta, int M) {
    const int h = M * (M + 1) / 2;
    if (theta.size() != 2 * h) throw ValidationError("theta has the wrong length for M = " + std::to_string(M));
    return {unpack_log_cholesky(theta.head(h), M), unpack_log_cholesky(theta.tail(h), M)};
}

Eigen::MatrixXd project_pd(const Eigen::MatrixXd& S, double floor) {
    const Eigen::MatrixXd sym = 0.5 * (S + S.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::VectorXd vech(const Eigen::MatrixXd& S) {
    const auto M = S.rows();
    Eigen::VectorXd v(M * (M + 1) / 2);
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < M; ++r) {
        for (Eigen::Index c = 0; c <= r; ++c) v(k++) = S(r, c);
    }
    return v;
}

}  // namespace mvmlm
