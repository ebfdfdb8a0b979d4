#pragma once

#include "mvmlm/design.hpp"
#include "mvmlm/fit.hpp"

#include <string>
#include <unordered_map>

namespace mvmlm {

enum class WeightScaling { none, cluster_size };

std::string to_string(WeightScaling s);
WeightScaling weight_scaling_from_string(const std::string& s);

/// Survey weights at the three levels. The overall student weight is
/// w_ijk = w_{i|jk} * w_{j|k} * w_k; the class enters the pseudo-likelihood
/// with the unconditional weight w_jk = w_{j|k} * w_k.
struct WeightSet {
    std::unordered_map<std::string, double> student;  // w_{i|jk} by student id
    std::unordered_map<std::string, double> class_;   // w_{j|k} by class id
    std::unordered_map<std::string, double> school;   // w_k by school id
    WeightScaling scaling = WeightScaling::none;

    double class_weight(const std::string& class_id, const std::string& school_id) const;
    double overall(const std::string& student_id, const std::string& class_id, const std::string& school_id) const;

    static WeightSet unit(const StackedDesign& D);
};

/// CSV with columns student_id, class_id, school_id, w_student, w_class,
/// w_school (one row per student).
WeightSet load_weights(const std::string& path);
void save_weights(const std::string& path, const WeightSet& W, const Dataset& d);

/// Weighted pseudo-ML for a random-intercept model (M = 1). Each class
/// contributes w_jk * l_j where l_j is the exact Gaussian class log-density
/// with residual variance sigma^2 / w_{i|jk} for student i.
FitResult fit_weighted_univariate(const StackedDesign& D, const WeightSet& W, const FitOptions& opts = {});

/// The weighted pseudo-log-likelihood profiled over beta, as a function of
/// theta = (log sigma, log tau). Exposed for tests.
class WeightedProfiledLikelihood {
public:
    WeightedProfiledLikelihood(const StackedDesign& D, const WeightSet& W);

    struct Point {
        double logL = 0.0;
        Eigen::VectorXd beta;
        Eigen::MatrixXd information;
        Eigen::Vector2d natural_gradient;  // d/d(sigma^2), d/d(tau^2)
    };

    Point evaluate(double sigma2, double tau2) const;
    double value(const Eigen::VectorXd& theta) const;
    Eigen::VectorXd gradient(const Eigen::VectorXd& theta, GradientMethod method) const;

    const std::vector<double>& class_weights() const { return class_w_; }
    const std::vector<Eigen::VectorXd>& student_weights() const { return student_w_; }

private:
    struct ClassMoments {
        Eigen::MatrixXd zwz;  // z' D z
        Eigen::VectorXd zw;   // z' w
        double wsum = 0.0;
        double logw = 0.0;
        int n = 0;
    };
    int p_ = 0;
    Eigen::VectorXd beta_ols_;
    std::vector<ClassMoments> moments_;
    std::vector<double> class_w_;
    std::vector<Eigen::VectorXd> student_w_;
};

}  // namespace mvmlm
