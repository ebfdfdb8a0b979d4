#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace mvmlm {

enum class OptimStatus { converged, max_iter, stalled };

std::string to_string(OptimStatus s);

struct OptimizerOptions {
    double tol_loglik = 1e-10;  // relative change in the objective
    double tol_grad = 1e-5;     // infinity norm of the gradient
    int max_iter = 200;
};

struct OptimResult {
    Eigen::VectorXd x;
    double value = 0.0;
    double initial_value = 0.0;
    Eigen::VectorXd gradient;
    int iterations = 0;
    int evaluations = 0;
    OptimStatus status = OptimStatus::max_iter;
    std::vector<double> trace;  // objective at every accepted iterate
};

using Objective = std::function<double(const Eigen::VectorXd&)>;
using Gradient = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// BFGS ascent with backtracking (Armijo) line search. Only improving steps
/// are accepted, so the trace is nondecreasing. Objective evaluations that
/// throw mvmlm::Error count as -inf and shrink the step.
OptimResult maximize_bfgs(const Objective& f, const Gradient& grad, Eigen::VectorXd x0, const OptimizerOptions& opts);

}  // namespace mvmlm
