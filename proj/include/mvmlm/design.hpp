#pragma once

#include "mvmlm/dataset.hpp"
#include "mvmlm/model_spec.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace mvmlm {

/// Which term and outcome a coefficient belongs to. `outcome == -1` marks a
/// common coefficient shared by all outcomes.
struct Coefficient {
    std::string name;
    std::string term;  // "(intercept)" for intercepts
    int outcome = -1;
};

struct CoefficientLayout {
    std::vector<std::string> outcomes;
    std::vector<Coefficient> coefficients;

    int size() const { return static_cast<int>(coefficients.size()); }
    std::vector<std::string> names() const;
    /// Index of (term, outcome), or -1 when the term does not enter that outcome.
    int index_of(const std::string& term, int outcome) const;
    bool is_common(const std::string& term) const;
};

/// One class: responses stacked student-major, (y_1i, ..., y_Mi) contiguous.
struct ClassBlock {
    std::string class_id;
    std::string school_id;
    std::vector<std::string> student_ids;
    int n = 0;
    Eigen::VectorXd y;  // M * n
    Eigen::MatrixXd X;  // M * n x p
};

struct StackedDesign {
    int M = 0;
    int p = 0;
    CoefficientLayout layout;
    std::vector<ClassBlock> classes;

    int n_students() const;
    int n_classes() const { return static_cast<int>(classes.size()); }
    /// Dense N*M x p matrix in class order; used for rank checks and OLS.
    Eigen::MatrixXd stacked_X() const;
    Eigen::VectorXd stacked_y() const;
};

/// Builds X_j and y_j for plausible value `pv_index` (1-based). Throws
/// RankDeficiencyError when a column of X is identically zero.
StackedDesign build_design(const Dataset& d, const ModelSpec& spec, int pv_index);

/// Same as build_design but for a single outcome (M = 1).
StackedDesign build_univariate_design(const Dataset& d, const ModelSpec& spec, int outcome, int pv_index);

/// Throws RankDeficiencyError listing columns that are linear combinations of
/// earlier ones.
void check_full_rank(const StackedDesign& D);

}  // namespace mvmlm
