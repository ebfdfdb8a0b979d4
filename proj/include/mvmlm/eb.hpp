#pragma once

#include "mvmlm/design.hpp"
#include "mvmlm/fit.hpp"
#include "mvmlm/mi.hpp"

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

namespace mvmlm {

struct EBClass {
    std::string class_id;
    std::string school_id;
    int n = 0;
    Eigen::VectorXd raw_mean;     // class-mean residual at beta-hat
    Eigen::VectorXd u_hat;        // n T A raw_mean
    Eigen::MatrixXd comparative;  // Var(u_hat - u) = T - n T A T
    Eigen::MatrixXd diagnostic;   // Var(u_hat) = n T A T
};

/// Empirical Bayes predictions of the class effects, in score points.
/// The diagnostic variance treats beta-hat as known.
struct EBResiduals {
    std::vector<std::string> outcomes;
    Eigen::MatrixXd tau;
    std::vector<EBClass> classes;

    int outcome_index(const std::string& name) const;
};

EBResiduals eb_predict(const FitResult& F, const StackedDesign& D);

/// Averages the per-imputation predictions over the converged fits. The
/// comparative variance adds (1 + 1/m) times the between-imputation variance
/// of u_hat; the diagnostic variance is T-bar minus the comparative one.
EBResiduals eb_predict_mi(const MIFitResult& mi, const std::vector<StackedDesign>& designs);

enum class Label { good, poor, ns };
std::string to_string(Label l);

/// z = Phi^{-1}((1 + level) / 2).
double normal_critical(double level);

/// good: u - z SE > 0; poor: u + z SE < 0; else ns. SE is the comparative SE.
std::vector<Label> classify(const EBResiduals& E, int outcome, double level = 0.95);

struct CaterpillarRow {
    int rank = 0;
    std::string class_id;
    double u_hat = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    Label label = Label::ns;
};

/// Sorted by u_hat ascending, ties by class id.
std::vector<CaterpillarRow> caterpillar_data(const EBResiduals& E, int outcome, double level = 0.95);

struct QQRow {
    int rank = 0;
    std::string class_id;
    double theoretical = 0.0;   // Phi^{-1}((rank - 0.5) / J)
    double standardized = 0.0;  // u_hat / diagnostic SE
    bool outlier = false;       // |standardized| > 3
};

std::vector<QQRow> qq_data(const EBResiduals& E, int outcome);

struct AreaSummary {
    std::string area;  // "overall" for the last row
    int n_classes = 0;
    int n_good = 0;
    int n_poor = 0;
    double prop_good = 0.0;
    double prop_poor = 0.0;
};

/// One row per area (sorted by name) plus a final overall row.
std::vector<AreaSummary> territorial_summary(const EBResiduals& E, int outcome,
                                             const std::map<std::string, std::string>& class_area,
                                             double level = 0.95);

}  // namespace mvmlm
