#pragma once

#include "mvmlm/dataset.hpp"
#include "mvmlm/model_spec.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace mvmlm {

struct BinaryGenerator {
    std::string name;
    Level level = Level::student;
    double p = 0.5;
};

struct ContinuousGenerator {
    std::string name;
    Level level = Level::student;
    double mean = 0.0;
    double sd = 1.0;
};

/// True coefficients of one term, one value per outcome. Continuous
/// covariates enter centered at their generator mean; the GVA spline terms
/// are named `gva_below` and `gva_above`.
struct CoefficientTruth {
    std::string term;
    std::vector<double> values;
};

/// Population frame for the two-stage design. With `schools_per_stratum` = 0
/// the simulator produces a sample-scale data set directly (every school and
/// class observed).
struct FrameDesign {
    int schools_per_stratum = 0;
    int min_classes = 1;
    int max_classes = 4;
};

struct SimConfig {
    std::vector<std::string> outcomes;
    std::vector<std::string> areas;
    std::vector<int> classes_per_area;  // sample-scale mode
    std::vector<std::string> grade_types;
    std::vector<double> area_gva;  // mean province GVA per area
    double gva_sd = 10.0;
    double gva_min = 55.0;
    double gva_max = 142.0;
    double gva_knot = 100.0;
    std::vector<double> area_tau_scale;  // multiplies T in each area
    int provinces_per_area = 20;
    double two_class_prob = 0.18;
    int class_size_min = 8;
    int class_size_max = 24;
    double private_prob = 0.07;
    FrameDesign frame;

    std::vector<BinaryGenerator> binary;
    std::vector<ContinuousGenerator> continuous;
    std::vector<double> intercept;
    std::vector<CoefficientTruth> coefficients;
    Eigen::MatrixXd sigma;
    Eigen::MatrixXd tau;

    int n_pv = 5;
    double sd_meas = 25.0;
    double informative_lambda = 0.0;
    std::map<std::string, double> missing_rate;
    std::uint64_t seed = 1;

    int M() const { return static_cast<int>(outcomes.size()); }
    /// Throws ValidationError for an infeasible configuration.
    void validate() const;

    /// Grade-4 national sample at realistic values: 237 classes over five
    /// areas, student, school and province covariates.
    static SimConfig study_defaults();
    /// Null model with target within/between correlations, ICCs, total SDs
    /// and means.
    static SimConfig null_decomposition_defaults();
};

nlohmann::json to_json(const SimConfig& c);
/// Keys absent from `j` keep their study_defaults() values.
SimConfig sim_config_from_json(const nlohmann::json& j);

/// The analysis model matching the generator: every coefficient term,
/// continuous covariates centered at their generator means, GVA spline at the
/// knot with the upper branch constrained unless `gva_above` is present.
ModelSpec generative_model(const SimConfig& c);

struct FrameSchool {
    std::string id;
    std::string stratum;  // explicit: area x grade type
    std::string area;
    std::string grade_type;
    std::string school_type;  // implicit sort key
    std::string province;     // implicit sort key
    double mos = 0.0;         // measure of size
    std::vector<std::size_t> classes;
};

struct FrameClass {
    std::string id;
    std::size_t school = 0;
    int size = 0;
    Eigen::VectorXd u;  // true class effect
};

struct FramePopulation {
    SimConfig config;
    std::vector<FrameSchool> schools;
    std::vector<FrameClass> classes;
    std::map<std::string, double> province_gva;
    std::map<std::string, std::string> province_area;
    /// Latent scores (n_pv = 1) and complete covariates of every student.
    Dataset truth;

    /// Sub-population holding only the given classes (and their schools).
    FramePopulation restrict(const std::vector<std::string>& class_ids) const;
    std::map<std::string, std::string> class_area() const;
    std::map<std::string, std::string> school_stratum() const;
    std::vector<std::string> class_ids() const;
};

struct Simulation {
    FramePopulation population;
    Dataset data;  // plausible values, missingness applied
};

/// u_j ~ N(0, s_area T), e_ij ~ N(0, Sigma), latent score = mean + u_j + e_ij.
FramePopulation simulate_frame(const SimConfig& c);
/// simulate_frame followed by draw_plausible_values(c.n_pv, c.sd_meas, c.seed).
Simulation simulate_population(const SimConfig& c);

/// Gaussian measurement-error stand-in for the posterior-draw process. Each
/// student gets one error-prone measurement R = theta + eta whose error
/// covariance makes the posterior SD of theta exactly sd_meas per outcome.
/// Every PV is a posterior draw: beta and the class effects are drawn from
/// their posterior given R, then theta given R. PVs therefore share the
/// measurement, differ by about sd_meas per student, and are proper
/// imputations. sd_meas = 0 returns the latent scores.
Dataset draw_plausible_values(const FramePopulation& pop, int m, double sd_meas, std::uint64_t seed);

/// Sidecars: one row per school / per class.
void save_frame(const std::string& path, const FramePopulation& pop);
void save_classes(const std::string& path, const FramePopulation& pop);

}  // namespace mvmlm
