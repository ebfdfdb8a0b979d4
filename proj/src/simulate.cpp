#include "mvmlm/simulate.hpp"

#include "mvmlm/design.hpp"
#include "mvmlm/error.hpp"
#include "mvmlm/likelihood.hpp"
#include "mvmlm/rng.hpp"
#include "mvmlm/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <unordered_map>

namespace mvmlm {

namespace {

std::string padded(char prefix, std::size_t k, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%c%0*zu", prefix, width, k);
    return buf;
}

Eigen::MatrixXd sym(std::initializer_list<std::initializer_list<double>> rows) {
    Eigen::MatrixXd S(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
    Eigen::Index i = 0;
    for (const auto& r : rows) {
        Eigen::Index j = 0;
        for (double v : r) S(i, j++) = v;
        ++i;
    }
    return S;
}

Eigen::MatrixXd cholesky_lower(const Eigen::MatrixXd& S, const std::string& what) {
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw ValidationError(what + " is not positive definite");
    return llt.matrixL();
}

/// Symmetric square root, negative eigenvalues clipped (posterior covariances
/// can be numerically semidefinite).
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& S) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()));
    const Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

/// Cholesky factor when S is PD, else the symmetric root (T may be singular).
Eigen::MatrixXd factor_psd(const Eigen::MatrixXd& S) {
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    return psd_sqrt(S);
}

const ContinuousGenerator* find_continuous(const SimConfig& c, const std::string& name) {
    for (const auto& g : c.continuous) {
        if (g.name == name) return &g;
    }
    return nullptr;
}

bool has_generator(const SimConfig& c, const std::string& name) {
    if (name == "gva" || name == "area_code") return true;
    if (find_continuous(c, name)) return true;
    return std::any_of(c.binary.begin(), c.binary.end(), [&](const auto& g) { return g.name == name; });
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto n = static_cast<Eigen::Index>(j.size());
    Eigen::MatrixXd S(n, n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto& row = j.at(static_cast<std::size_t>(r));
        if (static_cast<Eigen::Index>(row.size()) != n) throw ValidationError("covariance matrices must be square");
        for (Eigen::Index c = 0; c < n; ++c) S(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
    return S;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& S) {
    nlohmann::json j = nlohmann::json::array();
    for (Eigen::Index r = 0; r < S.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < S.cols(); ++c) row.push_back(S(r, c));
        j.push_back(row);
    }
    return j;
}

}  // namespace

void SimConfig::validate() const {
    const auto m = outcomes.size();
    if (m == 0) throw ValidationError("simulation needs at least one outcome");
    if (std::set<std::string>(outcomes.begin(), outcomes.end()).size() != m) throw ValidationError("duplicate outcome");
    if (areas.empty()) throw ValidationError("simulation needs at least one area");
    if (area_gva.size() != areas.size() || area_tau_scale.size() != areas.size()) {
        throw ValidationError("area_gva and area_tau_scale need one entry per area");
    }
    if (frame.schools_per_stratum == 0 && classes_per_area.size() != areas.size()) {
        throw ValidationError("classes_per_area needs one entry per area");
    }
    for (int k : classes_per_area) {
        if (k < 0) throw ValidationError("classes_per_area must be nonnegative");
    }
    for (double s : area_tau_scale) {
        if (!(s > 0.0)) throw ValidationError("area_tau_scale entries must be positive");
    }
    if (grade_types.empty()) throw ValidationError("need at least one grade type");
    if (provinces_per_area < 1) throw ValidationError("provinces_per_area must be at least 1");
    if (class_size_min < 1 || class_size_max < class_size_min) throw ValidationError("invalid class size range");
    if (frame.schools_per_stratum < 0 || frame.min_classes < 1 || frame.max_classes < frame.min_classes) {
        throw ValidationError("invalid frame design");
    }
    for (double p : {two_class_prob, private_prob}) {
        if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("probabilities must lie in [0, 1]");
    }
    for (const auto& g : binary) {
        if (!(g.p >= 0.0 && g.p <= 1.0)) throw ValidationError("binary generator '" + g.name + "' has p outside [0, 1]");
    }
    for (const auto& g : continuous) {
        if (!(g.sd >= 0.0)) throw ValidationError("continuous generator '" + g.name + "' has negative sd");
    }
    if (intercept.size() != m) throw ValidationError("intercept needs one value per outcome");
    for (const auto& t : coefficients) {
        if (t.values.size() != m) throw ValidationError("coefficient '" + t.term + "' needs one value per outcome");
        if (t.term != "gva_below" && t.term != "gva_above" && !has_generator(*this, t.term)) {
            throw ValidationError("coefficient '" + t.term + "' has no covariate generator");
        }
    }
    const auto M_ = static_cast<Eigen::Index>(m);
    if (sigma.rows() != M_ || sigma.cols() != M_ || tau.rows() != M_ || tau.cols() != M_) {
        throw ValidationError("Sigma and T must be M x M");
    }
    if (!sigma.isApprox(sigma.transpose()) || !tau.isApprox(tau.transpose())) {
        throw ValidationError("Sigma and T must be symmetric");
    }
    cholesky_lower(sigma, "Sigma");
    {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(tau);
        if (es.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff())) {
            throw ValidationError("T is not positive semidefinite");
        }
    }
    if (n_pv < 1) throw ValidationError("n_pv must be at least 1");
    if (!(sd_meas >= 0.0)) throw ValidationError("sd_meas must be nonnegative");
    if (sd_meas > 0.0) {
        const double lmin = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sigma).eigenvalues().minCoeff();
        if (!(sd_meas * sd_meas < lmin)) {
            throw ValidationError("sd_meas^2 must be below the smallest eigenvalue of Sigma (" + format_double(lmin) + ")");
        }
    }
    for (const auto& [name, r] : missing_rate) {
        if (!(r >= 0.0 && r < 1.0)) throw ValidationError("missing rate of '" + name + "' must lie in [0, 1)");
        if (!has_generator(*this, name)) throw ValidationError("missing rate given for unknown covariate '" + name + "'");
    }
}

SimConfig SimConfig::study_defaults() {
    SimConfig c;
    c.outcomes = {"read", "math", "scie"};
    c.areas = {"North-West", "North-East", "Centre", "South", "South-Islands"};
    c.classes_per_area = {48, 49, 47, 49, 44};
    c.grade_types = {"primary", "comprehensive"};
    c.area_gva = {122.0, 120.0, 113.0, 66.0, 69.0};
    c.area_tau_scale = {1.0, 1.0, 1.0, 1.0, 1.0};
    c.binary = {{"female", Level::student, 0.51}, {"preschool", Level::student, 0.75},
                {"lang_not_italian", Level::student, 0.21}};
    c.continuous = {{"home_resources", Level::student, 9.72, 1.55},
                    {"early_literacy", Level::student, 9.24, 1.60},
                    {"school_adequate_env", Level::school, 9.62, 1.07}};
    c.intercept = {531.73, 514.99, 531.47};
    c.coefficients = {{"female", {2.92, -11.96, -10.64}},
                      {"lang_not_italian", {-22.57, -14.94, -23.74}},
                      {"preschool", {8.85, 8.46, 10.91}},
                      {"home_resources", {14.04, 10.64, 13.23}},
                      {"early_literacy", {7.24, 10.07, 6.53}},
                      {"school_adequate_env", {5.28, 8.61, 7.00}},
                      {"gva_below", {0.45, 0.48, 0.55}}};
    c.tau = sym({{725.7, 915.2, 931.6}, {915.2, 1332.3, 1266.1}, {931.6, 1266.1, 1274.1}});
    c.sigma = sym({{3716.1, 2400.9, 2757.4}, {2400.9, 3500.1, 2452.3}, {2757.4, 2452.3, 3471.7}});
    return c;
}

SimConfig SimConfig::null_decomposition_defaults() {
    SimConfig c = study_defaults();
    c.coefficients.clear();
    c.intercept = {525.4, 502.2, 519.0};
    const Eigen::Vector3d sd(75.4, 76.7, 78.5);
    const Eigen::Vector3d icc(0.198, 0.288, 0.294);
    const Eigen::Matrix3d r_within = sym({{1.0, 0.71, 0.81}, {0.71, 1.0, 0.74}, {0.81, 0.74, 1.0}});
    const Eigen::Matrix3d r_between = sym({{1.0, 0.93, 0.97}, {0.93, 1.0, 0.98}, {0.97, 0.98, 1.0}});
    const Eigen::Vector3d s_w = (sd.array().square() * (1.0 - icc.array())).sqrt();
    const Eigen::Vector3d s_b = (sd.array().square() * icc.array()).sqrt();
    c.sigma = s_w.asDiagonal() * r_within * s_w.asDiagonal();
    c.tau = s_b.asDiagonal() * r_between * s_b.asDiagonal();
    return c;
}

nlohmann::json to_json(const SimConfig& c) {
    nlohmann::json j;
    j["outcomes"] = c.outcomes;
    j["areas"] = c.areas;
    j["classes_per_area"] = c.classes_per_area;
    j["grade_types"] = c.grade_types;
    j["area_gva"] = c.area_gva;
    j["gva_sd"] = c.gva_sd;
    j["gva_min"] = c.gva_min;
    j["gva_max"] = c.gva_max;
    j["gva_knot"] = c.gva_knot;
    j["area_tau_scale"] = c.area_tau_scale;
    j["provinces_per_area"] = c.provinces_per_area;
    j["two_class_prob"] = c.two_class_prob;
    j["class_size_min"] = c.class_size_min;
    j["class_size_max"] = c.class_size_max;
    j["private_prob"] = c.private_prob;
    j["frame"] = {{"schools_per_stratum", c.frame.schools_per_stratum},
                  {"min_classes", c.frame.min_classes},
                  {"max_classes", c.frame.max_classes}};
    j["binary"] = nlohmann::json::array();
    for (const auto& g : c.binary) j["binary"].push_back({{"name", g.name}, {"level", to_string(g.level)}, {"p", g.p}});
    j["continuous"] = nlohmann::json::array();
    for (const auto& g : c.continuous) {
        j["continuous"].push_back({{"name", g.name}, {"level", to_string(g.level)}, {"mean", g.mean}, {"sd", g.sd}});
    }
    j["intercept"] = c.intercept;
    j["coefficients"] = nlohmann::json::object();
    for (const auto& t : c.coefficients) j["coefficients"][t.term] = t.values;
    j["coefficient_order"] = nlohmann::json::array();
    for (const auto& t : c.coefficients) j["coefficient_order"].push_back(t.term);
    j["sigma"] = matrix_to_json(c.sigma);
    j["tau"] = matrix_to_json(c.tau);
    j["n_pv"] = c.n_pv;
    j["sd_meas"] = c.sd_meas;
    j["informative_lambda"] = c.informative_lambda;
    j["missing_rate"] = c.missing_rate;
    j["seed"] = c.seed;
    return j;
}

SimConfig sim_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("simulation config must be a JSON object");
    SimConfig c = SimConfig::study_defaults();
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        get("outcomes", c.outcomes);
        get("areas", c.areas);
        get("classes_per_area", c.classes_per_area);
        get("grade_types", c.grade_types);
        get("area_gva", c.area_gva);
        get("gva_sd", c.gva_sd);
        get("gva_min", c.gva_min);
        get("gva_max", c.gva_max);
        get("gva_knot", c.gva_knot);
        get("area_tau_scale", c.area_tau_scale);
        get("provinces_per_area", c.provinces_per_area);
        get("two_class_prob", c.two_class_prob);
        get("class_size_min", c.class_size_min);
        get("class_size_max", c.class_size_max);
        get("private_prob", c.private_prob);
        if (j.contains("frame")) {
            const auto& f = j.at("frame");
            if (f.contains("schools_per_stratum")) f.at("schools_per_stratum").get_to(c.frame.schools_per_stratum);
            if (f.contains("min_classes")) f.at("min_classes").get_to(c.frame.min_classes);
            if (f.contains("max_classes")) f.at("max_classes").get_to(c.frame.max_classes);
        }
        if (j.contains("binary")) {
            c.binary.clear();
            for (const auto& g : j.at("binary")) {
                c.binary.push_back({g.at("name").get<std::string>(),
                                    level_from_string(g.value("level", std::string("student"))), g.at("p").get<double>()});
            }
        }
        if (j.contains("continuous")) {
            c.continuous.clear();
            for (const auto& g : j.at("continuous")) {
                c.continuous.push_back({g.at("name").get<std::string>(),
                                        level_from_string(g.value("level", std::string("student"))),
                                        g.at("mean").get<double>(), g.at("sd").get<double>()});
            }
        }
        get("intercept", c.intercept);
        if (j.contains("coefficients")) {
            const auto& co = j.at("coefficients");
            std::vector<std::string> order;
            if (j.contains("coefficient_order")) {
                j.at("coefficient_order").get_to(order);
            } else {
                for (auto it = co.begin(); it != co.end(); ++it) order.push_back(it.key());
            }
            c.coefficients.clear();
            for (const auto& term : order) c.coefficients.push_back({term, co.at(term).get<std::vector<double>>()});
        }
        if (j.contains("sigma")) c.sigma = matrix_from_json(j.at("sigma"));
        if (j.contains("tau")) c.tau = matrix_from_json(j.at("tau"));
        get("n_pv", c.n_pv);
        get("sd_meas", c.sd_meas);
        get("informative_lambda", c.informative_lambda);
        if (j.contains("missing_rate")) {
            c.missing_rate.clear();
            j.at("missing_rate").get_to(c.missing_rate);
        }
        get("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("invalid simulation config: ") + e.what());
    }
    c.validate();
    return c;
}

ModelSpec generative_model(const SimConfig& c) {
    ModelSpec s;
    s.outcomes = c.outcomes;
    s.intercept = true;
    bool above = false, below = false;
    for (const auto& t : c.coefficients) {
        above = above || t.term == "gva_above";
        below = below || t.term == "gva_below";
        std::string column = t.term;
        if (t.term == "gva_below") column = spline_below_name("gva");
        if (t.term == "gva_above") column = spline_above_name("gva");
        s.terms.push_back({t.term, std::vector<std::string>(c.outcomes.size(), column), false});
        if (const auto* g = find_continuous(c, t.term)) s.transforms.center.push_back({g->name, g->mean});
    }
    if (above || below) s.transforms.splines.push_back({"gva", c.gva_knot, !above});
    return s;
}

FramePopulation simulate_frame(const SimConfig& c) {
    c.validate();
    const int M = c.M();
    const auto seed = c.seed;
    FramePopulation pop;
    pop.config = c;

    // Provinces.
    std::vector<std::vector<std::string>> area_provinces(c.areas.size());
    std::size_t prov_counter = 0;
    for (std::size_t a = 0; a < c.areas.size(); ++a) {
        for (int k = 0; k < c.provinces_per_area; ++k) {
            const auto id = padded('P', ++prov_counter, 3);
            auto rng = Rng::stream(seed, "province", id);
            const double g = std::clamp(rng.normal(c.area_gva[a], c.gva_sd), c.gva_min, c.gva_max);
            pop.province_gva[id] = g;
            pop.province_area[id] = c.areas[a];
            area_provinces[a].push_back(id);
        }
    }

    // Schools and classes.
    auto add_school = [&](std::size_t a, const std::string& grade, Rng& rng, int n_classes) {
        FrameSchool s;
        s.id = padded('S', pop.schools.size() + 1, 4);
        s.area = c.areas[a];
        s.grade_type = grade;
        s.stratum = s.area + "/" + grade;
        s.school_type = rng.bernoulli(c.private_prob) ? "private" : "state";
        s.province = area_provinces[a][static_cast<std::size_t>(rng.uniform_int(0, c.provinces_per_area - 1))];
        for (int k = 0; k < n_classes; ++k) {
            FrameClass fc;
            fc.id = padded('C', pop.classes.size() + 1, 5);
            fc.school = pop.schools.size();
            fc.size = rng.uniform_int(c.class_size_min, c.class_size_max);
            s.classes.push_back(pop.classes.size());
            pop.classes.push_back(std::move(fc));
        }
        pop.schools.push_back(std::move(s));
    };
    const int n_grades = static_cast<int>(c.grade_types.size());
    for (std::size_t a = 0; a < c.areas.size(); ++a) {
        auto rng = Rng::stream(seed, "structure", c.areas[a]);
        if (c.frame.schools_per_stratum > 0) {
            for (const auto& g : c.grade_types) {
                for (int k = 0; k < c.frame.schools_per_stratum; ++k) {
                    add_school(a, g, rng, rng.uniform_int(c.frame.min_classes, c.frame.max_classes));
                }
            }
        } else {
            int remaining = c.classes_per_area[a];
            while (remaining > 0) {
                const int k = (remaining >= 2 && rng.bernoulli(c.two_class_prob)) ? 2 : 1;
                const auto& g = c.grade_types[static_cast<std::size_t>(rng.uniform_int(0, n_grades - 1))];
                add_school(a, g, rng, k);
                remaining -= k;
            }
        }
    }

    // Class effects and measures of size.
    const Eigen::MatrixXd L_tau = factor_psd(c.tau);
    std::unordered_map<std::string, double> area_scale;
    for (std::size_t a = 0; a < c.areas.size(); ++a) area_scale[c.areas[a]] = c.area_tau_scale[a];
    for (auto& fc : pop.classes) {
        auto rng = Rng::stream(seed, "class", fc.id);
        fc.u = std::sqrt(area_scale.at(pop.schools[fc.school].area)) * rng.mvnormal(L_tau);
    }
    for (auto& s : pop.schools) {
        s.mos = 0.0;
        for (auto k : s.classes) {
            const auto& fc = pop.classes[k];
            s.mos += fc.size * std::exp(c.informative_lambda * fc.u(0));
        }
    }

    // Unit-level covariate draws for teacher/class, school and province generators.
    auto unit_of = [&](Level lv, const FrameClass& fc) -> std::pair<std::string, std::string> {
        const auto& s = pop.schools[fc.school];
        switch (lv) {
            case Level::teacher:
            case Level::class_: return {"class-cov", fc.id};
            case Level::school: return {"school-cov", s.id};
            case Level::province: return {"province-cov", s.province};
            case Level::student: break;
        }
        return {"", ""};
    };
    std::map<std::pair<std::string, std::string>, double> unit_values;
    auto unit_draw = [&](const std::string& name, Level lv, const FrameClass& fc, auto&& draw) {
        const auto [kind, id] = unit_of(lv, fc);
        const auto key = std::make_pair(name, id);
        auto it = unit_values.find(key);
        if (it != unit_values.end()) return it->second;
        auto rng = Rng::stream(seed, kind + "/" + name, id);
        const double v = draw(rng);
        unit_values.emplace(key, v);
        return v;
    };

    // Students.
    const Eigen::MatrixXd L_sigma = cholesky_lower(c.sigma, "Sigma");
    Dataset& d = pop.truth;
    d.outcomes = c.outcomes;
    d.n_pv = 1;
    for (const auto& g : c.binary) d.covariates.push_back({g.name, g.level, true, {}});
    for (const auto& g : c.continuous) d.covariates.push_back({g.name, g.level, false, {}});
    d.covariates.push_back({"gva", Level::province, false, {}});
    d.covariates.push_back({"area_code", Level::province, false, {}});
    std::unordered_map<std::string, double> area_code;
    for (std::size_t a = 0; a < c.areas.size(); ++a) area_code[c.areas[a]] = static_cast<double>(a + 1);

    std::vector<Eigen::VectorXd> latent;
    std::unordered_map<std::string, std::size_t> cov_index;
    for (std::size_t k = 0; k < d.covariates.size(); ++k) cov_index[d.covariates[k].name] = k;
    std::vector<double> x(d.covariates.size());
    for (const auto& fc : pop.classes) {
        const auto& s = pop.schools[fc.school];
        for (int i = 0; i < fc.size; ++i) {
            char suffix[16];
            std::snprintf(suffix, sizeof suffix, "-%02d", i + 1);
            const std::string sid = fc.id + suffix;
            auto rng = Rng::stream(seed, "student", sid);
            std::size_t k = 0;
            for (const auto& g : c.binary) {
                x[k++] = g.level == Level::student
                             ? static_cast<double>(rng.bernoulli(g.p))
                             : unit_draw(g.name, g.level, fc, [&](Rng& r) { return static_cast<double>(r.bernoulli(g.p)); });
            }
            for (const auto& g : c.continuous) {
                x[k++] = g.level == Level::student
                             ? rng.normal(g.mean, g.sd)
                             : unit_draw(g.name, g.level, fc, [&](Rng& r) { return r.normal(g.mean, g.sd); });
            }
            const double gva = pop.province_gva.at(s.province);
            x[k++] = gva;
            x[k++] = area_code.at(s.area);

            Eigen::VectorXd theta(M);
            for (int m = 0; m < M; ++m) theta(m) = c.intercept[static_cast<std::size_t>(m)];
            for (const auto& t : c.coefficients) {
                double v;
                if (t.term == "gva_below") {
                    v = std::min(gva - c.gva_knot, 0.0);
                } else if (t.term == "gva_above") {
                    v = std::max(gva - c.gva_knot, 0.0);
                } else {
                    v = x[cov_index.at(t.term)];
                    if (const auto* g = find_continuous(c, t.term)) v -= g->mean;
                }
                for (int m = 0; m < M; ++m) theta(m) += t.values[static_cast<std::size_t>(m)] * v;
            }
            theta += fc.u + rng.mvnormal(L_sigma);

            d.student_ids.push_back(sid);
            d.class_ids.push_back(fc.id);
            d.school_ids.push_back(s.id);
            d.province_ids.push_back(s.province);
            for (std::size_t q = 0; q < x.size(); ++q) d.covariates[q].values.push_back(x[q]);
            latent.push_back(std::move(theta));
        }
    }
    const auto N = static_cast<Eigen::Index>(latent.size());
    d.scores.assign(static_cast<std::size_t>(M), Eigen::MatrixXd(N, 1));
    for (Eigen::Index i = 0; i < N; ++i) {
        for (int m = 0; m < M; ++m) d.scores[static_cast<std::size_t>(m)](i, 0) = latent[static_cast<std::size_t>(i)](m);
    }
    return pop;
}

Dataset draw_plausible_values(const FramePopulation& pop, int m, double sd_meas, std::uint64_t seed) {
    const auto& c = pop.config;
    if (m < 1) throw ValidationError("need at least one plausible value");
    if (!(sd_meas >= 0.0)) throw ValidationError("sd_meas must be nonnegative");
    const Dataset& truth = pop.truth;
    const int M = c.M();
    const auto N = static_cast<Eigen::Index>(truth.n_students());

    Dataset out = truth;
    out.n_pv = m;
    out.scores.assign(static_cast<std::size_t>(M), Eigen::MatrixXd(N, m));

    if (sd_meas == 0.0) {
        for (int k = 0; k < M; ++k) {
            for (int l = 0; l < m; ++l) out.scores[static_cast<std::size_t>(k)].col(l) = truth.scores[static_cast<std::size_t>(k)].col(0);
        }
    } else {
        const double s2 = sd_meas * sd_meas;
        const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(M, M);
        const Eigen::MatrixXd sigma_inv = c.sigma.llt().solve(I);
        // Measurement error with posterior covariance s2 I: S_eta^{-1} = I / s2 - Sigma^{-1}.
        const Eigen::MatrixXd prec = I / s2 - sigma_inv;
        Eigen::LLT<Eigen::MatrixXd> prec_llt(prec);
        if (prec_llt.info() != Eigen::Success) {
            throw ValidationError("sd_meas^2 must be below the smallest eigenvalue of Sigma");
        }
        const Eigen::MatrixXd s_eta = prec_llt.solve(I);
        const Eigen::MatrixXd L_eta = cholesky_lower(0.5 * (s_eta + s_eta.transpose()), "measurement error covariance");

        Dataset measured = truth;
        for (Eigen::Index i = 0; i < N; ++i) {
            auto rng = Rng::stream(seed, "measure", truth.student_ids[static_cast<std::size_t>(i)]);
            const Eigen::VectorXd eta = rng.mvnormal(L_eta);
            for (int k = 0; k < M; ++k) measured.scores[static_cast<std::size_t>(k)](i, 0) += eta(k);
        }

        const auto spec = generative_model(c);
        const auto prepared = prepare_analysis(measured, spec);
        if (prepared.data.n_students() != truth.n_students()) {
            throw ValidationError("latent data has missing covariates");
        }
        const auto D = build_design(prepared.data, spec, 1);
        const CovarianceParams meas{c.sigma + s_eta, c.tau};
        const auto gls = profile_beta_gls(meas, D);
        const Eigen::MatrixXd L_beta = cholesky_lower(0.5 * (gls.cov + gls.cov.transpose()), "GLS covariance");
        const Eigen::MatrixXd K_mu = s2 * sigma_inv;
        const Eigen::MatrixXd K_r = I - K_mu;

        std::unordered_map<std::string, Eigen::Index> row_of;
        for (Eigen::Index i = 0; i < N; ++i) row_of[truth.student_ids[static_cast<std::size_t>(i)]] = i;

        std::vector<MarginalBlocks> blocks(D.classes.size());
        for (std::size_t j = 0; j < D.classes.size(); ++j) blocks[j] = marginal_blocks(meas, D.classes[j].n);

        for (int l = 0; l < m; ++l) {
            const auto tag = "/" + std::to_string(l + 1);
            auto brng = Rng::stream(seed, "pv-beta", tag);
            const Eigen::VectorXd beta_l = gls.beta + brng.mvnormal(L_beta);
            for (std::size_t j = 0; j < D.classes.size(); ++j) {
                const auto& blk = D.classes[j];
                const double n = static_cast<double>(blk.n);
                const Eigen::VectorXd fitted = blk.X * beta_l;
                Eigen::VectorXd rbar = Eigen::VectorXd::Zero(M);
                for (int i = 0; i < blk.n; ++i) rbar += blk.y.segment(i * M, M) - fitted.segment(i * M, M);
                rbar /= n;
                const Eigen::MatrixXd TA = c.tau * blocks[j].A;
                const Eigen::VectorXd post_mean = n * TA * rbar;
                const Eigen::MatrixXd post_cov = c.tau - n * TA * c.tau;
                auto crng = Rng::stream(seed, "pv-class", blk.class_id + tag);
                Eigen::VectorXd z(M);
                for (int k = 0; k < M; ++k) z(k) = crng.normal();
                const Eigen::VectorXd u_l = post_mean + psd_sqrt(post_cov) * z;
                for (int i = 0; i < blk.n; ++i) {
                    const auto& sid = blk.student_ids[static_cast<std::size_t>(i)];
                    auto srng = Rng::stream(seed, "pv-student", sid + tag);
                    Eigen::VectorXd e(M);
                    for (int k = 0; k < M; ++k) e(k) = srng.normal();
                    const Eigen::VectorXd mu = fitted.segment(i * M, M) + u_l;
                    const Eigen::VectorXd pv = K_mu * mu + K_r * blk.y.segment(i * M, M) + sd_meas * e;
                    const auto row = row_of.at(sid);
                    for (int k = 0; k < M; ++k) out.scores[static_cast<std::size_t>(k)](row, l) = pv(k);
                }
            }
        }
    }

    // Missing covariate values (MCAR, constant within the covariate's unit).
    for (auto& col : out.covariates) {
        auto it = c.missing_rate.find(col.name);
        if (it == c.missing_rate.end() || it->second == 0.0) continue;
        for (std::size_t i = 0; i < out.n_students(); ++i) {
            std::string unit;
            switch (col.level) {
                case Level::student: unit = out.student_ids[i]; break;
                case Level::teacher:
                case Level::class_: unit = out.class_ids[i]; break;
                case Level::school: unit = out.school_ids[i]; break;
                case Level::province: unit = out.province_ids[i]; break;
            }
            auto rng = Rng::stream(seed, "missing/" + col.name, unit);
            if (rng.bernoulli(it->second)) col.values[i] = kMissing;
        }
    }
    return out;
}

Simulation simulate_population(const SimConfig& c) {
    Simulation s;
    s.population = simulate_frame(c);
    s.data = draw_plausible_values(s.population, c.n_pv, c.sd_meas, c.seed);
    return s;
}

FramePopulation FramePopulation::restrict(const std::vector<std::string>& class_ids) const {
    const std::set<std::string> keep(class_ids.begin(), class_ids.end());
    FramePopulation p;
    p.config = config;
    p.province_gva = province_gva;
    p.province_area = province_area;
    std::vector<std::size_t> school_map(schools.size(), static_cast<std::size_t>(-1));
    for (const auto& fc : classes) {
        if (!keep.count(fc.id)) continue;
        if (school_map[fc.school] == static_cast<std::size_t>(-1)) {
            school_map[fc.school] = p.schools.size();
            FrameSchool s = schools[fc.school];
            s.classes.clear();
            p.schools.push_back(std::move(s));
        }
        FrameClass nc = fc;
        nc.school = school_map[fc.school];
        p.schools[nc.school].classes.push_back(p.classes.size());
        p.classes.push_back(std::move(nc));
    }
    if (p.classes.size() != keep.size()) throw ValidationError("unknown class id in selection");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < truth.n_students(); ++i) {
        if (keep.count(truth.class_ids[i])) rows.push_back(i);
    }
    p.truth = truth.subset(rows);
    return p;
}

std::map<std::string, std::string> FramePopulation::class_area() const {
    std::map<std::string, std::string> out;
    for (const auto& fc : classes) out[fc.id] = schools[fc.school].area;
    return out;
}

std::map<std::string, std::string> FramePopulation::school_stratum() const {
    std::map<std::string, std::string> out;
    for (const auto& s : schools) out[s.id] = s.stratum;
    return out;
}

std::vector<std::string> FramePopulation::class_ids() const {
    std::vector<std::string> out;
    for (const auto& fc : classes) out.push_back(fc.id);
    return out;
}

void save_frame(const std::string& path, const FramePopulation& pop) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    out << "school_id,stratum,area,grade_type,school_type,province_id,mos[students],n_classes\n";
    for (const auto& s : pop.schools) {
        out << s.id << ',' << s.stratum << ',' << s.area << ',' << s.grade_type << ',' << s.school_type << ','
            << s.province << ',' << format_double(s.mos) << ',' << s.classes.size() << '\n';
    }
}

void save_classes(const std::string& path, const FramePopulation& pop) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    out << "class_id,school_id,area,stratum,size[students]";
    for (const auto& o : pop.config.outcomes) out << ",u_" << o << "[points]";
    out << '\n';
    for (const auto& fc : pop.classes) {
        const auto& s = pop.schools[fc.school];
        out << fc.id << ',' << s.id << ',' << s.area << ',' << s.stratum << ',' << fc.size;
        for (Eigen::Index m = 0; m < fc.u.size(); ++m) out << ',' << format_double(fc.u(m));
        out << '\n';
    }
}

}  // namespace mvmlm
