#include "mvmlm/json_io.hpp"

#include "mvmlm/error.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace mvmlm {

namespace {

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double num_of(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

nlohmann::json matrix_json(const Eigen::MatrixXd& A) {
    nlohmann::json j = nlohmann::json::array();
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < A.cols(); ++c) row.push_back(num(A(r, c)));
        j.push_back(std::move(row));
    }
    return j;
}

nlohmann::json vector_json(const Eigen::VectorXd& v) {
    nlohmann::json j = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(num(v(i)));
    return j;
}

Eigen::MatrixXd json_matrix(const nlohmann::json& j) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
    Eigen::MatrixXd A(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = j.at(static_cast<std::size_t>(r));
        if (static_cast<Eigen::Index>(row.size()) != cols) throw ValidationError("ragged matrix in JSON");
        for (Eigen::Index c = 0; c < cols; ++c) A(r, c) = num_of(row.at(static_cast<std::size_t>(c)));
    }
    return A;
}

Eigen::VectorXd json_vector(const nlohmann::json& j) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = num_of(j.at(static_cast<std::size_t>(i)));
    return v;
}

nlohmann::json to_json(const FitResult& F) {
    nlohmann::json j;
    j["outcomes"] = F.outcomes();
    j["coefficients"] = nlohmann::json::array();
    for (int i = 0; i < F.layout.size(); ++i) {
        const auto& c = F.layout.coefficients[static_cast<std::size_t>(i)];
        j["coefficients"].push_back({{"name", c.name},
                                     {"term", c.term},
                                     {"outcome", c.outcome},
                                     {"estimate", num(F.beta(i))},
                                     {"se_model", num(std::sqrt(F.cov_model(i, i)))},
                                     {"se_robust", num(std::sqrt(F.cov_robust(i, i)))}});
    }
    j["beta"] = vector_json(F.beta);
    j["cov_model"] = matrix_json(F.cov_model);
    j["cov_robust"] = matrix_json(F.cov_robust);
    j["sigma"] = matrix_json(F.sigma);
    j["tau"] = matrix_json(F.tau);
    j["variance_components"] = nlohmann::json::array();
    for (const auto& v : F.varcomps) {
        j["variance_components"].push_back(
            {{"name", v.name}, {"estimate", num(v.estimate)}, {"se_model", num(v.se_model)}, {"se_robust", num(v.se_robust)}});
    }
    j["logL"] = num(F.logL);
    j["logL_initial"] = num(F.logL_initial);
    j["convergence"] = {{"status", to_string(F.convergence.status)},
                        {"iterations", F.convergence.iterations},
                        {"evaluations", F.convergence.evaluations},
                        {"grad_norm", num(F.convergence.grad_norm)},
                        {"near_singular_tau", F.convergence.near_singular_tau}};
    j["n_students"] = F.n_students;
    j["n_classes"] = F.n_classes;
    j["n_schools"] = F.n_schools;
    j["class_ids"] = F.class_ids;
    j["theta"] = vector_json(F.theta);
    j["trace"] = F.trace;
    return j;
}

FitResult fit_result_from_json(const nlohmann::json& j) {
    try {
        FitResult F;
        F.layout.outcomes = j.at("outcomes").get<std::vector<std::string>>();
        for (const auto& c : j.at("coefficients")) {
            F.layout.coefficients.push_back(
                {c.at("name").get<std::string>(), c.at("term").get<std::string>(), c.at("outcome").get<int>()});
        }
        F.beta = json_vector(j.at("beta"));
        F.cov_model = json_matrix(j.at("cov_model"));
        F.cov_robust = json_matrix(j.at("cov_robust"));
        F.sigma = json_matrix(j.at("sigma"));
        F.tau = json_matrix(j.at("tau"));
        for (const auto& v : j.at("variance_components")) {
            F.varcomps.push_back({v.at("name").get<std::string>(), num_of(v.at("estimate")), num_of(v.at("se_model")),
                                  num_of(v.at("se_robust"))});
        }
        F.logL = num_of(j.at("logL"));
        F.logL_initial = num_of(j.value("logL_initial", nlohmann::json(nullptr)));
        const auto& c = j.at("convergence");
        const auto status = c.at("status").get<std::string>();
        F.convergence.status = status == "converged"  ? OptimStatus::converged
                               : status == "max_iter" ? OptimStatus::max_iter
                                                      : OptimStatus::stalled;
        F.convergence.iterations = c.value("iterations", 0);
        F.convergence.evaluations = c.value("evaluations", 0);
        F.convergence.grad_norm = num_of(c.value("grad_norm", nlohmann::json(nullptr)));
        F.convergence.near_singular_tau = c.value("near_singular_tau", false);
        F.n_students = j.value("n_students", 0);
        F.n_classes = j.value("n_classes", 0);
        F.n_schools = j.value("n_schools", 0);
        F.class_ids = j.at("class_ids").get<std::vector<std::string>>();
        if (j.contains("theta")) F.theta = json_vector(j.at("theta"));
        if (j.contains("trace")) F.trace = j.at("trace").get<std::vector<double>>();
        if (F.beta.size() != F.layout.size()) throw ValidationError("coefficient count does not match beta");
        return F;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed fit JSON: ") + e.what());
    }
}

nlohmann::json to_json(const ScalarPool& s) {
    return {{"name", s.name},   {"estimate", num(s.estimate)}, {"within", num(s.within)}, {"between", num(s.between)},
            {"total", num(s.total)}, {"se", num(s.se())},       {"df", num(s.df)}};
}

nlohmann::json to_json(const EqualityTest& t) {
    return {{"term", t.term},         {"statistic", num(t.statistic)}, {"df_num", t.k}, {"df_den", num(t.nu)},
            {"p_value", num(t.p_value)}, {"r", num(t.r)},               {"contrast", matrix_json(t.C)}};
}

nlohmann::json to_json(const MIFitResult& mi) {
    nlohmann::json j;
    j["covariance"] = to_string(mi.covariance);
    j["m"] = mi.m();
    j["flagged"] = mi.flagged;
    j["warnings"] = mi.warnings;
    j["outcomes"] = mi.layout.outcomes;
    j["coefficients"] = nlohmann::json::array();
    for (const auto& c : mi.coefficients) j["coefficients"].push_back(to_json(c));
    j["variance_components"] = nlohmann::json::array();
    for (const auto& c : mi.varcomps) j["variance_components"].push_back(to_json(c));
    j["sigma"] = matrix_json(mi.sigma);
    j["tau"] = matrix_json(mi.tau);
    j["used"] = mi.used;
    j["imputations"] = nlohmann::json::array();
    for (const auto& f : mi.fits) j["imputations"].push_back(to_json(f));
    return j;
}

MIFitResult mi_result_from_json(const nlohmann::json& j) {
    try {
        std::vector<FitResult> fits;
        for (const auto& f : j.at("imputations")) fits.push_back(fit_result_from_json(f));
        return combine_fits(std::move(fits), covariance_choice_from_string(j.value("covariance", std::string("robust"))));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed MI JSON: ") + e.what());
    }
}

nlohmann::json to_json(const DecompositionReport& r) {
    return {{"outcomes", r.outcomes},
            {"within_correlation", matrix_json(r.within_corr)},
            {"between_correlation", matrix_json(r.between_corr)},
            {"total_correlation", matrix_json(r.total_corr)},
            {"percent_between", matrix_json(r.pct_between)},
            {"icc_percent", vector_json(r.icc)}};
}

nlohmann::json to_json(const VarianceExplained& v) {
    return {{"outcomes", v.outcomes},
            {"within_reduction_percent", vector_json(v.within_reduction)},
            {"between_reduction_percent", vector_json(v.between_reduction)},
            {"residual_icc_percent", vector_json(v.residual_icc)}};
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(0, path + ": " + e.what());
    }
}

void write_file_atomic(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write '" + tmp + "'");
        out << contents;
        if (!out) throw ValidationError("write to '" + tmp + "' failed");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw ValidationError("cannot rename '" + tmp + "' to '" + path + "'");
}

}  // namespace mvmlm
