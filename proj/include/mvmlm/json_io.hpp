#pragma once

#include "mvmlm/eb.hpp"
#include "mvmlm/fit.hpp"
#include "mvmlm/mi.hpp"

#include <Eigen/Dense>

#include <string>

#include <json.hpp>

namespace mvmlm {

/// Non-finite entries are written as null and read back as NaN.
nlohmann::json matrix_json(const Eigen::MatrixXd& A);
nlohmann::json vector_json(const Eigen::VectorXd& v);
Eigen::MatrixXd json_matrix(const nlohmann::json& j);
Eigen::VectorXd json_vector(const nlohmann::json& j);

nlohmann::json to_json(const FitResult& F);
FitResult fit_result_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ScalarPool& s);
nlohmann::json to_json(const EqualityTest& t);
nlohmann::json to_json(const MIFitResult& mi);
MIFitResult mi_result_from_json(const nlohmann::json& j);

nlohmann::json to_json(const DecompositionReport& r);
nlohmann::json to_json(const VarianceExplained& v);

nlohmann::json read_json_file(const std::string& path);
/// Writes to `path.tmp` and renames, so readers never see a partial file.
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace mvmlm
