#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <iosfwd>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace mvmlm {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

enum class Level { student, teacher, class_, school, province };

std::string_view to_string(Level level);
Level level_from_string(std::string_view s);

struct CovariateColumn {
    std::string name;
    Level level = Level::student;
    bool binary = false;
    std::vector<double> values;  // NaN marks a missing value
};

struct CovariateSchema {
    std::string name;
    Level level = Level::student;
    bool binary = false;
};

/// Column-to-role map for the long-format CSV.
struct Schema {
    std::string student_column = "student_id";
    std::string class_column = "class_id";
    std::string school_column = "school_id";
    std::string province_column = "province_id";
    std::vector<std::string> outcomes;
    int n_pv = 1;
    std::vector<CovariateSchema> covariates;
};

Schema schema_from_json(const nlohmann::json& j);
nlohmann::json schema_to_json(const Schema& s);

/// Students within classes within schools within provinces, one row per
/// student. Rows keep file order; classes are identified by string id.
struct Dataset {
    std::vector<std::string> student_ids;
    std::vector<std::string> class_ids;
    std::vector<std::string> school_ids;
    std::vector<std::string> province_ids;

    std::vector<std::string> outcomes;
    int n_pv = 1;
    std::vector<Eigen::MatrixXd> scores;  // one N x n_pv matrix per outcome

    std::vector<CovariateColumn> covariates;

    std::size_t n_students() const { return student_ids.size(); }
    std::size_t n_classes() const;

    const CovariateColumn* find_covariate(std::string_view name) const;
    CovariateColumn* find_covariate(std::string_view name);
    const CovariateColumn& covariate(std::string_view name) const;
    int outcome_index(std::string_view name) const;

    /// Class ids in order of first appearance.
    std::vector<std::string> class_order() const;

    /// Rows in the given order (duplicates not allowed).
    Dataset subset(const std::vector<std::size_t>& rows) const;
};

Schema schema_of(const Dataset& d);

/// Parses and validates the nesting and level constancy of a CSV stream.
Dataset parse_dataset(std::istream& in, const Schema& schema);
Dataset load_dataset(const std::string& path, const Schema& schema);

/// Canonical emission: ids, outcome PVs (outcome-major), covariates in
/// dataset order. Doubles use the shortest round-trip representation and
/// missing values are written as NA.
void emit_dataset(std::ostream& out, const Dataset& d);
void save_dataset(const std::string& path, const Dataset& d);

/// Throws StructuralError if nesting is broken or a higher-level covariate
/// varies within its unit.
void validate_structure(const Dataset& d);

std::string format_double(double v);

}  // namespace mvmlm
