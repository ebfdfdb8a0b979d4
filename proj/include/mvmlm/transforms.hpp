#pragma once

#include "mvmlm/dataset.hpp"
#include "mvmlm/model_spec.hpp"

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace mvmlm {

struct ExclusionReport {
    std::size_t n_students_dropped = 0;
    std::size_t n_classes_dropped = 0;
    std::size_t n_students_before = 0;
    std::size_t n_classes_before = 0;
    std::map<std::string, std::size_t> missing_by_column;
};

nlohmann::json to_json(const ExclusionReport& r);

struct FilterResult {
    Dataset data;
    ExclusionReport report;
};

struct TransformResult {
    Dataset data;
    std::vector<std::string> warnings;
};

struct PreparedData {
    Dataset data;
    ExclusionReport report;
    std::vector<std::string> warnings;
};

/// min(x - knot, 0).
double spline_below_knot(double x, double knot);

/// Source columns a model needs before derived columns exist.
std::vector<std::string> required_columns(const Dataset& d, const ModelSpec& spec);

/// Drops students with a missing value in any required column; classes left
/// empty disappear. Throws EmptyAnalysisError if nobody survives.
FilterResult listwise_filter(const Dataset& d, const ModelSpec& spec);

/// Class means, then splines (on the raw values), then centering over the
/// rows present in `d`.
TransformResult apply_transforms(const Dataset& d, const TransformSpec& t);

/// The full ingest path: class means (pre-deletion by default), listwise
/// deletion, remaining transforms on the estimation sample.
PreparedData prepare_analysis(const Dataset& d, const ModelSpec& spec);

}  // namespace mvmlm
