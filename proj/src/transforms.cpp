#include "mvmlm/transforms.hpp"

#include "mvmlm/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace mvmlm {

nlohmann::json to_json(const ExclusionReport& r) {
    nlohmann::json j;
    j["n_students_before"] = r.n_students_before;
    j["n_classes_before"] = r.n_classes_before;
    j["n_students_dropped"] = r.n_students_dropped;
    j["n_classes_dropped"] = r.n_classes_dropped;
    j["missing_by_column"] = r.missing_by_column;
    return j;
}

double spline_below_knot(double x, double knot) { return std::min(x - knot, 0.0); }

namespace {

bool is_derived_from(const std::string& name, const std::string& source, const std::string& derived) {
    return name == derived && !source.empty();
}

// Maps a term column to the column(s) that must be observed for it.
std::string source_of(const Dataset& d, const ModelSpec& spec, const std::string& column) {
    if (d.find_covariate(column)) return column;
    for (const auto& s : spec.transforms.splines) {
        if (is_derived_from(column, s.column, spline_below_name(s.column)) ||
            is_derived_from(column, s.column, spline_above_name(s.column))) {
            return s.column;
        }
    }
    for (const auto& c : spec.transforms.class_means) {
        if (column == class_mean_name(c)) return c;
    }
    throw ValidationError("model references unknown column '" + column + "'");
}

Dataset add_class_means(const Dataset& d, const std::vector<std::string>& columns) {
    Dataset out = d;
    for (const auto& name : columns) {
        const auto& src = d.covariate(name);
        std::unordered_map<std::string, std::pair<double, std::size_t>> acc;
        for (std::size_t i = 0; i < d.n_students(); ++i) {
            auto& a = acc[d.class_ids[i]];
            if (!std::isnan(src.values[i])) {
                a.first += src.values[i];
                a.second += 1;
            }
        }
        CovariateColumn col{class_mean_name(name), Level::class_, false, {}};
        col.values.reserve(d.n_students());
        for (std::size_t i = 0; i < d.n_students(); ++i) {
            const auto& a = acc[d.class_ids[i]];
            col.values.push_back(a.second ? a.first / static_cast<double>(a.second) : kMissing);
        }
        if (auto* existing = out.find_covariate(col.name)) *existing = std::move(col);
        else out.covariates.push_back(std::move(col));
    }
    return out;
}

}  // namespace

std::vector<std::string> required_columns(const Dataset& d, const ModelSpec& spec) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& t : spec.terms) {
        for (const auto& c : t.columns) {
            if (c.empty()) continue;
            const auto chosen = source_of(d, spec, c);
            if (seen.insert(chosen).second) out.push_back(chosen);
        }
    }
    for (const auto& c : spec.transforms.center) {
        if (d.find_covariate(c.column) && seen.insert(c.column).second) out.push_back(c.column);
    }
    return out;
}

FilterResult listwise_filter(const Dataset& d, const ModelSpec& spec) {
    const auto cols = required_columns(d, spec);
    FilterResult res;
    res.report.n_students_before = d.n_students();
    res.report.n_classes_before = d.n_classes();
    std::vector<const CovariateColumn*> ptrs;
    for (const auto& c : cols) {
        ptrs.push_back(&d.covariate(c));
        res.report.missing_by_column[c] = 0;
    }
    std::vector<std::size_t> keep;
    keep.reserve(d.n_students());
    for (std::size_t i = 0; i < d.n_students(); ++i) {
        bool complete = true;
        for (const auto* p : ptrs) {
            if (std::isnan(p->values[i])) {
                ++res.report.missing_by_column[p->name];
                complete = false;
            }
        }
        if (complete) keep.push_back(i);
    }
    if (keep.empty()) throw EmptyAnalysisError("listwise deletion removed every student");
    res.data = d.subset(keep);
    res.report.n_students_dropped = d.n_students() - keep.size();
    res.report.n_classes_dropped = res.report.n_classes_before - res.data.n_classes();
    return res;
}

TransformResult apply_transforms(const Dataset& d, const TransformSpec& t) {
    TransformResult res;
    res.data = add_class_means(d, t.class_means);
    auto& out = res.data;

    for (const auto& s : t.splines) {
        const auto src = out.covariate(s.column);  // copy: push_back may reallocate
        if (!std::isfinite(s.knot)) throw ValidationError("spline knot must be finite");
        CovariateColumn below{spline_below_name(s.column), src.level, false, {}};
        CovariateColumn above{spline_above_name(s.column), src.level, false, {}};
        for (double x : src.values) {
            below.values.push_back(std::isnan(x) ? kMissing : spline_below_knot(x, s.knot));
            above.values.push_back(std::isnan(x) ? kMissing : std::max(x - s.knot, 0.0));
        }
        auto put = [&](CovariateColumn col) {
            if (auto* existing = out.find_covariate(col.name)) *existing = std::move(col);
            else out.covariates.push_back(std::move(col));
        };
        put(std::move(below));
        if (!s.constrain_upper) put(std::move(above));
    }

    std::unordered_set<std::string> centered;
    for (const auto& c : t.center) {
        if (!centered.insert(c.column).second) {
            throw ValidationError("column '" + c.column + "' is centered more than once");
        }
        auto* col = out.find_covariate(c.column);
        if (!col) throw ValidationError("cannot center unknown column '" + c.column + "'");
        if (col->binary) res.warnings.push_back("centering binary indicator '" + c.column + "'");
        double center = 0.0;
        if (c.value) {
            center = *c.value;
        } else {
            // two-pass mean so the centered column sums to ~0 in floating point
            double sum = 0.0;
            std::size_t n = 0;
            for (double v : col->values) {
                if (!std::isnan(v)) {
                    sum += v;
                    ++n;
                }
            }
            if (n == 0) throw ValidationError("column '" + c.column + "' has no observed values to center");
            center = sum / static_cast<double>(n);
            double resid = 0.0;
            for (double v : col->values) {
                if (!std::isnan(v)) resid += v - center;
            }
            center += resid / static_cast<double>(n);
        }
        for (double& v : col->values) {
            if (!std::isnan(v)) v -= center;
        }
        col->binary = false;
    }
    return res;
}

PreparedData prepare_analysis(const Dataset& d, const ModelSpec& spec) {
    Dataset base = d;
    TransformSpec rest = spec.transforms;
    if (spec.class_means_before_deletion && !rest.class_means.empty()) {
        base = add_class_means(base, rest.class_means);
        rest.class_means.clear();
    }
    auto filtered = listwise_filter(base, spec);
    auto transformed = apply_transforms(filtered.data, rest);
    return {std::move(transformed.data), filtered.report, std::move(transformed.warnings)};
}

}  // namespace mvmlm
