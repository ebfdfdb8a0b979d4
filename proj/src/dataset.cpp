#include "mvmlm/dataset.hpp"

#include "mvmlm/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace mvmlm {

std::string_view to_string(Level level) {
    switch (level) {
        case Level::student: return "student";
        case Level::teacher: return "teacher";
        case Level::class_: return "class";
        case Level::school: return "school";
        case Level::province: return "province";
    }
    return "student";
}

Level level_from_string(std::string_view s) {
    if (s == "student") return Level::student;
    if (s == "teacher") return Level::teacher;
    if (s == "class") return Level::class_;
    if (s == "school") return Level::school;
    if (s == "province") return Level::province;
    throw ValidationError("unknown covariate level '" + std::string(s) + "'");
}

Schema schema_from_json(const nlohmann::json& j) {
    Schema s;
    if (j.contains("id_columns")) {
        const auto& ids = j.at("id_columns");
        s.student_column = ids.value("student", s.student_column);
        s.class_column = ids.value("class", s.class_column);
        s.school_column = ids.value("school", s.school_column);
        s.province_column = ids.value("province", s.province_column);
    }
    s.outcomes = j.at("outcomes").get<std::vector<std::string>>();
    s.n_pv = j.value("plausible_values", 1);
    if (s.outcomes.empty()) throw ValidationError("schema lists no outcomes");
    if (s.n_pv < 1) throw ValidationError("schema needs at least one plausible value");
    for (const auto& c : j.value("covariates", nlohmann::json::array())) {
        CovariateSchema cs;
        cs.name = c.at("name").get<std::string>();
        cs.level = level_from_string(c.value("level", std::string("student")));
        cs.binary = c.value("binary", false);
        s.covariates.push_back(std::move(cs));
    }
    return s;
}

nlohmann::json schema_to_json(const Schema& s) {
    nlohmann::json j;
    j["id_columns"] = {{"student", s.student_column},
                       {"class", s.class_column},
                       {"school", s.school_column},
                       {"province", s.province_column}};
    j["outcomes"] = s.outcomes;
    j["plausible_values"] = s.n_pv;
    auto covs = nlohmann::json::array();
    for (const auto& c : s.covariates) {
        covs.push_back({{"name", c.name}, {"level", std::string(to_string(c.level))}, {"binary", c.binary}});
    }
    j["covariates"] = covs;
    return j;
}

std::size_t Dataset::n_classes() const {
    std::unordered_set<std::string> seen(class_ids.begin(), class_ids.end());
    return seen.size();
}

const CovariateColumn* Dataset::find_covariate(std::string_view name) const {
    for (const auto& c : covariates) {
        if (c.name == name) return &c;
    }
    return nullptr;
}

CovariateColumn* Dataset::find_covariate(std::string_view name) {
    for (auto& c : covariates) {
        if (c.name == name) return &c;
    }
    return nullptr;
}

const CovariateColumn& Dataset::covariate(std::string_view name) const {
    const auto* c = find_covariate(name);
    if (!c) throw ValidationError("unknown column '" + std::string(name) + "'");
    return *c;
}

int Dataset::outcome_index(std::string_view name) const {
    for (std::size_t m = 0; m < outcomes.size(); ++m) {
        if (outcomes[m] == name) return static_cast<int>(m);
    }
    throw ValidationError("unknown outcome '" + std::string(name) + "'");
}

std::vector<std::string> Dataset::class_order() const {
    std::vector<std::string> order;
    std::unordered_set<std::string> seen;
    for (const auto& c : class_ids) {
        if (seen.insert(c).second) order.push_back(c);
    }
    return order;
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.outcomes = outcomes;
    out.n_pv = n_pv;
    const auto n = rows.size();
    out.student_ids.reserve(n);
    out.class_ids.reserve(n);
    out.school_ids.reserve(n);
    out.province_ids.reserve(n);
    for (auto r : rows) {
        out.student_ids.push_back(student_ids[r]);
        out.class_ids.push_back(class_ids[r]);
        out.school_ids.push_back(school_ids[r]);
        out.province_ids.push_back(province_ids[r]);
    }
    for (const auto& s : scores) {
        Eigen::MatrixXd sub(static_cast<Eigen::Index>(n), s.cols());
        for (std::size_t i = 0; i < n; ++i) sub.row(static_cast<Eigen::Index>(i)) = s.row(static_cast<Eigen::Index>(rows[i]));
        out.scores.push_back(std::move(sub));
    }
    for (const auto& c : covariates) {
        CovariateColumn col{c.name, c.level, c.binary, {}};
        col.values.reserve(n);
        for (auto r : rows) col.values.push_back(c.values[r]);
        out.covariates.push_back(std::move(col));
    }
    return out;
}

Schema schema_of(const Dataset& d) {
    Schema s;
    s.outcomes = d.outcomes;
    s.n_pv = d.n_pv;
    for (const auto& c : d.covariates) s.covariates.push_back({c.name, c.level, c.binary});
    return s;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (quoted) throw ParseError(line_no, "unterminated quoted field");
    fields.push_back(std::move(cur));
    return fields;
}

bool is_missing_token(std::string_view s) { return s.empty() || s == "NA"; }

double parse_number(const std::string& s, std::size_t line_no, const std::string& column) {
    if (is_missing_token(s)) return kMissing;
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (!s.empty() && s.front() == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
        throw ParseError(line_no, "column '" + column + "': cannot parse '" + s + "' as a number");
    }
    return v;
}

bool same_value(double a, double b) {
    if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
    return a == b;
}

void check_constant_within(const std::vector<std::string>& units, const CovariateColumn& col,
                           std::string_view unit_kind) {
    std::unordered_map<std::string, double> first;
    for (std::size_t i = 0; i < units.size(); ++i) {
        auto [it, inserted] = first.emplace(units[i], col.values[i]);
        if (!inserted && !same_value(it->second, col.values[i])) {
            throw StructuralError(units[i], std::string(to_string(col.level)) + "-level covariate '" + col.name +
                                                "' is not constant within " + std::string(unit_kind) + " '" +
                                                units[i] + "'");
        }
    }
}

void check_nesting(const std::vector<std::string>& child, const std::vector<std::string>& parent,
                   std::string_view child_kind, std::string_view parent_kind) {
    std::unordered_map<std::string, std::string> owner;
    for (std::size_t i = 0; i < child.size(); ++i) {
        auto [it, inserted] = owner.emplace(child[i], parent[i]);
        if (!inserted && it->second != parent[i]) {
            throw StructuralError(child[i], std::string(child_kind) + " '" + child[i] + "' appears in " +
                                                std::string(parent_kind) + "s '" + it->second + "' and '" +
                                                parent[i] + "'");
        }
    }
}

}  // namespace

void validate_structure(const Dataset& d) {
    check_nesting(d.class_ids, d.school_ids, "class", "school");
    check_nesting(d.school_ids, d.province_ids, "school", "province");
    std::unordered_set<std::string> students;
    for (const auto& s : d.student_ids) {
        if (!students.insert(s).second) throw StructuralError(s, "student '" + s + "' appears more than once");
    }
    for (const auto& c : d.covariates) {
        switch (c.level) {
            case Level::student: break;
            case Level::teacher:
            case Level::class_: check_constant_within(d.class_ids, c, "class"); break;
            case Level::school: check_constant_within(d.school_ids, c, "school"); break;
            case Level::province: check_constant_within(d.province_ids, c, "province"); break;
        }
    }
}

Dataset parse_dataset(std::istream& in, const Schema& schema) {
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw ParseError(1, "missing header row");
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
    const auto header = split_csv_line(line, line_no);
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (!index.emplace(header[i], i).second) throw ParseError(line_no, "duplicate column '" + header[i] + "'");
    }
    auto col = [&](const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw ParseError(line_no, "missing column '" + name + "'");
        return it->second;
    };

    const auto student_col = col(schema.student_column);
    const auto class_col = col(schema.class_column);
    const auto school_col = col(schema.school_column);
    const auto province_col = col(schema.province_column);

    const auto n_out = schema.outcomes.size();
    std::vector<std::vector<std::size_t>> pv_cols(n_out);
    for (std::size_t m = 0; m < n_out; ++m) {
        for (int l = 1; l <= schema.n_pv; ++l) pv_cols[m].push_back(col(schema.outcomes[m] + "_pv" + std::to_string(l)));
    }
    std::vector<std::size_t> cov_cols;
    for (const auto& c : schema.covariates) cov_cols.push_back(col(c.name));

    Dataset d;
    d.outcomes = schema.outcomes;
    d.n_pv = schema.n_pv;
    std::vector<std::vector<double>> raw_scores(n_out * static_cast<std::size_t>(schema.n_pv));
    for (const auto& c : schema.covariates) d.covariates.push_back({c.name, c.level, c.binary, {}});

    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line, line_no);
        if (fields.size() != header.size()) {
            throw ParseError(line_no, "expected " + std::to_string(header.size()) + " fields, found " +
                                          std::to_string(fields.size()));
        }
        auto id = [&](std::size_t c, const std::string& name) {
            if (is_missing_token(fields[c])) throw ParseError(line_no, "missing identifier in column '" + name + "'");
            return fields[c];
        };
        d.student_ids.push_back(id(student_col, schema.student_column));
        d.class_ids.push_back(id(class_col, schema.class_column));
        d.school_ids.push_back(id(school_col, schema.school_column));
        d.province_ids.push_back(id(province_col, schema.province_column));
        for (std::size_t m = 0; m < n_out; ++m) {
            for (int l = 0; l < schema.n_pv; ++l) {
                const auto c = pv_cols[m][static_cast<std::size_t>(l)];
                const double v = parse_number(fields[c], line_no, header[c]);
                if (std::isnan(v)) {
                    throw ParseError(line_no, "missing outcome value in column '" + header[c] +
                                                  "' (response vectors must be complete)");
                }
                raw_scores[m * static_cast<std::size_t>(schema.n_pv) + static_cast<std::size_t>(l)].push_back(v);
            }
        }
        for (std::size_t k = 0; k < cov_cols.size(); ++k) {
            const double v = parse_number(fields[cov_cols[k]], line_no, header[cov_cols[k]]);
            if (d.covariates[k].binary && !std::isnan(v) && v != 0.0 && v != 1.0) {
                throw ParseError(line_no, "binary column '" + d.covariates[k].name + "' holds " + fields[cov_cols[k]]);
            }
            d.covariates[k].values.push_back(v);
        }
    }

    const auto n = static_cast<Eigen::Index>(d.student_ids.size());
    for (std::size_t m = 0; m < n_out; ++m) {
        Eigen::MatrixXd s(n, schema.n_pv);
        for (int l = 0; l < schema.n_pv; ++l) {
            const auto& v = raw_scores[m * static_cast<std::size_t>(schema.n_pv) + static_cast<std::size_t>(l)];
            for (Eigen::Index i = 0; i < n; ++i) s(i, l) = v[static_cast<std::size_t>(i)];
        }
        d.scores.push_back(std::move(s));
    }
    validate_structure(d);
    return d;
}

Dataset load_dataset(const std::string& path, const Schema& schema) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open data file '" + path + "'");
    return parse_dataset(in, schema);
}

std::string format_double(double v) {
    if (std::isnan(v)) return "NA";
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, ptr);
}

void emit_dataset(std::ostream& out, const Dataset& d) {
    out << "student_id,class_id,school_id,province_id";
    for (const auto& o : d.outcomes) {
        for (int l = 1; l <= d.n_pv; ++l) out << ',' << o << "_pv" << l;
    }
    for (const auto& c : d.covariates) out << ',' << c.name;
    out << '\n';
    for (std::size_t i = 0; i < d.n_students(); ++i) {
        out << d.student_ids[i] << ',' << d.class_ids[i] << ',' << d.school_ids[i] << ',' << d.province_ids[i];
        for (const auto& s : d.scores) {
            for (Eigen::Index l = 0; l < s.cols(); ++l) out << ',' << format_double(s(static_cast<Eigen::Index>(i), l));
        }
        for (const auto& c : d.covariates) out << ',' << format_double(c.values[i]);
        out << '\n';
    }
}

void save_dataset(const std::string& path, const Dataset& d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    emit_dataset(out, d);
}

}  // namespace mvmlm
