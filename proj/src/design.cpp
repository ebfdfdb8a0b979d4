#include "mvmlm/design.hpp"

#include "mvmlm/error.hpp"

#include <cmath>
#include <unordered_map>

namespace mvmlm {

std::vector<std::string> CoefficientLayout::names() const {
    std::vector<std::string> out;
    for (const auto& c : coefficients) out.push_back(c.name);
    return out;
}

int CoefficientLayout::index_of(const std::string& term, int outcome) const {
    for (std::size_t k = 0; k < coefficients.size(); ++k) {
        const auto& c = coefficients[k];
        if (c.term == term && (c.outcome == outcome || c.outcome == -1)) return static_cast<int>(k);
    }
    return -1;
}

bool CoefficientLayout::is_common(const std::string& term) const {
    for (const auto& c : coefficients) {
        if (c.term == term) return c.outcome == -1;
    }
    throw ValidationError("unknown term '" + term + "'");
}

int StackedDesign::n_students() const {
    int n = 0;
    for (const auto& c : classes) n += c.n;
    return n;
}

Eigen::MatrixXd StackedDesign::stacked_X() const {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(n_students()) * M, p);
    Eigen::Index row = 0;
    for (const auto& c : classes) {
        X.middleRows(row, c.X.rows()) = c.X;
        row += c.X.rows();
    }
    return X;
}

Eigen::VectorXd StackedDesign::stacked_y() const {
    Eigen::VectorXd y(static_cast<Eigen::Index>(n_students()) * M);
    Eigen::Index row = 0;
    for (const auto& c : classes) {
        y.segment(row, c.y.size()) = c.y;
        row += c.y.size();
    }
    return y;
}

namespace {

struct TermColumns {
    std::vector<const CovariateColumn*> by_outcome;  // nullptr: absent
    std::vector<int> coef;                           // coefficient index per outcome
};

StackedDesign build(const Dataset& d, const ModelSpec& spec, const std::vector<int>& outcome_map, int pv_index) {
    if (pv_index < 1 || pv_index > d.n_pv) {
        throw ValidationError("plausible value index " + std::to_string(pv_index) + " outside [1, " +
                              std::to_string(d.n_pv) + "]");
    }
    const int M = static_cast<int>(outcome_map.size());
    StackedDesign D;
    D.M = M;
    for (int m = 0; m < M; ++m) D.layout.outcomes.push_back(d.outcomes[static_cast<std::size_t>(outcome_map[static_cast<std::size_t>(m)])]);

    // Coefficients are outcome-major: intercept then outcome-specific terms,
    // followed by common terms.
    std::vector<TermColumns> terms(spec.terms.size());
    std::vector<int> intercept(static_cast<std::size_t>(M), -1);
    for (int m = 0; m < M; ++m) {
        const auto sm = static_cast<std::size_t>(m);
        const auto spec_m = static_cast<std::size_t>(
            std::find(spec.outcomes.begin(), spec.outcomes.end(), D.layout.outcomes[sm]) - spec.outcomes.begin());
        if (spec.intercept) {
            intercept[sm] = D.layout.size();
            D.layout.coefficients.push_back({D.layout.outcomes[sm] + ":(intercept)", "(intercept)", m});
        }
        for (std::size_t t = 0; t < spec.terms.size(); ++t) {
            const auto& term = spec.terms[t];
            auto& tc = terms[t];
            tc.by_outcome.resize(static_cast<std::size_t>(M), nullptr);
            tc.coef.resize(static_cast<std::size_t>(M), -1);
            const auto& col = spec_m < term.columns.size() ? term.columns[spec_m] : std::string{};
            if (col.empty()) continue;
            tc.by_outcome[sm] = &d.covariate(col);
            if (!term.common) {
                tc.coef[sm] = D.layout.size();
                D.layout.coefficients.push_back({D.layout.outcomes[sm] + ":" + term.name, term.name, m});
            }
        }
    }
    for (std::size_t t = 0; t < spec.terms.size(); ++t) {
        if (!spec.terms[t].common) continue;
        const int k = D.layout.size();
        D.layout.coefficients.push_back({spec.terms[t].name, spec.terms[t].name, -1});
        for (int m = 0; m < M; ++m) {
            if (terms[t].by_outcome[static_cast<std::size_t>(m)]) terms[t].coef[static_cast<std::size_t>(m)] = k;
        }
    }
    D.p = D.layout.size();
    if (D.p == 0) throw ValidationError("model has no fixed effects");

    std::unordered_map<std::string, std::size_t> class_pos;
    std::vector<std::vector<std::size_t>> rows;
    for (std::size_t i = 0; i < d.n_students(); ++i) {
        auto [it, inserted] = class_pos.emplace(d.class_ids[i], rows.size());
        if (inserted) rows.emplace_back();
        rows[it->second].push_back(i);
    }
    D.classes.resize(rows.size());
    for (const auto& [id, pos] : class_pos) D.classes[pos].class_id = id;

    for (std::size_t j = 0; j < rows.size(); ++j) {
        auto& blk = D.classes[j];
        const auto n = static_cast<int>(rows[j].size());
        blk.n = n;
        blk.school_id = d.school_ids[rows[j].front()];
        blk.y.resize(static_cast<Eigen::Index>(n) * M);
        blk.X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n) * M, D.p);
        for (int i = 0; i < n; ++i) {
            const auto r = rows[j][static_cast<std::size_t>(i)];
            blk.student_ids.push_back(d.student_ids[r]);
            for (int m = 0; m < M; ++m) {
                const auto sm = static_cast<std::size_t>(m);
                const Eigen::Index row = static_cast<Eigen::Index>(i) * M + m;
                blk.y(row) = d.scores[static_cast<std::size_t>(outcome_map[sm])](static_cast<Eigen::Index>(r), pv_index - 1);
                if (intercept[sm] >= 0) blk.X(row, intercept[sm]) = 1.0;
                for (const auto& tc : terms) {
                    const auto* col = tc.by_outcome[sm];
                    if (!col) continue;
                    const double v = col->values[r];
                    if (std::isnan(v)) {
                        throw ValidationError("missing value in '" + col->name + "' for student '" + d.student_ids[r] +
                                              "'; run listwise deletion first");
                    }
                    blk.X(row, tc.coef[sm]) += v;
                }
            }
        }
    }

    std::vector<std::string> zero;
    for (int k = 0; k < D.p; ++k) {
        bool any = false;
        for (const auto& c : D.classes) {
            if ((c.X.col(k).array() != 0.0).any()) {
                any = true;
                break;
            }
        }
        if (!any) zero.push_back(D.layout.coefficients[static_cast<std::size_t>(k)].name);
    }
    if (!zero.empty()) {
        std::string msg = "design columns identically zero:";
        for (const auto& z : zero) msg += " " + z;
        throw RankDeficiencyError(zero, msg);
    }
    return D;
}

}  // namespace

StackedDesign build_design(const Dataset& d, const ModelSpec& spec, int pv_index) {
    std::vector<int> map;
    for (const auto& o : spec.outcomes) map.push_back(d.outcome_index(o));
    return build(d, spec, map, pv_index);
}

StackedDesign build_univariate_design(const Dataset& d, const ModelSpec& spec, int outcome, int pv_index) {
    if (outcome < 0 || outcome >= static_cast<int>(spec.outcomes.size())) {
        throw ValidationError("outcome index out of range");
    }
    return build(d, spec, {d.outcome_index(spec.outcomes[static_cast<std::size_t>(outcome)])}, pv_index);
}

void check_full_rank(const StackedDesign& D) {
    const Eigen::MatrixXd X = D.stacked_X();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    const auto rank = qr.rank();
    if (rank == D.p) return;
    std::vector<std::string> cols;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index k = rank; k < D.p; ++k) cols.push_back(D.layout.coefficients[static_cast<std::size_t>(perm(k))].name);
    std::string msg = "design is rank deficient (rank " + std::to_string(rank) + " of " + std::to_string(D.p) +
                      "); collinear columns:";
    for (const auto& c : cols) msg += " " + c;
    throw RankDeficiencyError(cols, msg);
}

}  // namespace mvmlm
