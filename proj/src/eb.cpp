#include "mvmlm/eb.hpp"

#include "mvmlm/error.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace mvmlm {

int EBResiduals::outcome_index(const std::string& name) const {
    for (std::size_t m = 0; m < outcomes.size(); ++m) {
        if (outcomes[m] == name) return static_cast<int>(m);
    }
    throw ValidationError("unknown outcome '" + name + "'");
}

EBResiduals eb_predict(const FitResult& F, const StackedDesign& D) {
    const int M = D.M;
    if (F.sigma.rows() != M || F.beta.size() != D.p) throw ValidationError("fit does not match the design");
    const std::unordered_set<std::string> fitted(F.class_ids.begin(), F.class_ids.end());
    EBResiduals E;
    E.outcomes = F.outcomes();
    E.tau = F.tau;
    const CovarianceParams c = F.params();
    for (const auto& blk : D.classes) {
        if (!fitted.count(blk.class_id)) throw ValidationError("class '" + blk.class_id + "' is not part of the fit");
        const Eigen::VectorXd e = blk.y - blk.X * F.beta;
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(M);
        for (int i = 0; i < blk.n; ++i) mean += e.segment(i * M, M);
        mean /= static_cast<double>(blk.n);
        const auto mb = marginal_blocks(c, blk.n);
        const Eigen::MatrixXd TA = F.tau * mb.A;
        EBClass k;
        k.class_id = blk.class_id;
        k.school_id = blk.school_id;
        k.n = blk.n;
        k.raw_mean = mean;
        k.u_hat = static_cast<double>(blk.n) * TA * mean;
        k.diagnostic = static_cast<double>(blk.n) * TA * F.tau;
        k.diagnostic = 0.5 * (k.diagnostic + k.diagnostic.transpose());
        k.comparative = F.tau - k.diagnostic;
        E.classes.push_back(std::move(k));
    }
    return E;
}

EBResiduals eb_predict_mi(const MIFitResult& mi, const std::vector<StackedDesign>& designs) {
    if (designs.size() != mi.fits.size()) throw ValidationError("need one design per imputation");
    std::vector<EBResiduals> parts;
    for (auto l : mi.used_indices()) parts.push_back(eb_predict(mi.fits[l], designs[l]));
    const double m = static_cast<double>(parts.size());
    EBResiduals E = parts.front();
    E.tau = mi.tau;
    for (std::size_t j = 0; j < E.classes.size(); ++j) {
        Eigen::VectorXd u = Eigen::VectorXd::Zero(E.classes[j].u_hat.size());
        Eigen::VectorXd raw = u;
        Eigen::MatrixXd W = Eigen::MatrixXd::Zero(u.size(), u.size());
        for (const auto& p : parts) {
            if (p.classes[j].class_id != E.classes[j].class_id) throw ValidationError("imputations differ in classes");
            u += p.classes[j].u_hat;
            raw += p.classes[j].raw_mean;
            W += p.classes[j].comparative;
        }
        u /= m;
        raw /= m;
        W /= m;
        Eigen::MatrixXd B = Eigen::MatrixXd::Zero(u.size(), u.size());
        if (parts.size() > 1) {
            for (const auto& p : parts) {
                const Eigen::VectorXd d = p.classes[j].u_hat - u;
                B += d * d.transpose();
            }
            B /= (m - 1.0);
        }
        auto& k = E.classes[j];
        k.u_hat = u;
        k.raw_mean = raw;
        k.comparative = W + (1.0 + 1.0 / m) * B;
        k.diagnostic = E.tau - k.comparative;
    }
    return E;
}

std::string to_string(Label l) {
    switch (l) {
        case Label::good: return "good";
        case Label::poor: return "poor";
        case Label::ns: return "ns";
    }
    return "ns";
}

double normal_critical(double level) {
    if (!(level > 0.0 && level < 1.0)) throw ValidationError("confidence level must lie in (0, 1)");
    return boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 + level / 2.0);
}

namespace {

void check_outcome(const EBResiduals& E, int outcome) {
    if (outcome < 0 || outcome >= static_cast<int>(E.outcomes.size())) {
        throw ValidationError("outcome index " + std::to_string(outcome) + " out of range");
    }
}

double comparative_se(const EBClass& k, int m) { return std::sqrt(std::max(k.comparative(m, m), 0.0)); }

Label label_of(double u, double se, double z) {
    if (u - z * se > 0.0) return Label::good;
    if (u + z * se < 0.0) return Label::poor;
    return Label::ns;
}

}  // namespace

std::vector<Label> classify(const EBResiduals& E, int outcome, double level) {
    check_outcome(E, outcome);
    const double z = normal_critical(level);
    std::vector<Label> out;
    out.reserve(E.classes.size());
    for (const auto& k : E.classes) out.push_back(label_of(k.u_hat(outcome), comparative_se(k, outcome), z));
    return out;
}

std::vector<CaterpillarRow> caterpillar_data(const EBResiduals& E, int outcome, double level) {
    check_outcome(E, outcome);
    const double z = normal_critical(level);
    std::vector<std::size_t> order(E.classes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ua = E.classes[a].u_hat(outcome), ub = E.classes[b].u_hat(outcome);
        if (ua != ub) return ua < ub;
        return E.classes[a].class_id < E.classes[b].class_id;
    });
    std::vector<CaterpillarRow> rows;
    int rank = 0;
    for (auto j : order) {
        const auto& k = E.classes[j];
        const double u = k.u_hat(outcome);
        const double se = comparative_se(k, outcome);
        rows.push_back({++rank, k.class_id, u, u - z * se, u + z * se, label_of(u, se, z)});
    }
    return rows;
}

std::vector<QQRow> qq_data(const EBResiduals& E, int outcome) {
    check_outcome(E, outcome);
    if (E.classes.size() < 3) throw ValidationError("a normal probability plot needs at least three classes");
    std::vector<std::pair<double, std::string>> z;
    for (const auto& k : E.classes) {
        const double v = k.diagnostic(outcome, outcome);
        if (!(v > 0.0)) {
            throw NumericalError("zero diagnostic standard error for class '" + k.class_id + "' (between variance of '" +
                                     E.outcomes[static_cast<std::size_t>(outcome)] + "' is degenerate)",
                                 INFINITY);
        }
        z.emplace_back(k.u_hat(outcome) / std::sqrt(v), k.class_id);
    }
    std::sort(z.begin(), z.end());
    const boost::math::normal_distribution<double> N01;
    const double J = static_cast<double>(z.size());
    std::vector<QQRow> rows;
    for (std::size_t r = 0; r < z.size(); ++r) {
        QQRow q;
        q.rank = static_cast<int>(r) + 1;
        q.class_id = z[r].second;
        q.theoretical = boost::math::quantile(N01, (static_cast<double>(q.rank) - 0.5) / J);
        q.standardized = z[r].first;
        q.outlier = std::abs(q.standardized) > 3.0;
        rows.push_back(std::move(q));
    }
    return rows;
}

std::vector<AreaSummary> territorial_summary(const EBResiduals& E, int outcome,
                                             const std::map<std::string, std::string>& class_area, double level) {
    const auto labels = classify(E, outcome, level);
    std::map<std::string, AreaSummary> by_area;
    AreaSummary overall;
    overall.area = "overall";
    for (std::size_t j = 0; j < E.classes.size(); ++j) {
        auto it = class_area.find(E.classes[j].class_id);
        if (it == class_area.end()) throw ValidationError("class '" + E.classes[j].class_id + "' has no area");
        auto& a = by_area[it->second];
        a.area = it->second;
        for (auto* s : {&a, &overall}) {
            ++s->n_classes;
            s->n_good += labels[j] == Label::good;
            s->n_poor += labels[j] == Label::poor;
        }
    }
    std::vector<AreaSummary> out;
    for (auto& [name, a] : by_area) out.push_back(a);
    out.push_back(overall);
    for (auto& s : out) {
        if (s.n_classes > 0) {
            s.prop_good = static_cast<double>(s.n_good) / s.n_classes;
            s.prop_poor = static_cast<double>(s.n_poor) / s.n_classes;
        }
    }
    return out;
}

}  // namespace mvmlm
