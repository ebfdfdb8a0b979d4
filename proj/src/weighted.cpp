#include "mvmlm/weighted.hpp"

#include "mvmlm/error.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace mvmlm {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double positive(double w, const std::string& what) {
    if (!std::isfinite(w) || !(w > 0.0)) {
        throw ValidationError("weight for " + what + " must be positive and finite (got " + std::to_string(w) + ")");
    }
    return w;
}

double lookup(const std::unordered_map<std::string, double>& m, const std::string& key, const char* level) {
    auto it = m.find(key);
    if (it == m.end()) throw ValidationError(std::string("no ") + level + " weight for '" + key + "'");
    return positive(it->second, std::string(level) + " '" + key + "'");
}
}  // namespace

std::string to_string(WeightScaling s) { return s == WeightScaling::none ? "none" : "cluster"; }

WeightScaling weight_scaling_from_string(const std::string& s) {
    if (s == "none") return WeightScaling::none;
    if (s == "cluster" || s == "cluster-size") return WeightScaling::cluster_size;
    throw ValidationError("unknown weight scaling '" + s + "'");
}

double WeightSet::class_weight(const std::string& class_id, const std::string& school_id) const {
    return lookup(class_, class_id, "class") * lookup(school, school_id, "school");
}

double WeightSet::overall(const std::string& student_id, const std::string& class_id,
                          const std::string& school_id) const {
    return lookup(student, student_id, "student") * lookup(class_, class_id, "class") * lookup(school, school_id, "school");
}

WeightSet WeightSet::unit(const StackedDesign& D) {
    WeightSet W;
    for (const auto& c : D.classes) {
        W.class_[c.class_id] = 1.0;
        W.school[c.school_id] = 1.0;
        for (const auto& s : c.student_ids) W.student[s] = 1.0;
    }
    return W;
}

WeightSet load_weights(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open weights file '" + path + "'");
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) header.push_back(f);
    }
    auto col = [&](const std::string& name) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return i;
        }
        throw ParseError(1, "weights file lacks column '" + name + "'");
    };
    const auto cs = col("student_id"), cc = col("class_id"), ck = col("school_id");
    const auto ws = col("w_student"), wc = col("w_class"), wk = col("w_school");
    WeightSet W;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string x;
        while (std::getline(ss, x, ',')) f.push_back(x);
        if (f.size() != header.size()) throw ParseError(line_no, "wrong number of fields");
        auto num = [&](std::size_t i) {
            try {
                return std::stod(f[i]);
            } catch (const std::exception&) {
                throw ParseError(line_no, "cannot parse weight '" + f[i] + "'");
            }
        };
        W.student[f[cs]] = num(ws);
        W.class_[f[cc]] = num(wc);
        W.school[f[ck]] = num(wk);
    }
    return W;
}

void save_weights(const std::string& path, const WeightSet& W, const Dataset& d) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    out << "student_id,class_id,school_id,w_student,w_class,w_school\n";
    for (std::size_t i = 0; i < d.n_students(); ++i) {
        out << d.student_ids[i] << ',' << d.class_ids[i] << ',' << d.school_ids[i] << ','
            << format_double(W.student.at(d.student_ids[i])) << ',' << format_double(W.class_.at(d.class_ids[i])) << ','
            << format_double(W.school.at(d.school_ids[i])) << '\n';
    }
}

WeightedProfiledLikelihood::WeightedProfiledLikelihood(const StackedDesign& D, const WeightSet& W) : p_(D.p) {
    if (D.M != 1) throw ValidationError("weighted fitting is univariate (M = 1)");
    const int q = p_ + 1;
    // Weighted OLS start keeps the residual column small.
    Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(p_, p_);
    Eigen::VectorXd xty = Eigen::VectorXd::Zero(p_);
    for (const auto& blk : D.classes) {
        const double wc = W.class_weight(blk.class_id, blk.school_id);
        Eigen::VectorXd w(blk.n);
        for (int i = 0; i < blk.n; ++i) w(i) = lookup(W.student, blk.student_ids[static_cast<std::size_t>(i)], "student");
        if (W.scaling == WeightScaling::cluster_size) w *= static_cast<double>(blk.n) / w.sum();
        class_w_.push_back(wc);
        student_w_.push_back(w);
        xtx += wc * blk.X.transpose() * w.asDiagonal() * blk.X;
        xty += wc * blk.X.transpose() * w.asDiagonal() * blk.y;
    }
    beta_ols_ = xtx.ldlt().solve(xty);
    for (std::size_t j = 0; j < D.classes.size(); ++j) {
        const auto& blk = D.classes[j];
        const auto& w = student_w_[j];
        Eigen::MatrixXd Z(blk.n, q);
        Z.leftCols(p_) = blk.X;
        Z.col(p_) = blk.y - blk.X * beta_ols_;
        ClassMoments cm;
        cm.zwz = Z.transpose() * w.asDiagonal() * Z;
        cm.zw = Z.transpose() * w;
        cm.wsum = w.sum();
        cm.logw = w.array().log().sum();
        cm.n = blk.n;
        moments_.push_back(std::move(cm));
    }
}

WeightedProfiledLikelihood::Point WeightedProfiledLikelihood::evaluate(double a, double b) const {
    if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
        throw NumericalError("variance parameters must be positive", INFINITY);
    }
    const int q = p_ + 1;
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(q, q);
    double logdet = 0.0;
    double n_w = 0.0;
    for (std::size_t j = 0; j < moments_.size(); ++j) {
        const auto& cm = moments_[j];
        const double wc = class_w_[j];
        const double Dj = a + b * cm.wsum;
        const double c = b / (a * Dj);
        Q += wc * (cm.zwz / a - c * cm.zw * cm.zw.transpose());
        logdet += wc * (static_cast<double>(cm.n) * std::log(a) - cm.logw + std::log(Dj) - std::log(a));
        n_w += wc * static_cast<double>(cm.n);
    }
    Q = 0.5 * (Q + Q.transpose());
    Point pt;
    pt.information = Q.topLeftCorner(p_, p_);
    Eigen::LLT<Eigen::MatrixXd> llt(pt.information);
    if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-13)) {
        throw RankDeficiencyError({}, "weighted GLS information matrix is singular");
    }
    const Eigen::VectorXd delta = llt.solve(Q.col(p_).head(p_));
    pt.beta = beta_ols_ + delta;
    const double quad = Q(p_, p_) - Q.col(p_).head(p_).dot(delta);
    pt.logL = -0.5 * (n_w * kLog2Pi + logdet + quad);

    Eigen::VectorXd coef(q);
    coef.head(p_) = -delta;
    coef(p_) = 1.0;
    double ga = 0.0, gb = 0.0;
    for (std::size_t j = 0; j < moments_.size(); ++j) {
        const auto& cm = moments_[j];
        const double wc = class_w_[j];
        const double Dj = a + b * cm.wsum;
        const double Qj = coef.dot(cm.zwz * coef);
        const double Pj = coef.dot(cm.zw);
        const double n = static_cast<double>(cm.n);
        ga += wc * -0.5 * ((n - 1.0) / a + 1.0 / Dj - Qj / (a * a) +
                           b * Pj * Pj * (2.0 * a + b * cm.wsum) / (a * a * Dj * Dj));
        gb += wc * -0.5 * (cm.wsum / Dj - Pj * Pj / (Dj * Dj));
    }
    pt.natural_gradient << ga, gb;
    return pt;
}

double WeightedProfiledLikelihood::value(const Eigen::VectorXd& theta) const {
    return evaluate(std::exp(2.0 * theta(0)), std::exp(2.0 * theta(1))).logL;
}

Eigen::VectorXd WeightedProfiledLikelihood::gradient(const Eigen::VectorXd& theta, GradientMethod method) const {
    Eigen::VectorXd g(2);
    if (method == GradientMethod::analytic) {
        const double a = std::exp(2.0 * theta(0)), b = std::exp(2.0 * theta(1));
        const auto pt = evaluate(a, b);
        g << 2.0 * a * pt.natural_gradient(0), 2.0 * b * pt.natural_gradient(1);
    } else {
        Eigen::VectorXd t = theta;
        for (Eigen::Index k = 0; k < 2; ++k) {
            const double h = kFdStep * (1.0 + std::abs(theta(k)));
            t(k) = theta(k) + h;
            const double up = value(t);
            t(k) = theta(k) - h;
            const double down = value(t);
            t(k) = theta(k);
            g(k) = (up - down) / (2.0 * h);
        }
    }
    for (Eigen::Index k = 0; k < 2; ++k) {
        if (!std::isfinite(g(k))) throw NumericalError("non-finite gradient in coordinate " + std::to_string(k), INFINITY);
    }
    return g;
}

FitResult fit_weighted_univariate(const StackedDesign& D, const WeightSet& W, const FitOptions& opts) {
    if (D.M != 1) throw ValidationError("weighted fitting is univariate (M = 1)");
    if (D.n_classes() < 2) throw ValidationError("fit needs at least two classes");
    check_full_rank(D);
    const WeightedProfiledLikelihood wl(D, W);
    const StandardizedDesign S(D);
    const WeightedProfiledLikelihood wls(S.design, W);
    const double jacobian = S.log_jacobian(wls.class_weights());
    // Raw 1/pi weights put the objective on the population scale, where
    // differencing noise rivals tol_grad. Optimize per unit of mean class weight.
    const auto& cw = wls.class_weights();
    const double wbar = std::accumulate(cw.begin(), cw.end(), 0.0) / static_cast<double>(cw.size());
    auto f = [&](const Eigen::VectorXd& t) { return wls.value(t) / wbar; };
    auto g = [&](const Eigen::VectorXd& t) { return Eigen::VectorXd(wls.gradient(t, opts.gradient) / wbar); };
    auto opt = maximize_bfgs(f, g, starting_values(S.design).to_theta(), opts.optimizer);
    opt.value *= wbar;
    opt.initial_value *= wbar;
    for (auto& v : opt.trace) v *= wbar;

    FitResult F;
    F.layout = D.layout;
    F.theta = S.unscale_theta(opt.x);
    const double a = std::exp(2.0 * F.theta(0)), b = std::exp(2.0 * F.theta(1));
    F.sigma = Eigen::MatrixXd::Constant(1, 1, a);
    F.tau = Eigen::MatrixXd::Constant(1, 1, b);
    const auto pt = wl.evaluate(a, b);
    F.beta = pt.beta;
    F.cov_model = pt.information.ldlt().solve(Eigen::MatrixXd::Identity(D.p, D.p));
    F.cov_model = 0.5 * (F.cov_model + F.cov_model.transpose());
    F.logL = opt.value - jacobian;
    F.logL_initial = opt.initial_value - jacobian;
    F.trace = opt.trace;
    for (auto& v : F.trace) v -= jacobian;
    F.convergence.status = opt.status;
    F.convergence.iterations = opt.iterations;
    F.convergence.evaluations = opt.evaluations;
    F.convergence.grad_norm = opt.gradient.lpNorm<Eigen::Infinity>();
    F.convergence.near_singular_tau = b < 1e-8 * (a + b);
    F.n_students = D.n_students();
    F.n_classes = D.n_classes();
    std::set<std::string> schools;
    for (const auto& c : D.classes) {
        F.class_ids.push_back(c.class_id);
        schools.insert(c.school_id);
    }
    F.n_schools = static_cast<int>(schools.size());

    // Per-class weighted scores for the sandwich.
    std::map<std::string, Eigen::VectorXd> beta_sums, nat_sums;
    for (std::size_t j = 0; j < D.classes.size(); ++j) {
        const auto& blk = D.classes[j];
        const auto& w = wl.student_weights()[j];
        const double wc = wl.class_weights()[j];
        const double W_j = w.sum();
        const double Dj = a + b * W_j;
        const Eigen::VectorXd e = blk.y - blk.X * F.beta;
        // V^{-1} e = D e / a - b D 1 (1' D e) / (a Dj)
        const double P = w.dot(e);
        const Eigen::VectorXd vie = (w.array() * e.array()).matrix() / a - (b * P / (a * Dj)) * w;
        const Eigen::VectorXd sb = wc * blk.X.transpose() * vie;
        const double Qj = (w.array() * e.array().square()).sum();
        const double n = static_cast<double>(blk.n);
        Eigen::Vector2d sn;
        sn << wc * -0.5 * ((n - 1.0) / a + 1.0 / Dj - Qj / (a * a) + b * P * P * (2.0 * a + b * W_j) / (a * a * Dj * Dj)),
            wc * -0.5 * (W_j / Dj - P * P / (Dj * Dj));
        auto [bi, bnew] = beta_sums.emplace(blk.school_id, Eigen::VectorXd::Zero(D.p));
        bi->second += sb;
        auto [ni, nnew] = nat_sums.emplace(blk.school_id, Eigen::VectorXd::Zero(2));
        ni->second += sn;
    }
    const double K = static_cast<double>(beta_sums.size());
    const double corr = (opts.cluster_correction && K > 1) ? K / (K - 1.0) : 1.0;
    if (K >= 2) {
        Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(D.p, D.p);
        for (const auto& [k, s] : beta_sums) meat += s * s.transpose();
        F.cov_robust = corr * F.cov_model * meat * F.cov_model;
    } else {
        F.cov_robust = Eigen::MatrixXd::Constant(D.p, D.p, NAN);
    }

    const auto names = varcomp_names(F.outcomes());
    F.varcomps = {{names[0], a, NAN, NAN}, {names[1], b, NAN, NAN}};
    try {
        Eigen::Vector2d x(a, b), steps(1e-4 * a, 1e-4 * b);
        auto grad = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return wl.evaluate(v(0), v(1)).natural_gradient; };
        const Eigen::MatrixXd H = fd_hessian(grad, x, steps);
        Eigen::LDLT<Eigen::MatrixXd> ldlt(-H);
        if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
            const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(2, 2));
            Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(2, 2);
            for (const auto& [k, s] : nat_sums) meat += s * s.transpose();
            const Eigen::MatrixXd rob = corr * cov * meat * cov;
            for (int i = 0; i < 2; ++i) {
                F.varcomps[static_cast<std::size_t>(i)].se_model = std::sqrt(cov(i, i));
                F.varcomps[static_cast<std::size_t>(i)].se_robust = K >= 2 ? std::sqrt(rob(i, i)) : NAN;
            }
        }
    } catch (const Error&) {
    }
    return F;
}

}  // namespace mvmlm
