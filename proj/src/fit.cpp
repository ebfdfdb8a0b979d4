#include "mvmlm/fit.hpp"

#include "mvmlm/error.hpp"

#include <cmath>
#include <map>
#include <set>

namespace mvmlm {

namespace {

Eigen::MatrixXd unvech(const Eigen::Ref<const Eigen::VectorXd>& v, int M) {
    Eigen::MatrixXd S(M, M);
    Eigen::Index k = 0;
    for (int r = 0; r < M; ++r) {
        for (int c = 0; c <= r; ++c) {
            S(r, c) = v(k);
            S(c, r) = v(k);
            ++k;
        }
    }
    return S;
}

Eigen::VectorXd vech_scores(const Eigen::MatrixXd& G) {
    const auto M = G.rows();
    Eigen::VectorXd out(M * (M + 1) / 2);
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < M; ++r) {
        for (Eigen::Index c = 0; c <= r; ++c) out(k++) = (r == c) ? G(r, c) : 2.0 * G(r, c);
    }
    return out;
}

Eigen::MatrixXd cluster_meat(const Eigen::MatrixXd& scores, const std::vector<std::string>& class_ids,
                             const std::unordered_map<std::string, std::string>& cluster, int* n_clusters) {
    std::map<std::string, Eigen::VectorXd> sums;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
        auto it = cluster.find(class_ids[static_cast<std::size_t>(j)]);
        if (it == cluster.end()) {
            throw ValidationError("class '" + class_ids[static_cast<std::size_t>(j)] + "' has no cluster assignment");
        }
        auto [s, inserted] = sums.emplace(it->second, Eigen::VectorXd::Zero(scores.rows()));
        s->second += scores.col(j);
    }
    *n_clusters = static_cast<int>(sums.size());
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(scores.rows(), scores.rows());
    for (const auto& [k, s] : sums) meat.noalias() += s * s.transpose();
    return meat;
}

}  // namespace

std::vector<std::string> varcomp_names(const std::vector<std::string>& outcomes) {
    std::vector<std::string> names;
    const auto M = outcomes.size();
    for (const char* which : {"sigma", "tau"}) {
        for (std::size_t r = 0; r < M; ++r) {
            for (std::size_t c = 0; c <= r; ++c) {
                names.push_back(std::string(which) + "(" + (r == c ? outcomes[r] : outcomes[c] + "," + outcomes[r]) + ")");
            }
        }
    }
    return names;
}

CovarianceParams starting_values(const StackedDesign& D) {
    const int M = D.M;
    const Eigen::MatrixXd X = D.stacked_X();
    const Eigen::VectorXd y = D.stacked_y();
    const Eigen::VectorXd beta = Eigen::ColPivHouseholderQR<Eigen::MatrixXd>(X).solve(y);

    Eigen::MatrixXd within = Eigen::MatrixXd::Zero(M, M);
    Eigen::MatrixXd means(D.n_classes(), M);
    int N = 0;
    for (int j = 0; j < D.n_classes(); ++j) {
        const auto& blk = D.classes[static_cast<std::size_t>(j)];
        const Eigen::VectorXd e = blk.y - blk.X * beta;
        Eigen::MatrixXd E(blk.n, M);
        for (int i = 0; i < blk.n; ++i) E.row(i) = e.segment(static_cast<Eigen::Index>(i) * M, M).transpose();
        const Eigen::RowVectorXd mean = E.colwise().mean();
        means.row(j) = mean;
        const Eigen::MatrixXd dev = E.rowwise() - mean;
        within += dev.transpose() * dev;
        N += blk.n;
    }
    const int J = D.n_classes();
    Eigen::MatrixXd sigma0;
    if (N - J > 0) {
        sigma0 = within / static_cast<double>(N - J);
    } else {
        const Eigen::MatrixXd centered = means.rowwise() - means.colwise().mean();
        sigma0 = 0.5 * centered.transpose() * centered / std::max(1.0, static_cast<double>(J - 1));
    }
    const double scale = std::max(sigma0.diagonal().maxCoeff(), 1e-12);
    sigma0 = project_pd(sigma0, 1e-6 * scale);

    const Eigen::MatrixXd centered = means.rowwise() - means.colwise().mean();
    const Eigen::MatrixXd between = centered.transpose() * centered / std::max(1.0, static_cast<double>(J - 1));
    const double nbar = static_cast<double>(N) / static_cast<double>(J);
    const double floor = 0.1 * sigma0.diagonal().minCoeff() / nbar;
    return {sigma0, project_pd(between, floor)};
}

std::unordered_map<std::string, std::string> school_clusters(const StackedDesign& D) {
    std::unordered_map<std::string, std::string> m;
    for (const auto& c : D.classes) m[c.class_id] = c.school_id;
    return m;
}

ClassScores class_scores(const CovarianceParams& c, const Eigen::VectorXd& beta, const StackedDesign& D) {
    const int M = D.M;
    const int h = M * (M + 1) / 2;
    Eigen::LLT<Eigen::MatrixXd> llt(c.sigma);
    const Eigen::MatrixXd Si = llt.solve(Eigen::MatrixXd::Identity(M, M));
    ClassScores out{Eigen::MatrixXd(D.p, D.n_classes()), Eigen::MatrixXd(2 * h, D.n_classes())};
    std::map<int, MarginalBlocks> cache;
    for (int j = 0; j < D.n_classes(); ++j) {
        const auto& blk = D.classes[static_cast<std::size_t>(j)];
        auto it = cache.find(blk.n);
        if (it == cache.end()) it = cache.emplace(blk.n, marginal_blocks(c, blk.n)).first;
        const auto& A = it->second.A;
        const double n = static_cast<double>(blk.n);
        const Eigen::VectorXd e = blk.y - blk.X * beta;
        Eigen::MatrixXd Xbar = Eigen::MatrixXd::Zero(M, D.p);
        Eigen::VectorXd ebar = Eigen::VectorXd::Zero(M);
        for (int i = 0; i < blk.n; ++i) {
            Xbar += blk.X.middleRows(static_cast<Eigen::Index>(i) * M, M);
            ebar += e.segment(static_cast<Eigen::Index>(i) * M, M);
        }
        Xbar /= n;
        ebar /= n;
        Eigen::VectorXd sb = n * Xbar.transpose() * (A * ebar);
        Eigen::MatrixXd S = Eigen::MatrixXd::Zero(M, M);
        for (int i = 0; i < blk.n; ++i) {
            const Eigen::VectorXd de = e.segment(static_cast<Eigen::Index>(i) * M, M) - ebar;
            sb += (blk.X.middleRows(static_cast<Eigen::Index>(i) * M, M) - Xbar).transpose() * (Si * de);
            S += de * de.transpose();
        }
        out.beta.col(j) = sb;
        const Eigen::VectorXd Ae = A * ebar;
        const Eigen::MatrixXd AeeA = Ae * Ae.transpose();
        const Eigen::MatrixXd gs = -0.5 * (A + (n - 1.0) * Si - Si * S * Si - n * AeeA);
        const Eigen::MatrixXd gt = -0.5 * (n * A - n * n * AeeA);
        out.natural.col(j).head(h) = vech_scores(gs);
        out.natural.col(j).tail(h) = vech_scores(gt);
    }
    return out;
}

Eigen::MatrixXd fd_hessian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& grad,
                           const Eigen::VectorXd& x, const Eigen::VectorXd& steps) {
    const auto n = x.size();
    Eigen::MatrixXd H(n, n);
    Eigen::VectorXd t = x;
    for (Eigen::Index k = 0; k < n; ++k) {
        t(k) = x(k) + steps(k);
        const Eigen::VectorXd up = grad(t);
        t(k) = x(k) - steps(k);
        const Eigen::VectorXd down = grad(t);
        t(k) = x(k);
        H.col(k) = (up - down) / (2.0 * steps(k));
    }
    return 0.5 * (H + H.transpose());
}

Eigen::MatrixXd robust_cluster_cov(const FitResult& F, const StackedDesign& D,
                                   const std::unordered_map<std::string, std::string>& cluster,
                                   bool small_sample_correction) {
    const auto scores = class_scores(F.params(), F.beta, D);
    std::vector<std::string> ids;
    for (const auto& c : D.classes) ids.push_back(c.class_id);
    int K = 0;
    Eigen::MatrixXd meat = cluster_meat(scores.beta, ids, cluster, &K);
    if (K < 2) throw ValidationError("robust covariance needs at least two clusters");
    if (small_sample_correction) meat *= static_cast<double>(K) / static_cast<double>(K - 1);
    Eigen::MatrixXd V = F.cov_model * meat * F.cov_model;
    return 0.5 * (V + V.transpose());
}

namespace {

void fill_varcomps(FitResult& F, const ProfiledLikelihood& pl, const StackedDesign& D, bool correction) {
    const int M = D.M;
    const int h = M * (M + 1) / 2;
    Eigen::VectorXd x(2 * h);
    x.head(h) = vech(F.sigma);
    x.tail(h) = vech(F.tau);
    Eigen::VectorXd steps(2 * h);
    Eigen::Index k = 0;
    for (const auto* S : {&F.sigma, &F.tau}) {
        for (int r = 0; r < M; ++r) {
            for (int c = 0; c <= r; ++c) steps(k++) = 1e-4 * std::sqrt((*S)(r, r) * (*S)(c, c));
        }
    }
    const auto names = varcomp_names(F.outcomes());
    F.varcomps.clear();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        F.varcomps.push_back({names[static_cast<std::size_t>(i)], x(i), NAN, NAN});
    }
    try {
        auto grad = [&](const Eigen::VectorXd& v) {
            return pl.natural_gradient({unvech(v.head(h), M), unvech(v.tail(h), M)});
        };
        const Eigen::MatrixXd H = fd_hessian(grad, x, steps);
        Eigen::LDLT<Eigen::MatrixXd> ldlt(-H);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(ldlt.rcond() > 1e-14)) return;
        const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(2 * h, 2 * h));
        const auto scores = class_scores(F.params(), F.beta, D);
        int K = 0;
        Eigen::MatrixXd meat = cluster_meat(scores.natural, F.class_ids, school_clusters(D), &K);
        if (correction && K > 1) meat *= static_cast<double>(K) / static_cast<double>(K - 1);
        const Eigen::MatrixXd rob = cov * meat * cov;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            auto& vc = F.varcomps[static_cast<std::size_t>(i)];
            vc.se_model = cov(i, i) > 0 ? std::sqrt(cov(i, i)) : NAN;
            vc.se_robust = (K > 1 && rob(i, i) > 0) ? std::sqrt(rob(i, i)) : NAN;
        }
    } catch (const Error&) {
        // perturbed point left the PD cone; SEs stay NaN
    }
}

}  // namespace

StandardizedDesign::StandardizedDesign(const StackedDesign& D)
    : design(D), scale(starting_values(D).sigma.diagonal().cwiseSqrt()) {
    for (auto& b : design.classes) {
        for (Eigen::Index r = 0; r < b.y.size(); ++r) b.y(r) /= scale(r % D.M);
    }
}

Eigen::VectorXd StandardizedDesign::unscale_theta(const Eigen::VectorXd& theta) const {
    // L = diag(scale) L_std, row by row
    Eigen::VectorXd out = theta;
    const Eigen::Index half = theta.size() / 2;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
        Eigen::Index i = k % half, r = 0;
        while (i > r) i -= ++r;
        out(k) = (i == r) ? theta(k) + std::log(scale(r)) : theta(k) * scale(r);
    }
    return out;
}

double StandardizedDesign::log_jacobian(const std::vector<double>& class_weights) const {
    const double per_student = scale.array().log().sum();
    double total = 0.0;
    for (std::size_t j = 0; j < design.classes.size(); ++j) {
        const double w = class_weights.empty() ? 1.0 : class_weights[j];
        total += w * design.classes[j].n * per_student;
    }
    return total;
}

FitResult fit_ml(const StackedDesign& D, const FitOptions& opts) {
    if (D.n_classes() < 2) throw ValidationError("fit needs at least two classes");
    check_full_rank(D);
    const ProfiledLikelihood pl(D);

    const StandardizedDesign S(D);
    const ProfiledLikelihood pls(S.design);
    const double jacobian = S.log_jacobian();

    auto f = [&](const Eigen::VectorXd& t) { return pls.value(t); };
    auto g = [&](const Eigen::VectorXd& t) { return pls.gradient(t, opts.gradient); };
    const auto opt = maximize_bfgs(f, g, starting_values(S.design).to_theta(), opts.optimizer);

    FitResult F;
    F.layout = D.layout;
    const auto std_params = CovarianceParams::from_theta(opt.x, D.M);
    const auto& s = S.scale;
    const CovarianceParams params{s.asDiagonal() * std_params.sigma * s.asDiagonal(),
                                  s.asDiagonal() * std_params.tau * s.asDiagonal()};
    F.theta = S.unscale_theta(opt.x);
    F.sigma = params.sigma;
    F.tau = params.tau;
    const auto gls = profile_beta_gls(params, D);
    F.beta = gls.beta;
    F.cov_model = gls.cov;
    F.logL = opt.value - jacobian;
    F.logL_initial = opt.initial_value - jacobian;
    F.trace = opt.trace;
    for (auto& v : F.trace) v -= jacobian;
    F.convergence.status = opt.status;
    F.convergence.iterations = opt.iterations;
    F.convergence.evaluations = opt.evaluations;
    F.convergence.grad_norm = opt.gradient.lpNorm<Eigen::Infinity>();
    {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(F.tau);
        F.convergence.near_singular_tau = es.eigenvalues().minCoeff() < 1e-8 * F.tau.trace();
    }
    F.n_students = D.n_students();
    F.n_classes = D.n_classes();
    std::set<std::string> schools;
    for (const auto& c : D.classes) {
        F.class_ids.push_back(c.class_id);
        schools.insert(c.school_id);
    }
    F.n_schools = static_cast<int>(schools.size());
    if (F.n_schools >= 2) {
        F.cov_robust = robust_cluster_cov(F, D, school_clusters(D), opts.cluster_correction);
    } else {
        F.cov_robust = Eigen::MatrixXd::Constant(D.p, D.p, NAN);
    }
    fill_varcomps(F, pl, D, opts.cluster_correction);
    return F;
}

Eigen::MatrixXd correlation(const Eigen::MatrixXd& S) {
    const Eigen::VectorXd sd = S.diagonal().cwiseSqrt();
    Eigen::MatrixXd R = S.array() / (sd * sd.transpose()).array();
    R.diagonal().setOnes();
    return R;
}

DecompositionReport decompose(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& tau,
                              std::vector<std::string> outcomes) {
    // T may sit on the boundary; correlations of a zero variance come out NaN
    Eigen::LLT<Eigen::MatrixXd> a(sigma);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> b(0.5 * (tau + tau.transpose()), Eigen::EigenvaluesOnly);
    if (a.info() != Eigen::Success || b.eigenvalues().minCoeff() < -1e-10 * std::max(1.0, tau.trace())) {
        throw ValidationError("decomposition needs positive-definite Sigma and positive semidefinite T");
    }
    DecompositionReport r;
    r.outcomes = std::move(outcomes);
    const Eigen::MatrixXd total = sigma + tau;
    r.within_corr = correlation(sigma);
    r.between_corr = correlation(tau);
    r.total_corr = correlation(total);
    r.pct_between = 100.0 * tau.array() / total.array();
    r.icc = r.pct_between.diagonal();
    return r;
}

DecompositionReport decompose(const FitResult& F) { return decompose(F.sigma, F.tau, F.outcomes()); }

VarianceExplained variance_explained(const FitResult& null_fit, const FitResult& full_fit) {
    if (null_fit.outcomes() != full_fit.outcomes()) throw ValidationError("fits are on different outcomes");
    VarianceExplained v;
    v.outcomes = full_fit.outcomes();
    const Eigen::ArrayXd s0 = null_fit.sigma.diagonal(), s1 = full_fit.sigma.diagonal();
    const Eigen::ArrayXd t0 = null_fit.tau.diagonal(), t1 = full_fit.tau.diagonal();
    v.within_reduction = 100.0 * (1.0 - s1 / s0);
    v.between_reduction = 100.0 * (1.0 - t1 / t0);
    v.residual_icc = 100.0 * t1 / (s1 + t1);
    return v;
}

}  // namespace mvmlm
