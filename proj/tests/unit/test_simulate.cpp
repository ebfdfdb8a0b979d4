#include "mvmlm/error.hpp"
#include "mvmlm/fit.hpp"
#include "mvmlm/rng.hpp"
#include "mvmlm/sampling.hpp"
#include "mvmlm/simulate.hpp"
#include "mvmlm/transforms.hpp"

#include "../support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

using namespace mvmlm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

SimConfig sample_scale(int per_area, std::uint64_t seed) {
    auto c = SimConfig::study_defaults();
    c.classes_per_area = std::vector<int>(c.areas.size(), per_area);
    c.seed = seed;
    return c;
}

SimConfig frame_config(int schools_per_stratum, std::uint64_t seed) {
    auto c = SimConfig::study_defaults();
    c.frame.schools_per_stratum = schools_per_stratum;
    c.frame.min_classes = 1;
    c.frame.max_classes = 4;
    c.seed = seed;
    return c;
}

std::string emitted(const Dataset& d) {
    std::ostringstream os;
    emit_dataset(os, d);
    return os.str();
}

MatrixXd sample_cov(const std::vector<VectorXd>& v) {
    const auto M = v.front().size();
    VectorXd mean = VectorXd::Zero(M);
    for (const auto& x : v) mean += x;
    mean /= static_cast<double>(v.size());
    MatrixXd S = MatrixXd::Zero(M, M);
    for (const auto& x : v) S += (x - mean) * (x - mean).transpose();
    return S / static_cast<double>(v.size() - 1);
}

}  // namespace

TEST_CASE("simulation is a pure function of the config") {
    const auto c = sample_scale(6, 81);
    const auto a = simulate_population(c);
    const auto b = simulate_population(c);
    CHECK(emitted(a.data) == emitted(b.data));
    CHECK(emitted(a.population.truth) == emitted(b.population.truth));
    auto c2 = c;
    c2.seed = 82;
    CHECK(emitted(simulate_population(c2).data) != emitted(a.data));
}

TEST_CASE("unit draws come from their own streams") {
    const auto c = sample_scale(6, 83);
    const auto base = simulate_frame(c);
    // a different Sigma leaves every class effect untouched
    auto c2 = c;
    c2.sigma *= 1.5;
    const auto other = simulate_frame(c2);
    REQUIRE(base.classes.size() == other.classes.size());
    for (std::size_t j = 0; j < base.classes.size(); ++j) CHECK(base.classes[j].u == other.classes[j].u);
    // the first plausible values do not depend on how many are drawn
    const auto two = draw_plausible_values(base, 2, 25.0, 9);
    const auto five = draw_plausible_values(base, 5, 25.0, 9);
    for (int m = 0; m < 3; ++m) {
        CHECK(two.scores[static_cast<std::size_t>(m)].col(0) == five.scores[static_cast<std::size_t>(m)].col(0));
        CHECK(two.scores[static_cast<std::size_t>(m)].col(1) == five.scores[static_cast<std::size_t>(m)].col(1));
    }
}

TEST_CASE("class effects have covariance T") {
    // one population of 2000 classes estimates each element with an SE near
    // 3%; ten of them pin down the bias
    MatrixXd mean_ratio = MatrixXd::Zero(3, 3);
    for (std::uint64_t seed = 84; seed < 94; ++seed) {
        const auto c = sample_scale(400, seed);
        const auto pop = simulate_frame(c);
        REQUIRE(pop.classes.size() == 2000);
        std::vector<VectorXd> u;
        for (const auto& fc : pop.classes) u.push_back(fc.u);
        const MatrixXd ratio = sample_cov(u).cwiseQuotient(c.tau);
        CHECK((ratio.array() - 1.0).abs().maxCoeff() < 0.10);
        mean_ratio += ratio / 10.0;
    }
    INFO(mean_ratio);
    CHECK((mean_ratio.array() - 1.0).abs().maxCoeff() < 0.02);
}

TEST_CASE("without class effects class means vary by Sigma / n only") {
    auto c = sample_scale(200, 85);
    c.coefficients.clear();
    c.sigma = MatrixXd::Identity(3, 3);
    c.tau = MatrixXd::Zero(3, 3);
    c.sd_meas = 0.0;
    const auto pop = simulate_frame(c);
    std::map<std::string, std::pair<VectorXd, int>> sums;
    for (std::size_t i = 0; i < pop.truth.n_students(); ++i) {
        auto& s = sums.try_emplace(pop.truth.class_ids[i], VectorXd::Zero(3), 0).first->second;
        for (int m = 0; m < 3; ++m) s.first(m) += pop.truth.scores[static_cast<std::size_t>(m)](static_cast<Eigen::Index>(i), 0);
        ++s.second;
    }
    std::vector<VectorXd> dev;
    double inv_n = 0.0;
    for (const auto& [id, s] : sums) {
        // scaled by sqrt(n) so every class mean has covariance Sigma
        VectorXd mean = s.first / s.second;
        mean -= Eigen::Map<const VectorXd>(c.intercept.data(), 3);
        dev.push_back(std::sqrt(static_cast<double>(s.second)) * mean);
        inv_n += 1.0 / s.second;
    }
    const MatrixXd S = sample_cov(dev);
    CHECK((S - MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 0.15);
    for (const auto& fc : pop.classes) CHECK(fc.u.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("plausible values") {
    auto c = sample_scale(50, 86);
    const auto pop = simulate_frame(c);

    SUBCASE("no measurement error returns the latent scores") {
        const auto d = draw_plausible_values(pop, 4, 0.0, 3);
        for (int m = 0; m < 3; ++m) {
            for (int l = 0; l < 4; ++l) {
                CHECK(d.scores[static_cast<std::size_t>(m)].col(l) == pop.truth.scores[static_cast<std::size_t>(m)].col(0));
            }
        }
    }
    SUBCASE("spread across imputations matches the measurement SD") {
        const auto d = draw_plausible_values(pop, 5, 25.0, 3);
        REQUIRE(d.n_students() > 3500);
        for (int m = 0; m < 3; ++m) {
            const auto& P = d.scores[static_cast<std::size_t>(m)];
            double var = 0.0;
            for (Eigen::Index i = 0; i < P.rows(); ++i) {
                const double mu = P.row(i).mean();
                var += (P.row(i).array() - mu).square().sum() / 4.0;
            }
            const double sd = std::sqrt(var / static_cast<double>(P.rows()));
            INFO("outcome " << m << " across-PV SD " << sd);
            CHECK(std::abs(sd - 25.0) < 2.5);
        }
    }
    SUBCASE("class means are stable across imputations") {
        const auto d = draw_plausible_values(pop, 5, 25.0, 3);
        std::map<std::string, std::vector<std::size_t>> rows;
        for (std::size_t i = 0; i < d.n_students(); ++i) rows[d.class_ids[i]].push_back(i);
        const auto& P = d.scores[1];
        double ratio = 0.0;
        for (const auto& [id, r] : rows) {
            VectorXd means = VectorXd::Zero(5);
            for (auto i : r) means += P.row(static_cast<Eigen::Index>(i)).transpose();
            means /= static_cast<double>(r.size());
            const double sd = std::sqrt((means.array() - means.mean()).square().sum() / 4.0);
            ratio += sd / (25.0 / std::sqrt(static_cast<double>(r.size())));
        }
        ratio /= static_cast<double>(rows.size());
        INFO("mean SD of class means in units of sd_meas / sqrt(n): " << ratio);
        CHECK(ratio > 0.3);
        CHECK(ratio < 3.0);
    }
    CHECK_THROWS_AS(draw_plausible_values(pop, 0, 25.0, 1), ValidationError);
}

TEST_CASE("PPS on equal sizes selects half of four units") {
    Rng rng(87);
    std::vector<int> hits(4, 0);
    const int draws = 10000;
    for (int t = 0; t < draws; ++t) {
        const auto sel = pps_systematic({5.0, 5.0, 5.0, 5.0}, 2, rng.uniform());
        CHECK(sel.selected.size() == 2);
        for (auto i : sel.selected) ++hits[i];
        if (t == 0) {
            for (double p : sel.pi) CHECK(p == 0.5);
        }
    }
    for (int h : hits) CHECK(std::abs(h / double(draws) - 0.5) < 0.02);
}

TEST_CASE("PPS frequencies match inclusion probabilities") {
    const std::vector<double> sizes = {1.0, 1.0, 2.0};
    const auto pi = pps_systematic(sizes, 1, 0.0).pi;
    CHECK(pi == std::vector<double>{0.25, 0.25, 0.5});

    // enumeration over a grid of random starts
    std::vector<int> grid(3, 0);
    const int G = 4000;
    for (int s = 0; s < G; ++s) {
        for (auto i : pps_systematic(sizes, 1, (s + 0.5) / G).selected) ++grid[i];
    }
    for (int i = 0; i < 3; ++i) CHECK(grid[static_cast<std::size_t>(i)] / double(G) == doctest::Approx(pi[static_cast<std::size_t>(i)]).epsilon(1e-12));

    Rng rng(88);
    std::vector<int> hits(3, 0);
    for (int t = 0; t < 10000; ++t) {
        for (auto i : pps_systematic(sizes, 1, rng.uniform()).selected) ++hits[i];
    }
    for (int i = 0; i < 3; ++i) CHECK(std::abs(hits[static_cast<std::size_t>(i)] / 1e4 - pi[static_cast<std::size_t>(i)]) < 0.02);
}

TEST_CASE("oversized units are taken with certainty") {
    const std::vector<double> sizes = {10.0, 1.0, 1.0, 1.0, 1.0};
    Rng rng(89);
    std::vector<int> hits(5, 0);
    for (int t = 0; t < 4000; ++t) {
        const auto sel = pps_systematic(sizes, 2, rng.uniform());
        CHECK(sel.certainty[0]);
        CHECK(sel.pi[0] == 1.0);
        CHECK(sel.pi[1] == 0.25);
        CHECK(sel.selected.size() == 2);
        for (auto i : sel.selected) ++hits[i];
    }
    CHECK(hits[0] == 4000);
    for (int i = 1; i < 5; ++i) CHECK(std::abs(hits[static_cast<std::size_t>(i)] / 4000.0 - 0.25) < 0.03);

    CHECK_THROWS_AS(pps_systematic({1.0, 2.0}, 3, 0.1), ValidationError);
    CHECK_THROWS_AS(pps_systematic({1.0, 0.0}, 1, 0.1), ValidationError);
    CHECK_THROWS_AS(pps_systematic({1.0, 2.0}, 1, 1.0), ValidationError);
}

TEST_CASE("school weights estimate the frame size without bias") {
    const auto pop = simulate_frame(frame_config(40, 90));
    std::map<std::string, int> per;
    for (const auto& s : pop.schools) per[s.stratum] = 8;
    const double N = static_cast<double>(pop.schools.size());
    double total = 0.0, mos_total = 0.0, mos = 0.0;
    for (const auto& s : pop.schools) mos += s.mos;
    const int reps = 1000;
    for (int r = 0; r < reps; ++r) {
        const auto sample = sample_pps_systematic(pop, per, static_cast<std::uint64_t>(1000 + r));
        CHECK(sample.schools.size() == 8 * per.size());
        for (auto k : sample.schools) {
            const auto& s = pop.schools[k];
            total += sample.weight.at(s.id);
            mos_total += sample.weight.at(s.id) * s.mos;
        }
    }
    INFO("mean HT school count " << total / reps << " of " << N);
    CHECK(std::abs(total / reps - N) < 0.02 * N);
    CHECK(std::abs(mos_total / reps - mos) < 0.02 * mos);
}

TEST_CASE("class sampling within a school") {
    SUBCASE("two of four") {
        const auto cs = sample_classes({"a", "b", "c", "d"}, {20, 21, 22, 23}, 2, 15, 1);
        CHECK(cs.selected.size() == 2);
        CHECK(cs.weight == 2.0);
    }
    SUBCASE("a single class is certain") {
        const auto cs = sample_classes({"a"}, {7}, 2, 15, 1);
        CHECK(cs.selected == std::vector<std::size_t>{0});
        CHECK(cs.weight == 1.0);
    }
    SUBCASE("small classes are drawn as one pseudo-class") {
        bool pseudo_seen = false;
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            const auto cs = sample_classes({"a", "b", "c", "d"}, {3, 20, 3, 20}, 1, 5, seed);
            CHECK(cs.units.size() == 3);
            CHECK(cs.weight == 3.0);
            const std::set<std::size_t> sel(cs.selected.begin(), cs.selected.end());
            CHECK(sel.count(0) == sel.count(2));
            if (sel.count(0)) {
                pseudo_seen = true;
                CHECK(sel.size() == 2);
            }
        }
        CHECK(pseudo_seen);
    }
    SUBCASE("equal probability draw") {
        std::vector<int> hits(5, 0);
        for (std::uint64_t seed = 0; seed < 5000; ++seed) {
            for (auto i : sample_classes({"a", "b", "c", "d", "e"}, {20, 20, 20, 20, 20}, 2, 15, seed).selected) ++hits[i];
        }
        for (int h : hits) CHECK(std::abs(h / 5000.0 - 0.4) < 0.03);
    }
    CHECK_THROWS_AS(sample_classes({}, {}, 1, 15, 1), ValidationError);
    CHECK_THROWS_AS(sample_classes({"a"}, {3}, 0, 15, 1), ValidationError);
}

TEST_CASE("two-stage sample weights") {
    const auto pop = simulate_frame(frame_config(20, 91));
    SampleDesign design;
    design.default_schools = 6;
    design.classes_per_school = 1;
    const auto s = draw_sample(pop, design, 5);
    const auto s2 = draw_sample(pop, design, 5);
    CHECK(s.class_ids == s2.class_ids);
    std::map<std::string, int> per;
    for (const auto& sc : pop.schools) per[sc.stratum] = 6;
    const auto schools = sample_pps_systematic(pop, per, 5);
    CHECK(s.weights.school.size() == schools.schools.size());
    for (const auto& [id, w] : s.weights.school) CHECK(w == schools.weight.at(id));
    const auto structure = sample_structure(pop, s.class_ids);
    for (const auto& id : s.class_ids) {
        const auto& school = pop.schools[static_cast<std::size_t>(std::stoi(structure.class_school.at(id).substr(1)) - 1)];
        CHECK(school.id == structure.class_school.at(id));
        CHECK(s.weights.class_.at(id) >= 1.0);
        CHECK(s.weights.class_.at(id) <= static_cast<double>(school.classes.size()));
    }
    for (const auto& [sid, cls] : structure.student_class) {
        CHECK(s.weights.student.at(sid) == 1.0);
        const auto school = structure.class_school.at(cls);
        CHECK(s.weights.overall(sid, cls, school) ==
              s.weights.student.at(sid) * s.weights.class_.at(cls) * s.weights.school.at(school));
    }
}

TEST_CASE("nonresponse adjustment") {
    const auto pop = simulate_frame(frame_config(20, 92));
    SampleDesign design;
    design.default_schools = 6;
    const auto s = draw_sample(pop, design, 6);
    const auto st = sample_structure(pop, s.class_ids);

    SUBCASE("full response changes nothing") {
        const auto w = nonresponse_adjust(s.weights, st, {});
        CHECK(w.school == s.weights.school);
        CHECK(w.class_ == s.weights.class_);
        CHECK(w.student == s.weights.student);
    }
    SUBCASE("half a class responding doubles its student weights") {
        WeightSet W = s.weights;
        const auto cls = s.class_ids.front();
        std::vector<std::string> members;
        for (const auto& [sid, c] : st.student_class) {
            if (c == cls) members.push_back(sid);
        }
        REQUIRE(members.size() >= 2);
        const std::size_t half = members.size() / 2;
        ResponseIndicators r;
        for (std::size_t i = 0; i < half; ++i) r.student[members[i]] = false;
        const auto w = nonresponse_adjust(W, st, r);
        for (std::size_t i = 0; i < members.size(); ++i) {
            if (i < half) {
                CHECK(w.student.count(members[i]) == 0);
            } else {
                CHECK(w.student.at(members[i]) ==
                      doctest::Approx(static_cast<double>(members.size()) / static_cast<double>(members.size() - half)));
            }
        }
    }
    SUBCASE("cell totals are preserved") {
        Rng rng(93);
        ResponseIndicators r;
        for (const auto& [id, sc] : st.school_stratum) r.school[id] = rng.bernoulli(0.9);
        for (const auto& [id, sc] : st.class_school) r.class_[id] = true;
        for (const auto& [id, c] : st.student_class) r.student[id] = rng.bernoulli(0.8);
        try {
            const auto w = nonresponse_adjust(s.weights, st, r);
            std::map<std::string, double> before, after;
            for (const auto& [id, wk] : s.weights.school) before[st.school_stratum.at(id)] += wk;
            for (const auto& [id, wk] : w.school) after[st.school_stratum.at(id)] += wk;
            for (const auto& [cell, v] : before) CHECK(after.at(cell) == doctest::Approx(v).epsilon(1e-12));
        } catch (const ValidationError&) {
            // a stratum lost every school; covered below
        }
    }
    SUBCASE("an empty cell is an error naming it") {
        ResponseIndicators r;
        const auto cls = s.class_ids.front();
        for (const auto& [sid, c] : st.student_class) {
            if (c == cls) r.student[sid] = false;
        }
        try {
            nonresponse_adjust(s.weights, st, r);
            FAIL("expected an error");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find(cls) != std::string::npos);
        }
    }
}

TEST_CASE("adjusted weights keep the population count unbiased under random response") {
    const auto pop = simulate_frame(frame_config(20, 94));
    const double N = static_cast<double>(pop.truth.n_students());
    SampleDesign design;
    design.default_schools = 6;
    double est = 0.0;
    const int reps = 300;
    for (int rep = 0; rep < reps; ++rep) {
        const auto s = draw_sample(pop, design, static_cast<std::uint64_t>(500 + rep));
        const auto st = sample_structure(pop, s.class_ids);
        Rng rng(static_cast<std::uint64_t>(7000 + rep));
        ResponseIndicators r;
        for (const auto& [id, c] : st.student_class) r.student[id] = rng.bernoulli(0.85);
        const auto w = nonresponse_adjust(s.weights, st, r);
        for (const auto& [sid, ws] : w.student) {
            const auto& cls = st.student_class.at(sid);
            est += w.overall(sid, cls, st.class_school.at(cls));
        }
    }
    est /= reps;
    INFO("estimated " << est << " of " << N);
    CHECK(std::abs(est - N) < 0.03 * N);
}

TEST_CASE("informative design favours classes with large effects") {
    auto c = frame_config(30, 95);
    c.informative_lambda = 0.05;
    const auto pop = simulate_frame(c);
    SampleDesign design;
    design.default_schools = 10;
    double sum = 0.0;
    int n = 0;
    for (int rep = 0; rep < 20; ++rep) {
        const auto s = draw_sample(pop, design, static_cast<std::uint64_t>(rep));
        std::set<std::string> chosen(s.class_ids.begin(), s.class_ids.end());
        for (const auto& fc : pop.classes) {
            if (chosen.count(fc.id)) {
                sum += fc.u(0);
                ++n;
            }
        }
    }
    double pop_mean = 0.0;
    for (const auto& fc : pop.classes) pop_mean += fc.u(0);
    pop_mean /= static_cast<double>(pop.classes.size());
    INFO("sampled mean u " << sum / n << ", frame mean " << pop_mean);
    CHECK(sum / n > pop_mean + 5.0);
}

TEST_CASE("simulate, sample and fit recovers the truth") {
    auto c = frame_config(60, 96);
    c.sd_meas = 0.0;
    c.n_pv = 1;
    const auto pop = simulate_frame(c);
    SampleDesign design;
    design.default_schools = 25;
    design.classes_per_school = 2;
    const auto s = draw_sample(pop, design, 3);
    const auto sub = pop.restrict(s.class_ids);
    const auto d = draw_plausible_values(sub, 1, 0.0, 3);
    const auto spec = generative_model(c);
    const auto prepared = prepare_analysis(d, spec);
    const auto D = build_design(prepared.data, spec, 1);
    const auto F = fit_ml(D);
    REQUIRE(F.converged());
    int outside = 0;
    for (int k = 0; k < D.p; ++k) {
        const auto& coef = F.layout.coefficients[static_cast<std::size_t>(k)];
        double truth;
        if (coef.term == "(intercept)") {
            truth = c.intercept[static_cast<std::size_t>(coef.outcome)];
        } else {
            truth = NAN;
            for (const auto& t : c.coefficients) {
                if (t.term == coef.term) truth = t.values[static_cast<std::size_t>(coef.outcome)];
            }
        }
        const double z = (F.beta(k) - truth) / std::sqrt(F.cov_model(k, k));
        INFO(coef.name << " z = " << z);
        CHECK(std::isfinite(z));
        outside += std::abs(z) > 3.0;
    }
    CHECK(outside <= 1);
}

TEST_CASE("area-specific between variance") {
    auto c = sample_scale(300, 97);
    c.area_tau_scale = {1.0, 1.0, 1.0, 2.0, 2.0};
    const auto pop = simulate_frame(c);
    const auto area = pop.class_area();
    std::vector<VectorXd> north, south;
    for (const auto& fc : pop.classes) {
        const auto& a = area.at(fc.id);
        if (a == "South" || a == "South-Islands") south.push_back(fc.u);
        if (a == "North-West" || a == "North-East") north.push_back(fc.u);
    }
    const double ratio = sample_cov(south)(1, 1) / sample_cov(north)(1, 1);
    CHECK(ratio > 1.6);
    CHECK(ratio < 2.5);
}

TEST_CASE("configuration validation and JSON round trip") {
    auto c = SimConfig::study_defaults();
    CHECK_NOTHROW(c.validate());
    const auto back = sim_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));

    auto bad = c;
    bad.sigma(0, 0) = -1.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.tau = -MatrixXd::Identity(3, 3);
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.sd_meas = 100.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.intercept.pop_back();
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.missing_rate["nope"] = 0.1;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK_THROWS_AS(sim_config_from_json(nlohmann::json::array()), ValidationError);
    CHECK_THROWS_AS(sim_config_from_json({{"sigma", "x"}}), ValidationError);

    bad = c;
    bad.tau = MatrixXd::Zero(3, 3);
    CHECK_NOTHROW(bad.validate());
}

TEST_CASE("defaults sit at the documented scale") {
    const auto c = SimConfig::study_defaults();
    const auto pop = simulate_frame(c);
    CHECK(pop.classes.size() == 237);
    const double nbar = static_cast<double>(pop.truth.n_students()) / 237.0;
    CHECK(nbar > 14.0);
    CHECK(nbar < 18.0);
    for (const auto& [p, g] : pop.province_gva) {
        CHECK(g >= 55.0);
        CHECK(g <= 142.0);
    }
    const auto n = SimConfig::null_decomposition_defaults();
    const auto rep = decompose(n.sigma, n.tau, n.outcomes);
    CHECK(rep.within_corr(0, 1) == doctest::Approx(0.71));
    CHECK(rep.between_corr(0, 1) == doctest::Approx(0.93));
    CHECK(rep.icc(0) == doctest::Approx(19.8));
}
