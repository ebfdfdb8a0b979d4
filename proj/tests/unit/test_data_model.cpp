#include "mvmlm/dataset.hpp"
#include "mvmlm/error.hpp"
#include "mvmlm/model_spec.hpp"
#include "mvmlm/simulate.hpp"
#include "mvmlm/transforms.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace mvmlm;

namespace {

Schema small_schema() {
    Schema s;
    s.outcomes = {"read", "math", "scie"};
    s.covariates = {{"female", Level::student, true}, {"preschool", Level::student, true},
                    {"env", Level::school, false}, {"gva", Level::province, false}};
    return s;
}

const char* kSmall =
    "student_id,class_id,school_id,province_id,read_pv1,math_pv1,scie_pv1,female,preschool,env,gva\n"
    "a1,c1,s1,p1,500,510,520,1,1,9.5,120\n"
    "a2,c1,s1,p1,480,470,490,0,NA,9.5,120\n"
    "b1,c2,s2,p2,530,520,515,1,,8.0,60\n"
    "b2,c2,s2,p2,455,465,470,0,1,8.0,60\n";

Dataset parse(const std::string& text, const Schema& s = small_schema()) {
    std::istringstream in(text);
    return parse_dataset(in, s);
}

std::string emit(const Dataset& d) {
    std::ostringstream out;
    emit_dataset(out, d);
    return out.str();
}

ModelSpec spec_with(std::vector<std::string> terms) {
    nlohmann::json j = {{"outcomes", {"read", "math", "scie"}}, {"terms", terms}};
    return model_spec_from_json(j);
}

}  // namespace

TEST_CASE("minimal CSV: 2 classes of 2 students, 3 outcomes, 1 PV") {
    const auto d = parse(kSmall);
    CHECK(d.n_students() == 4);
    CHECK(d.n_classes() == 2);
    CHECK(d.n_pv == 1);
    CHECK(d.scores.size() == 3);
    CHECK(d.scores[1](2, 0) == 520.0);
    // empty field and NA are both missing
    CHECK(std::isnan(d.covariate("preschool").values[1]));
    CHECK(std::isnan(d.covariate("preschool").values[2]));
}

TEST_CASE("class nested in two schools is a structural error") {
    const std::string bad =
        "student_id,class_id,school_id,province_id,read_pv1,math_pv1,scie_pv1,female,preschool,env,gva\n"
        "a1,c1,s1,p1,500,510,520,1,1,9.5,120\n"
        "a2,c1,s2,p1,480,470,490,0,1,9.5,120\n";
    CHECK_THROWS_AS(parse(bad), StructuralError);
    try {
        parse(bad);
    } catch (const StructuralError& e) {
        CHECK(e.unit() == "c1");
    }
}

TEST_CASE("school covariate varying within a school is a structural error") {
    const std::string bad =
        "student_id,class_id,school_id,province_id,read_pv1,math_pv1,scie_pv1,female,preschool,env,gva\n"
        "a1,c1,s1,p1,500,510,520,1,1,9.5,120\n"
        "a2,c1,s1,p1,480,470,490,0,1,9.0,120\n";
    CHECK_THROWS_AS(parse(bad), StructuralError);
}

TEST_CASE("malformed rows report their line number") {
    const std::string bad =
        "student_id,class_id,school_id,province_id,read_pv1,math_pv1,scie_pv1,female,preschool,env,gva\n"
        "a1,c1,s1,p1,500,510,520,1,1,9.5,120\n"
        "a2,c1,s1,p1,480,oops,490,0,1,9.5,120\n";
    try {
        parse(bad);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(parse("student_id,class_id\n"), ParseError);
}

TEST_CASE("load, emit, load is idempotent") {
    const auto d = parse(kSmall);
    const auto once = emit(d);
    const auto twice = emit(parse(once));
    CHECK(once == twice);
}

TEST_CASE("simulated full-scale data round-trips byte-identically") {
    auto c = SimConfig::study_defaults();
    c.seed = 11;
    const auto sim = simulate_population(c);
    CHECK(sim.data.n_classes() == 237);
    CHECK(sim.data.n_pv == 5);
    const auto text = emit(sim.data);
    std::istringstream in(text);
    const auto back = parse_dataset(in, schema_of(sim.data));
    CHECK(emit(back) == text);
}

TEST_CASE("listwise deletion") {
    SUBCASE("no missing values leaves the data unchanged") {
        const auto d = parse(kSmall);
        const auto r = listwise_filter(d, spec_with({"female", "env"}));
        CHECK(r.report.n_students_dropped == 0);
        CHECK(r.report.n_classes_dropped == 0);
        CHECK(emit(r.data) == emit(d));
    }
    SUBCASE("one of ten students missing preschool") {
        std::string text = "student_id,class_id,school_id,province_id,read_pv1,math_pv1,scie_pv1,female,preschool,env,gva\n";
        for (int i = 0; i < 10; ++i) {
            text += "s" + std::to_string(i) + ",c" + std::to_string(i / 5) + ",k" + std::to_string(i / 5) +
                    ",p1,500,500,500," + std::to_string(i % 2) + "," + (i == 7 ? "NA" : "1") + ",9,100\n";
        }
        const auto r = listwise_filter(parse(text), spec_with({"female", "preschool"}));
        CHECK(r.data.n_students() == 9);
        CHECK(r.report.n_students_dropped == 1);
        CHECK(r.report.missing_by_column.at("preschool") == 1);
    }
    SUBCASE("everyone dropped") {
        std::string text = "student_id,class_id,school_id,province_id,read_pv1,math_pv1,scie_pv1,female,preschool,env,gva\n"
                           "a1,c1,s1,p1,500,510,520,1,NA,9.5,120\n";
        CHECK_THROWS_AS(listwise_filter(parse(text), spec_with({"preschool"})), EmptyAnalysisError);
    }
}

TEST_CASE("exclusion report matches injected missingness at full scale") {
    auto c = SimConfig::study_defaults();
    c.seed = 5;
    c.missing_rate = {{"preschool", 0.05}, {"home_resources", 0.03}, {"lang_not_italian", 0.015}};
    const auto d = simulate_population(c).data;
    const auto spec = generative_model(c);
    std::size_t any = 0;
    std::map<std::string, std::size_t> per;
    for (std::size_t i = 0; i < d.n_students(); ++i) {
        bool miss = false;
        for (const auto& col : {"preschool", "home_resources", "lang_not_italian"}) {
            if (std::isnan(d.covariate(col).values[i])) {
                ++per[col];
                miss = true;
            }
        }
        any += miss;
    }
    const auto r = listwise_filter(d, spec);
    CHECK(r.report.n_students_dropped == any);
    CHECK(r.report.missing_by_column.at("preschool") == per["preschool"]);
    CHECK(r.report.missing_by_column.at("home_resources") == per["home_resources"]);
    const double frac = static_cast<double>(any) / static_cast<double>(d.n_students());
    CHECK(frac > 0.06);
    CHECK(frac < 0.13);
}

TEST_CASE("grand-mean centering") {
    Dataset d = parse(kSmall);
    TransformSpec t;
    t.center = {{"gva", std::nullopt}};
    const auto out = apply_transforms(d, t).data;
    // gva = 120, 120, 60, 60 -> mean 90
    CHECK(out.covariate("gva").values[0] == doctest::Approx(30.0));
    CHECK(out.covariate("gva").values[3] == doctest::Approx(-30.0));

    std::string text = "student_id,class_id,school_id,province_id,read_pv1,math_pv1,scie_pv1,female,preschool,env,gva\n";
    for (int i = 1; i <= 3; ++i) {
        text += "s" + std::to_string(i) + ",c1,k1,p1,500,500,500,1,1,9," + std::to_string(i) + "\n";
    }
    Schema s = small_schema();
    s.covariates[3].level = Level::student;
    const auto col = apply_transforms(parse(text, s), t).data.covariate("gva").values;
    CHECK(col == std::vector<double>{-1.0, 0.0, 1.0});
}

TEST_CASE("centered columns have mean zero over retained rows") {
    std::mt19937_64 g(3);
    std::lognormal_distribution<double> ln(4.0, 1.0);
    std::bernoulli_distribution miss(0.2);
    Schema s;
    s.outcomes = {"read"};
    s.covariates = {{"x", Level::student, false}, {"w", Level::student, false}};
    for (int rep = 0; rep < 20; ++rep) {
        std::string text = "student_id,class_id,school_id,province_id,read_pv1,x,w\n";
        for (int i = 0; i < 200; ++i) {
            text += "s" + std::to_string(i) + ",c" + std::to_string(i / 10) + ",k" + std::to_string(i / 20) +
                    ",p1,500," + format_double(ln(g)) + "," + (miss(g) ? "NA" : format_double(ln(g))) + "\n";
        }
        nlohmann::json j = {{"outcomes", {"read"}},
                            {"terms", {"x", "w"}},
                            {"transforms", {{"center", {{{"column", "x"}}}}}}};
        const auto prepared = prepare_analysis(parse(text, s), model_spec_from_json(j));
        double sum = 0.0;
        for (double v : prepared.data.covariate("x").values) sum += v;
        CHECK(prepared.data.n_students() < 200);
        CHECK(std::abs(sum / static_cast<double>(prepared.data.n_students())) < 1e-12);
    }
}

TEST_CASE("spline transform") {
    CHECK(spline_below_knot(55, 100) == -45.0);
    CHECK(spline_below_knot(100, 100) == 0.0);
    CHECK(spline_below_knot(142, 100) == 0.0);

    std::mt19937_64 g(7);
    std::uniform_real_distribution<double> x(-1e3, 1e3);
    for (int i = 0; i < 1000; ++i) {
        const double v = x(g), k = x(g);
        const double s = spline_below_knot(v, k);
        CHECK(s <= 0.0);
        CHECK((s == v - k) == (v <= k));
    }

    Dataset d = parse(kSmall);
    TransformSpec t;
    t.splines = {{"gva", 100.0, true}};
    const auto out = apply_transforms(d, t).data;
    CHECK(out.find_covariate("gva_above") == nullptr);
    CHECK(out.covariate("gva_below").values == std::vector<double>{0.0, 0.0, -40.0, -40.0});
    t.splines[0].constrain_upper = false;
    const auto both = apply_transforms(d, t).data;
    CHECK(both.covariate("gva_above").values == std::vector<double>{20.0, 20.0, 0.0, 0.0});
}

TEST_CASE("class-mean columns are constant within class") {
    auto c = SimConfig::study_defaults();
    c.seed = 2;
    const auto d = simulate_population(c).data;
    TransformSpec t;
    t.class_means = {"home_resources"};
    const auto out = apply_transforms(d, t).data;
    const auto& cm = out.covariate("home_resources_cmean").values;
    const auto& src = out.covariate("home_resources").values;
    std::map<std::string, std::pair<double, int>> acc;
    for (std::size_t i = 0; i < out.n_students(); ++i) {
        acc[out.class_ids[i]].first += src[i];
        acc[out.class_ids[i]].second += 1;
    }
    for (std::size_t i = 0; i < out.n_students(); ++i) {
        const auto& a = acc[out.class_ids[i]];
        CHECK(std::abs(cm[i] - a.first / a.second) < 1e-12);
    }
}

TEST_CASE("model spec validation") {
    CHECK_THROWS_AS(model_spec_from_json(nlohmann::json{{"outcomes", nlohmann::json::array()}}), ValidationError);
    nlohmann::json dup = {{"outcomes", {"read"}}, {"terms", {"female", "female"}}};
    CHECK_THROWS_AS(model_spec_from_json(dup), ValidationError);
    nlohmann::json twice = {{"outcomes", {"read"}},
                            {"transforms", {{"center", {{{"column", "gva"}}, {{"column", "gva"}}}}}}};
    CHECK_THROWS_AS(model_spec_from_json(twice), ValidationError);
    nlohmann::json knot = {{"outcomes", {"read"}},
                           {"transforms", {{"splines", {{{"column", "gva"}, {"knot", "x"}}}}}}};
    CHECK_THROWS(model_spec_from_json(knot));
    const auto s = spec_with({"female", "env"});
    CHECK(model_spec_to_json(model_spec_from_json(model_spec_to_json(s))) == model_spec_to_json(s));
    CHECK(null_model(s).terms.empty());
}
