#include "mvmlm/cli.hpp"

#include "mvmlm/dataset.hpp"
#include "mvmlm/design.hpp"
#include "mvmlm/eb.hpp"
#include "mvmlm/error.hpp"
#include "mvmlm/fit.hpp"
#include "mvmlm/json_io.hpp"
#include "mvmlm/mi.hpp"
#include "mvmlm/model_spec.hpp"
#include "mvmlm/report.hpp"
#include "mvmlm/rng.hpp"
#include "mvmlm/sampling.hpp"
#include "mvmlm/simulate.hpp"
#include "mvmlm/transforms.hpp"
#include "mvmlm/weighted.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace mvmlm {

namespace {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Records what a command read and wrote; written next to the primary output.
class Manifest {
public:
    Manifest(std::string command, std::vector<std::string> args)
        : command_(std::move(command)), args_(std::move(args)), start_(std::chrono::steady_clock::now()) {}

    void input(const std::string& path) {
        if (!path.empty()) inputs_.push_back(path);
    }
    void output(const std::string& path, const std::string& contents) {
        write_file_atomic(path, contents);
        outputs_.push_back(path);
    }
    void output_written(const std::string& path) { outputs_.push_back(path); }
    void seed(std::uint64_t s) { seed_ = s; }

    void write(const std::string& primary) const {
        nlohmann::json j;
        j["tool"] = "mvmlm";
        j["version"] = kVersion;
        j["command"] = command_;
        j["argv"] = args_;
        j["inputs"] = nlohmann::json::object();
        for (const auto& p : inputs_) j["inputs"][p] = hex64(fnv1a(read_file(p)));
        j["outputs"] = nlohmann::json::object();
        for (const auto& p : outputs_) j["outputs"][p] = hex64(fnv1a(read_file(p)));
        j["seed"] = seed_ ? nlohmann::json(*seed_) : nlohmann::json(nullptr);
        j["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        write_file_atomic(primary + ".manifest.json", j.dump(2) + "\n");
    }

private:
    std::string command_;
    std::vector<std::string> args_;
    std::vector<std::string> inputs_;
    std::vector<std::string> outputs_;
    std::optional<std::uint64_t> seed_;
    std::chrono::steady_clock::time_point start_;
};

struct FitFlags {
    double tol_loglik = 1e-10;
    double tol_grad = 1e-5;
    int max_iter = 200;
    std::string gradient = "fd";
    bool cluster_correction = false;

    FitOptions options() const {
        FitOptions o;
        o.optimizer.tol_loglik = tol_loglik;
        o.optimizer.tol_grad = tol_grad;
        o.optimizer.max_iter = max_iter;
        o.gradient = gradient == "analytic" ? GradientMethod::analytic : GradientMethod::central_difference;
        o.cluster_correction = cluster_correction;
        return o;
    }
};

void add_fit_flags(CLI::App* app, FitFlags& f) {
    app->add_option("--tol-loglik", f.tol_loglik, "relative log-likelihood change for convergence")->capture_default_str();
    app->add_option("--tol-grad", f.tol_grad, "gradient infinity norm for convergence")->capture_default_str();
    app->add_option("--max-iter", f.max_iter, "optimizer iteration cap")->capture_default_str();
    app->add_option("--gradient", f.gradient, "gradient method")
        ->check(CLI::IsMember({"fd", "analytic"}))
        ->capture_default_str();
    app->add_flag("--cluster-correction", f.cluster_correction, "multiply the robust meat by K/(K-1)");
}

struct DataFlags {
    std::string data;
    std::string schema;
    std::string model;
};

void add_data_flags(CLI::App* app, DataFlags& d, bool model_required = true) {
    app->add_option("--data", d.data, "student-level CSV")->required();
    app->add_option("--schema", d.schema, "column roles (default: <data>.schema.json)");
    auto* m = app->add_option("--model", d.model, "model specification JSON");
    if (model_required) m->required();
}

Dataset load_data(const DataFlags& f, Manifest& man) {
    const std::string schema_path = f.schema.empty() ? f.data + ".schema.json" : f.schema;
    man.input(f.data);
    man.input(schema_path);
    return load_dataset(f.data, schema_from_json(read_json_file(schema_path)));
}

ModelSpec load_model(const std::string& path, Manifest& man) {
    man.input(path);
    return model_spec_from_json(read_json_file(path));
}

int outcome_in(const std::vector<std::string>& outcomes, const std::string& name) {
    for (std::size_t m = 0; m < outcomes.size(); ++m) {
        if (outcomes[m] == name) return static_cast<int>(m);
    }
    throw ValidationError("unknown outcome '" + name + "'");
}

std::map<std::string, std::string> load_areas(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) header.push_back(f);
    }
    const auto ci = std::find(header.begin(), header.end(), "class_id") - header.begin();
    const auto ai = std::find(header.begin(), header.end(), "area") - header.begin();
    if (ci == static_cast<long>(header.size()) || ai == static_cast<long>(header.size())) {
        throw ParseError(1, path + " needs class_id and area columns");
    }
    std::map<std::string, std::string> out;
    std::size_t n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string x;
        while (std::getline(ss, x, ',')) f.push_back(x);
        if (f.size() != header.size()) throw ParseError(n, "wrong number of fields in " + path);
        out[f[static_cast<std::size_t>(ci)]] = f[static_cast<std::size_t>(ai)];
    }
    return out;
}

std::vector<EqualityTest> all_equality_tests(const MIFitResult& mi) {
    std::vector<EqualityTest> out;
    if (mi.m() < 2) return out;
    for (const auto& term : testable_terms(mi.layout)) out.push_back(equality_test(mi, term));
    return out;
}

void write_dataset_bundle(const Dataset& d, const std::string& out, const SimConfig& c, Manifest& man) {
    std::ostringstream csv;
    emit_dataset(csv, d);
    man.output(out, csv.str());
    man.output(out + ".schema.json", schema_to_json(schema_of(d)).dump(2) + "\n");
    man.output(out + ".model.json", model_spec_to_json(generative_model(c)).dump(2) + "\n");
}

// ---- subcommands ----------------------------------------------------------

int cmd_simulate(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
                 std::ostream& os, Manifest& man) {
    SimConfig c = SimConfig::study_defaults();
    if (!config_path.empty()) {
        man.input(config_path);
        c = sim_config_from_json(read_json_file(config_path));
    }
    if (seed) c.seed = *seed;
    man.seed(c.seed);
    if (c.frame.schools_per_stratum > 0) {
        throw ValidationError("config describes a sampling frame; use the sample subcommand");
    }
    const auto sim = simulate_population(c);
    write_dataset_bundle(sim.data, out, c, man);
    std::ostringstream s1, s2;
    save_frame(out + ".frame.csv", sim.population);
    man.output_written(out + ".frame.csv");
    save_classes(out + ".classes.csv", sim.population);
    man.output_written(out + ".classes.csv");
    man.output(out + ".config.json", to_json(c).dump(2) + "\n");
    man.write(out);
    os << "simulated " << sim.data.n_students() << " students in " << sim.data.n_classes() << " classes -> " << out
       << '\n';
    return 0;
}

struct SampleFlags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    int schools = 10;
    int classes = 1;
    int threshold = 15;
};

int cmd_sample(const SampleFlags& f, std::ostream& os, Manifest& man) {
    man.input(f.config);
    SimConfig c = sim_config_from_json(read_json_file(f.config));
    if (f.seed) c.seed = *f.seed;
    man.seed(c.seed);
    if (c.frame.schools_per_stratum <= 0) {
        throw ValidationError("sampling needs a frame: set frame.schools_per_stratum > 0 in the config");
    }
    const auto frame = simulate_frame(c);
    SampleDesign design;
    design.default_schools = f.schools;
    design.classes_per_school = f.classes;
    design.pseudo_class_threshold = f.threshold;
    const auto sample = draw_sample(frame, design, splitmix64(c.seed ^ 0x5a5a5a5aull));
    const auto sub = frame.restrict(sample.class_ids);
    const auto data = draw_plausible_values(sub, c.n_pv, c.sd_meas, c.seed);
    write_dataset_bundle(data, f.out, c, man);
    save_weights(f.out + ".weights.csv", sample.weights, data);
    man.output_written(f.out + ".weights.csv");
    save_frame(f.out + ".frame.csv", frame);
    man.output_written(f.out + ".frame.csv");
    save_classes(f.out + ".classes.csv", sub);
    man.output_written(f.out + ".classes.csv");
    man.output(f.out + ".config.json", to_json(c).dump(2) + "\n");
    man.write(f.out);
    os << "sampled " << sample.class_ids.size() << " classes (" << data.n_students() << " students) from "
       << frame.schools.size() << " schools -> " << f.out << '\n';
    return 0;
}

struct FitCmdFlags {
    DataFlags data;
    FitFlags fit;
    std::string out;
    int pv = 1;
    std::string outcome;
    std::string weights;
    std::string scaling = "none";
};

int cmd_fit(const FitCmdFlags& f, std::ostream& os, Manifest& man) {
    const auto d = load_data(f.data, man);
    const auto spec = load_model(f.data.model, man);
    if (f.pv < 1 || f.pv > d.n_pv) throw ValidationError("--pv must lie in 1.." + std::to_string(d.n_pv));
    const auto prepared = prepare_analysis(d, spec);
    StackedDesign D;
    if (!f.outcome.empty()) {
        D = build_univariate_design(prepared.data, spec, outcome_in(spec.outcomes, f.outcome), f.pv);
    } else {
        D = build_design(prepared.data, spec, f.pv);
    }
    FitResult F;
    if (!f.weights.empty()) {
        if (D.M != 1) throw ValidationError("weighted fitting is univariate; pass --outcome");
        man.input(f.weights);
        auto W = load_weights(f.weights);
        W.scaling = weight_scaling_from_string(f.scaling);
        F = fit_weighted_univariate(D, W, f.fit.options());
    } else {
        F = fit_ml(D, f.fit.options());
    }
    auto j = to_json(F);
    j["plausible_value"] = f.pv;
    j["weighted"] = !f.weights.empty();
    j["exclusions"] = to_json(prepared.report);
    j["warnings"] = prepared.warnings;
    j["decomposition"] = to_json(decompose(F));
    man.output(f.out, j.dump(2) + "\n");
    man.write(f.out);
    os << "logL " << fixed(F.logL) << " (" << to_string(F.convergence.status) << ", " << F.convergence.iterations
       << " iterations) -> " << f.out << '\n';
    if (!F.converged()) os << "warning: optimizer did not converge\n";
    return 0;
}

struct MiCmdFlags {
    DataFlags data;
    FitFlags fit;
    std::string out;
    std::string covariance = "robust";
    int threads = 1;
};

int cmd_fit_mi(const MiCmdFlags& f, std::ostream& os, Manifest& man) {
    const auto d = load_data(f.data, man);
    const auto spec = load_model(f.data.model, man);
    MIOptions opts;
    opts.fit = f.fit.options();
    opts.covariance = covariance_choice_from_string(f.covariance);
    opts.threads = f.threads;
    const auto mi = fit_mi(d, spec, opts);
    const auto tests = all_equality_tests(mi);
    auto j = to_json(mi);
    j["equality_tests"] = nlohmann::json::array();
    for (const auto& t : tests) j["equality_tests"].push_back(to_json(t));
    j["exclusions"] = to_json(prepare_analysis(d, spec).report);
    man.output(f.out, j.dump(2) + "\n");
    man.output(f.out + ".table.txt", coefficient_table(mi, tests));
    man.output(f.out + ".coefficients.csv", coefficient_csv(mi, tests));
    man.write(f.out);
    os << coefficient_table(mi, tests);
    return 0;
}

struct ResidualFlags {
    DataFlags data;
    FitFlags fit;
    std::string fit_json;
    std::string mi_json;
    std::string outcome;
    std::string out_prefix;
    std::string areas;
    int pv = 1;
    bool mi_average = false;
    double level = 0.95;
};

/// The fit used for residuals: an explicit fit file, one imputation of an MI
/// file, or a fresh fit of the requested plausible value.
EBResiduals residuals_for(const ResidualFlags& f, const Dataset& d, const ModelSpec& spec, Manifest& man) {
    const auto prepared = prepare_analysis(d, spec);
    if (f.mi_average) {
        if (f.mi_json.empty()) throw ValidationError("--mi-average needs --mi");
        man.input(f.mi_json);
        const auto mi = mi_result_from_json(read_json_file(f.mi_json));
        std::vector<StackedDesign> designs;
        for (int l = 1; l <= static_cast<int>(mi.fits.size()); ++l) designs.push_back(build_design(prepared.data, spec, l));
        return eb_predict_mi(mi, designs);
    }
    const auto D = build_design(prepared.data, spec, f.pv);
    FitResult F;
    if (!f.fit_json.empty()) {
        man.input(f.fit_json);
        F = fit_result_from_json(read_json_file(f.fit_json));
    } else if (!f.mi_json.empty()) {
        man.input(f.mi_json);
        const auto j = read_json_file(f.mi_json);
        const auto& imps = j.at("imputations");
        if (f.pv < 1 || f.pv > static_cast<int>(imps.size())) throw ValidationError("--pv out of range for the MI file");
        F = fit_result_from_json(imps.at(static_cast<std::size_t>(f.pv - 1)));
    } else {
        F = fit_ml(D, f.fit.options());
    }
    if (!F.converged()) throw NumericalError("residuals need a converged fit", INFINITY);
    return eb_predict(F, D);
}

int cmd_residuals(const ResidualFlags& f, std::ostream& os, Manifest& man) {
    const auto d = load_data(f.data, man);
    const auto spec = load_model(f.data.model, man);
    const auto E = residuals_for(f, d, spec, man);
    const int m = f.outcome.empty() ? 0 : E.outcome_index(f.outcome);
    const auto& name = E.outcomes[static_cast<std::size_t>(m)];
    const auto cat = caterpillar_data(E, m, f.level);
    const auto qq = qq_data(E, m);
    const std::string prefix = f.out_prefix + name;
    man.output(prefix + "_caterpillar.csv", caterpillar_csv(cat));
    man.output(prefix + "_caterpillar.svg", caterpillar_svg(cat, "EB residuals with " + fixed(100 * f.level, 0) +
                                                                        "% intervals: " + name));
    man.output(prefix + "_qq.csv", qq_csv(qq));
    man.output(prefix + "_qq.svg", qq_svg(qq, "Normal probability plot of standardized EB residuals: " + name));
    int good = 0, poor = 0, outliers = 0;
    for (const auto& r : cat) {
        good += r.label == Label::good;
        poor += r.label == Label::poor;
    }
    for (const auto& r : qq) outliers += r.outlier;
    if (!f.areas.empty()) {
        man.input(f.areas);
        const auto rows = territorial_summary(E, m, load_areas(f.areas), f.level);
        man.output(prefix + "_territorial.csv", territorial_csv(rows));
        os << territorial_table(rows, name);
    }
    man.write(prefix + "_caterpillar.csv");
    os << name << ": " << cat.size() << " classes, " << good << " good, " << poor << " poor, " << outliers
       << " outliers (|z| > 3)\n";
    return 0;
}

int cmd_test_equality(const std::string& mi_path, const std::vector<std::string>& terms, const std::string& covariance,
                      const std::string& out, std::ostream& os, Manifest& man) {
    man.input(mi_path);
    auto mi = mi_result_from_json(read_json_file(mi_path));
    if (!covariance.empty()) mi = combine_fits(std::move(mi.fits), covariance_choice_from_string(covariance));
    std::vector<EqualityTest> tests;
    if (terms.empty()) {
        tests = all_equality_tests(mi);
    } else {
        for (const auto& t : terms) tests.push_back(equality_test(mi, t));
    }
    nlohmann::json j = nlohmann::json::array();
    os << "term                          D1      df1      df2   p-value\n";
    for (const auto& t : tests) {
        j.push_back(to_json(t));
        char line[160];
        std::snprintf(line, sizeof line, "%-24s %9s %8d %8s %9s\n", t.term.c_str(), fixed(t.statistic).c_str(), t.k,
                      fixed(t.nu, 1).c_str(), fixed(t.p_value).c_str());
        os << line;
    }
    if (!out.empty()) {
        man.output(out, j.dump(2) + "\n");
        man.write(out);
    }
    return 0;
}

int cmd_decompose(const std::string& fit_path, const std::string& mi_path, const std::string& full_path,
                  const std::string& out, std::ostream& os, Manifest& man) {
    if (fit_path.empty() == mi_path.empty()) throw ValidationError("pass exactly one of --fit or --mi");
    DecompositionReport r;
    std::optional<FitResult> null_fit;
    if (!fit_path.empty()) {
        man.input(fit_path);
        null_fit = fit_result_from_json(read_json_file(fit_path));
        r = decompose(*null_fit);
    } else {
        man.input(mi_path);
        const auto mi = mi_result_from_json(read_json_file(mi_path));
        r = decompose(mi.sigma, mi.tau, mi.layout.outcomes);
        null_fit = mi.fits[mi.used_indices().front()];
        null_fit->sigma = mi.sigma;
        null_fit->tau = mi.tau;
    }
    os << decomposition_table(r);
    nlohmann::json j = to_json(r);
    if (!full_path.empty()) {
        man.input(full_path);
        const auto jf = read_json_file(full_path);
        FitResult full;
        if (jf.contains("imputations")) {
            const auto mi = mi_result_from_json(jf);
            full = mi.fits[mi.used_indices().front()];
            full.sigma = mi.sigma;
            full.tau = mi.tau;
        } else {
            full = fit_result_from_json(jf);
        }
        const auto v = variance_explained(*null_fit, full);
        j["variance_explained"] = to_json(v);
        os << "variance explained (%):";
        for (std::size_t m = 0; m < v.outcomes.size(); ++m) {
            const auto mm = static_cast<Eigen::Index>(m);
            os << ' ' << v.outcomes[m] << " within=" << fixed(v.within_reduction(mm), 1)
               << " between=" << fixed(v.between_reduction(mm), 1);
        }
        os << '\n';
    }
    if (!out.empty()) {
        man.output(out, j.dump(2) + "\n");
        man.write(out);
    }
    return 0;
}

struct ReportFlags {
    DataFlags data;
    FitFlags fit;
    std::string mi_json;
    std::string null_mi_json;
    std::string areas;
    std::string outcome;
    std::string out_dir;
    int threads = 1;
};

int cmd_report(const ReportFlags& f, std::ostream& os, Manifest& man) {
    const auto d = load_data(f.data, man);
    const auto spec = load_model(f.data.model, man);
    fs::create_directories(f.out_dir);
    auto path = [&](const std::string& name) { return (fs::path(f.out_dir) / name).string(); };
    MIOptions opts;
    opts.fit = f.fit.options();
    opts.threads = f.threads;

    MIFitResult null_mi;
    if (!f.null_mi_json.empty()) {
        man.input(f.null_mi_json);
        null_mi = mi_result_from_json(read_json_file(f.null_mi_json));
    } else {
        null_mi = fit_mi(d, null_model(spec), opts);
    }
    const auto decomposition = decompose(null_mi.sigma, null_mi.tau, null_mi.layout.outcomes);
    const std::string t3 = decomposition_table(decomposition);
    man.output(path("decomposition.txt"), t3);
    man.output(path("decomposition.json"), to_json(decomposition).dump(2) + "\n");

    MIFitResult mi;
    if (!f.mi_json.empty()) {
        man.input(f.mi_json);
        mi = mi_result_from_json(read_json_file(f.mi_json));
    } else {
        mi = fit_mi(d, spec, opts);
    }
    const auto tests = all_equality_tests(mi);
    const std::string t5 = coefficient_table(mi, tests);
    man.output(path("coefficients.txt"), t5);
    man.output(path("coefficients.csv"), coefficient_csv(mi, tests));

    // Residuals from the first plausible value.
    const auto prepared = prepare_analysis(d, spec);
    const auto D = build_design(prepared.data, spec, 1);
    const auto& F = mi.fits.front();
    if (!F.converged()) throw NumericalError("the first plausible value did not converge; no residuals", INFINITY);
    const auto E = eb_predict(F, D);
    const int m = f.outcome.empty() ? 0 : E.outcome_index(f.outcome);
    const auto& name = E.outcomes[static_cast<std::size_t>(m)];
    const auto cat = caterpillar_data(E, m);
    const auto qq = qq_data(E, m);
    man.output(path(name + "_caterpillar.csv"), caterpillar_csv(cat));
    man.output(path(name + "_caterpillar.svg"), caterpillar_svg(cat, "EB residuals with 95% intervals: " + name));
    man.output(path(name + "_qq.csv"), qq_csv(qq));
    man.output(path(name + "_qq.svg"), qq_svg(qq, "Normal probability plot of standardized EB residuals: " + name));
    std::string t6;
    if (!f.areas.empty()) {
        man.input(f.areas);
        const auto rows = territorial_summary(E, m, load_areas(f.areas));
        t6 = territorial_table(rows, name);
        man.output(path("territorial.txt"), t6);
        man.output(path("territorial.csv"), territorial_csv(rows));
    }
    man.write(path("coefficients.txt"));
    os << t3 << '\n' << t5 << '\n' << t6;
    return 0;
}

std::string error_json(const std::string& kind, const std::string& message) {
    return nlohmann::json{{"error", kind}, {"message", message}}.dump();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multivariate two-level models for plausible-value data"};
    app.set_version_flag("--version", std::string("mvmlm ") + kVersion);
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "cap on worker threads")->check(CLI::PositiveNumber);

    // simulate
    auto* sim = app.add_subcommand("simulate", "generate a sample-scale synthetic data set");
    std::string sim_config, sim_out;
    std::optional<std::uint64_t> sim_seed;
    sim->add_option("--config", sim_config, "simulation config JSON (default: built-in defaults)");
    sim->add_option("--out", sim_out, "output CSV")->required();
    sim->add_option("--seed", sim_seed, "override the config seed");

    // sample
    auto* smp = app.add_subcommand("sample", "simulate a frame and draw a two-stage PPS sample");
    SampleFlags sf;
    smp->add_option("--config", sf.config, "simulation config JSON with a frame section")->required();
    smp->add_option("--out", sf.out, "output CSV")->required();
    smp->add_option("--seed", sf.seed, "override the config seed");
    smp->add_option("--schools-per-stratum", sf.schools, "schools drawn per explicit stratum")->capture_default_str();
    smp->add_option("--classes-per-school", sf.classes, "classes drawn per school")
        ->check(CLI::Range(1, 2))
        ->capture_default_str();
    smp->add_option("--class-threshold", sf.threshold, "pseudo-class grouping threshold (students)")
        ->capture_default_str();

    // fit
    auto* fit = app.add_subcommand("fit", "ML fit on one plausible value");
    FitCmdFlags ff;
    add_data_flags(fit, ff.data);
    add_fit_flags(fit, ff.fit);
    fit->add_option("--out", ff.out, "fit JSON")->required();
    fit->add_option("--pv", ff.pv, "plausible value (1-based)")->capture_default_str();
    fit->add_option("--outcome", ff.outcome, "fit a univariate model for this outcome");
    fit->add_option("--weights", ff.weights, "weights CSV (univariate pseudo-likelihood)");
    fit->add_option("--weight-scaling", ff.scaling, "student weight scaling")
        ->check(CLI::IsMember({"none", "cluster"}))
        ->capture_default_str();

    // fit-mi
    auto* fmi = app.add_subcommand("fit-mi", "fit every plausible value and combine");
    MiCmdFlags mf;
    add_data_flags(fmi, mf.data);
    add_fit_flags(fmi, mf.fit);
    fmi->add_option("--out", mf.out, "MI result JSON")->required();
    fmi->add_option("--covariance", mf.covariance, "coefficient covariance for combining")
        ->check(CLI::IsMember({"robust", "model"}))
        ->capture_default_str();
    fmi->add_option("--weights", [](const CLI::results_t&) -> bool {
        throw ValidationError("weights are not supported with multiple imputation; fit single PVs with fit --weights");
    }, "not supported");

    // residuals
    auto* res = app.add_subcommand("residuals", "Empirical Bayes class residuals, caterpillar and QQ data");
    ResidualFlags rf;
    add_data_flags(res, rf.data);
    add_fit_flags(res, rf.fit);
    res->add_option("--fit", rf.fit_json, "fit JSON (default: fit the plausible value now)");
    res->add_option("--mi", rf.mi_json, "MI JSON; uses the fit of --pv");
    res->add_option("--pv", rf.pv, "plausible value (1-based)")->capture_default_str();
    res->add_flag("--mi-average", rf.mi_average, "average predictions over all imputations of --mi");
    res->add_option("--outcome", rf.outcome, "outcome to report (default: first)");
    res->add_option("--out-prefix", rf.out_prefix, "prefix for output files")->required();
    res->add_option("--areas", rf.areas, "CSV with class_id and area columns");
    res->add_option("--level", rf.level, "confidence level")->check(CLI::Range(0.5, 0.9999))->capture_default_str();

    // test-equality
    auto* teq = app.add_subcommand("test-equality", "D1 tests of equal coefficients across outcomes");
    std::string teq_mi, teq_cov, teq_out;
    std::vector<std::string> teq_terms;
    teq->add_option("--mi", teq_mi, "MI result JSON")->required();
    teq->add_option("--term", teq_terms, "term(s) to test (default: all)");
    teq->add_option("--covariance", teq_cov, "override the covariance used")->check(CLI::IsMember({"robust", "model"}));
    teq->add_option("--out", teq_out, "test results JSON");

    // decompose
    auto* dec = app.add_subcommand("decompose", "within/between correlation decomposition");
    std::string dec_fit, dec_mi, dec_full, dec_out;
    dec->add_option("--fit", dec_fit, "fit JSON");
    dec->add_option("--mi", dec_mi, "MI result JSON");
    dec->add_option("--full", dec_full, "fit or MI JSON of a larger model for variance explained");
    dec->add_option("--out", dec_out, "decomposition JSON");

    // report
    auto* rep = app.add_subcommand("report", "correlation, coefficient and residual tables with plots");
    ReportFlags pf;
    add_data_flags(rep, pf.data);
    add_fit_flags(rep, pf.fit);
    rep->add_option("--mi", pf.mi_json, "MI result of the model (default: fit now)");
    rep->add_option("--null-mi", pf.null_mi_json, "MI result of the null model (default: fit now)");
    rep->add_option("--areas", pf.areas, "CSV with class_id and area columns");
    rep->add_option("--outcome", pf.outcome, "outcome for residual plots (default: first)");
    rep->add_option("--out-dir", pf.out_dir, "output directory")->required();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    std::string command;
    try {
        if (!rev.empty()) rev.pop_back();  // program name
        app.parse(rev);
        for (auto* sc : app.get_subcommands()) command = sc->get_name();
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::CallForVersion& e) {
        out << e.what() << '\n';
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\nRun with --help for usage.\n";
        return 2;
    } catch (const Error& e) {
        err << error_json(e.kind(), e.what()) << '\n';
        return 1;
    }

    Manifest man(command, args);
    try {
        if (sim->parsed()) return cmd_simulate(sim_config, sim_out, sim_seed, out, man);
        if (smp->parsed()) return cmd_sample(sf, out, man);
        if (fit->parsed()) return cmd_fit(ff, out, man);
        if (fmi->parsed()) {
            mf.threads = threads;
            return cmd_fit_mi(mf, out, man);
        }
        if (res->parsed()) return cmd_residuals(rf, out, man);
        if (teq->parsed()) return cmd_test_equality(teq_mi, teq_terms, teq_cov, teq_out, out, man);
        if (dec->parsed()) return cmd_decompose(dec_fit, dec_mi, dec_full, dec_out, out, man);
        if (rep->parsed()) {
            pf.threads = threads;
            return cmd_report(pf, out, man);
        }
    } catch (const Error& e) {
        err << error_json(e.kind(), e.what()) << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        err << error_json("validation", e.what()) << '\n';
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        err << error_json("io", e.what()) << '\n';
        return 1;
    }
    err << "usage error: no subcommand\n";
    return 2;
}

int run_cli(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return run_cli(args, std::cout, std::cerr);
}

}  // namespace mvmlm
