#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flatcal/adapt.hpp"
#include "flatcal/calibration.hpp"
#include "flatcal/encoder.hpp"
#include "flatcal/probes.hpp"
#include "flatcal/theory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flatcal;

namespace {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct Inconclusive : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string timestamp_utc() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void atomic_write(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
        out << content;
        if (!out.flush()) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

json load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key)) throw ConfigError("unknown config key: " + where + "." + key);
    }
}

template <typename T>
T field(const json& j, const std::string& key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for config key: " + where + "." + key);
    }
}

json mat_json(const Mat& m) {
    return json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.a}};
}

Mat mat_from_json(const json& j) {
    return Mat(j.at("rows").get<int>(), j.at("cols").get<int>(), j.at("data").get<Vec>());
}

// --- config sections ---------------------------------------------------------

struct TaskSection {
    TaskParams params;
    uint64_t seed = 1;
};

TaskSection parse_task(const json& j) {
    check_keys(j,
               {"seed", "n_classes", "prompt_len", "embed_dim", "hidden_dim", "feature_dim",
                "n_test", "sigma_offset", "sigma_noise", "sigma_shift"},
               "task");
    TaskSection t;
    t.seed = field<uint64_t>(j, "seed", 1, "task");
    t.params.n_classes = field(j, "n_classes", t.params.n_classes, "task");
    t.params.prompt_len = field(j, "prompt_len", t.params.prompt_len, "task");
    t.params.embed_dim = field(j, "embed_dim", t.params.embed_dim, "task");
    t.params.hidden_dim = field(j, "hidden_dim", t.params.hidden_dim, "task");
    t.params.feature_dim = field(j, "feature_dim", t.params.feature_dim, "task");
    t.params.n_test = field(j, "n_test", t.params.n_test, "task");
    t.params.sigma_offset = field(j, "sigma_offset", t.params.sigma_offset, "task");
    t.params.sigma_noise = field(j, "sigma_noise", t.params.sigma_noise, "task");
    t.params.sigma_shift = field(j, "sigma_shift", t.params.sigma_shift, "task");
    if (t.params.n_classes < 2) throw ConfigError("bad value for config key: task.n_classes");
    if (t.params.n_test < 1) throw ConfigError("bad value for config key: task.n_test");
    return t;
}

json echo_task(const TaskSection& t) {
    return json{{"seed", t.seed},
                {"n_classes", t.params.n_classes},
                {"prompt_len", t.params.prompt_len},
                {"embed_dim", t.params.embed_dim},
                {"hidden_dim", t.params.hidden_dim},
                {"feature_dim", t.params.feature_dim},
                {"n_test", t.params.n_test},
                {"sigma_offset", t.params.sigma_offset},
                {"sigma_noise", t.params.sigma_noise},
                {"sigma_shift", t.params.sigma_shift}};
}

TTAConfig parse_tta(const json& j) {
    check_keys(j,
               {"method", "lambda_reg", "lr", "tau", "n_views", "select_frac", "sigma_aug",
                "sam_rho", "record_sharpness", "probe_rho", "seq_order", "seq_reg"},
               "tta");
    TTAConfig cfg;
    try {
        cfg.method = method_from_string(field<std::string>(j, "method", "tpt", "tta"));
        cfg.seq_order =
            seq_order_from_string(field<std::string>(j, "seq_order", "ent-ent", "tta"));
        cfg.seq_reg = regularizer_from_string(field<std::string>(j, "seq_reg", "otpt", "tta"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("tta: ") + e.what());
    }
    cfg.lambda_reg = field(j, "lambda_reg", cfg.lambda_reg, "tta");
    cfg.lr = field(j, "lr", cfg.lr, "tta");
    cfg.tau = field(j, "tau", cfg.tau, "tta");
    cfg.n_views = field(j, "n_views", cfg.n_views, "tta");
    cfg.select_frac = field(j, "select_frac", cfg.select_frac, "tta");
    cfg.sigma_aug = field(j, "sigma_aug", cfg.sigma_aug, "tta");
    cfg.sam_rho = field(j, "sam_rho", cfg.sam_rho, "tta");
    cfg.record_sharpness = field(j, "record_sharpness", cfg.record_sharpness, "tta");
    cfg.probe_rho = field(j, "probe_rho", cfg.probe_rho, "tta");
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

json echo_tta(const TTAConfig& cfg) {
    return json{{"method", to_string(cfg.method)},
                {"lambda_reg", cfg.lambda_reg},
                {"lr", cfg.lr},
                {"tau", cfg.tau},
                {"n_views", cfg.n_views},
                {"select_frac", cfg.select_frac},
                {"sigma_aug", cfg.sigma_aug},
                {"sam_rho", cfg.sam_rho},
                {"record_sharpness", cfg.record_sharpness},
                {"probe_rho", cfg.probe_rho},
                {"seq_order", to_string(cfg.seq_order)},
                {"seq_reg", to_string(cfg.seq_reg)}};
}

FPPConfig parse_fpp(const json& j) {
    check_keys(j,
               {"gamma1", "gamma2", "sigma1", "sigma2", "iterations", "lr", "dynamic_lambda",
                "fixed_lambda", "align_dist", "flat_dist"},
               "fpp");
    FPPConfig cfg;
    cfg.gamma1 = field(j, "gamma1", cfg.gamma1, "fpp");
    cfg.gamma2 = field(j, "gamma2", cfg.gamma2, "fpp");
    cfg.sigma1 = field(j, "sigma1", cfg.sigma1, "fpp");
    cfg.sigma2 = field(j, "sigma2", cfg.sigma2, "fpp");
    cfg.iterations = field(j, "iterations", cfg.iterations, "fpp");
    cfg.lr = field(j, "lr", cfg.lr, "fpp");
    cfg.dynamic_lambda = field(j, "dynamic_lambda", cfg.dynamic_lambda, "fpp");
    cfg.fixed_lambda = field(j, "fixed_lambda", cfg.fixed_lambda, "fpp");
    try {
        cfg.align_dist =
            distance_from_string(field<std::string>(j, "align_dist", "l2", "fpp"));
        cfg.flat_dist =
            distance_from_string(field<std::string>(j, "flat_dist", "cosine", "fpp"));
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("fpp: ") + e.what());
    }
    return cfg;
}

json echo_fpp(const FPPConfig& cfg) {
    return json{{"gamma1", cfg.gamma1},
                {"gamma2", cfg.gamma2},
                {"sigma1", cfg.sigma1},
                {"sigma2", cfg.sigma2},
                {"iterations", cfg.iterations},
                {"lr", cfg.lr},
                {"dynamic_lambda", cfg.dynamic_lambda},
                {"fixed_lambda", cfg.fixed_lambda},
                {"align_dist", to_string(cfg.align_dist)},
                {"flat_dist", to_string(cfg.flat_dist)}};
}

std::vector<uint64_t> parse_seeds(const json& cfg, const std::string& seed_list) {
    std::vector<uint64_t> seeds;
    if (!seed_list.empty()) {
        std::stringstream ss(seed_list);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                size_t pos = 0;
                seeds.push_back(std::stoull(tok, &pos));
                if (pos != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw ConfigError("bad --seed-list entry: " + tok);
            }
        }
    } else if (cfg.contains("seeds")) {
        try {
            seeds = cfg.at("seeds").get<std::vector<uint64_t>>();
        } catch (const json::exception&) {
            throw ConfigError("bad value for config key: seeds");
        }
    }
    if (seeds.empty()) seeds = {1};
    return seeds;
}

// --- metric bundles ----------------------------------------------------------

json metrics_json(const PredictionLog& log, int n_classes, bool with_sharpness) {
    const double e = ece(log, 15);
    const double s = sce(log, 15, n_classes);
    json m = {{"acc", accuracy(log)},
              {"ece", e},
              {"sce", s},
              {"mce", mce(log, 15)},
              {"aece", aece(log, 15)},
              {"aurc", aurc(log)},
              {"mean_confidence", mean_confidence(log)}};
    // percentage-style presentation values (display only; all math stays raw)
    m["presentation"] = {{"acc_pct", 100.0 * accuracy(log)},
                         {"ece_pct", 100.0 * e},
                         {"sce_pct", 100.0 * s}};
    if (with_sharpness) {
        double sh = 0.0;
        for (const auto& r : log.records) sh += r.sharpness.value_or(0.0);
        m["mean_sharpness"] = sh / static_cast<double>(log.size());
    }
    return m;
}

// --- commands ----------------------------------------------------------------

int resolve_jobs(int jobs_flag) {
    if (jobs_flag > 0) return jobs_flag;
    if (const char* env = std::getenv("FLATCAL_JOBS")) {
        try {
            const int j = std::stoi(env);
            if (j > 0) return j;
        } catch (const std::exception&) {
        }
        throw ConfigError("bad FLATCAL_JOBS value: " + std::string(env));
    }
    return 1;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir, int) {
    json cfg = load_config(config_path);
    check_keys(cfg, {"task", "fpp", "seed"}, "config");
    TaskSection task_cfg = parse_task(cfg.value("task", json::object()));
    FPPConfig fpp = parse_fpp(cfg.value("fpp", json::object()));
    const uint64_t seed = field<uint64_t>(cfg, "seed", 1, "config");

    SynthTask task = gen_task(task_cfg.seed, task_cfg.params);
    Rng rng(seed);
    FppResult res = fpp_pretrain(task.encoder, task.classes.embeddings, task.theta_zs.tokens,
                                 fpp, rng);

    json artifact = {{"schema", "flatcal.prompt.v1"},
                     {"theta", mat_json(res.theta)},
                     {"lambda", res.lambda},
                     {"final_loss", res.loss_trace.back()},
                     {"seed", seed},
                     {"config", {{"task", echo_task(task_cfg)}, {"fpp", echo_fpp(fpp)}}},
                     {"metadata", {{"timestamp", timestamp_utc()}}}};
    atomic_write(fs::path(out_dir) / "theta_fpp.json", artifact.dump(2) + "\n");

    std::ostringstream csv;
    csv.precision(17);
    csv << "schema_version,flatcal.losstrace.csv.v1\n";
    csv << "iteration,loss\n";
    for (size_t i = 0; i < res.loss_trace.size(); ++i)
        csv << i << ',' << res.loss_trace[i] << '\n';
    atomic_write(fs::path(out_dir) / "loss_trace.csv", csv.str());

    std::cout << "pretrain: lambda=" << res.lambda << " final_loss=" << res.loss_trace.back()
              << " -> " << (fs::path(out_dir) / "theta_fpp.json").string() << "\n";
    return 0;
}

int cmd_adapt(const std::string& config_path, const std::string& out_dir,
              const std::string& seed_list, int jobs) {
    json cfg = load_config(config_path);
    check_keys(cfg, {"task", "tta", "fpp", "seeds", "artifact"}, "config");
    TaskSection task_cfg = parse_task(cfg.value("task", json::object()));
    TTAConfig tta = parse_tta(cfg.value("tta", json::object()));
    FPPConfig fpp = parse_fpp(cfg.value("fpp", json::object()));
    const std::vector<uint64_t> seeds = parse_seeds(cfg, seed_list);

    SynthTask task = gen_task(task_cfg.seed, task_cfg.params);
    if (cfg.contains("artifact")) {
        const std::string path = field<std::string>(cfg, "artifact", "", "config");
        if (!fs::exists(path)) throw MissingArtifact("missing artifact: " + path);
        std::ifstream in(path, std::ios::binary);
        json art = json::parse(in);
        task.theta_zs.tokens = mat_from_json(art.at("theta"));
        if (tta.method == Method::fpp_init_tpt) tta.method = Method::tpt;
    }

    ExperimentResult res =
        run_experiment(task, tta, tta.method == Method::fpp_init_tpt ? &fpp : nullptr, seeds,
                       jobs);

    json per_seed = json::array();
    for (const RunResult& r : res.runs) {
        json m = metrics_json(r.log, task.params.n_classes, tta.record_sharpness);
        m["seed"] = r.seed;
        m["n_failed"] = r.n_failed;
        per_seed.push_back(m);
        atomic_write(fs::path(out_dir) / ("log_seed" + std::to_string(r.seed) + ".ndjson"),
                     log_to_ndjson(r.log));
        atomic_write(
            fs::path(out_dir) / ("reliability_seed" + std::to_string(r.seed) + ".csv"),
            reliability_to_csv(reliability(r.log, 15)));
    }
    json aggregate = {{"acc_mean", res.acc_mean},       {"acc_std", res.acc_std},
                      {"ece_mean", res.ece_mean},       {"ece_std", res.ece_std},
                      {"sharpness_mean", res.sharpness_mean},
                      {"sharpness_std", res.sharpness_std},
                      {"presentation",
                       {{"acc_pct", 100.0 * res.acc_mean}, {"ece_pct", 100.0 * res.ece_mean}}}};
    json report = {{"schema", "flatcal.adapt.v1"},
                   {"zero_shot_accuracy", task.zero_shot_accuracy},
                   {"per_seed", per_seed},
                   {"aggregate", aggregate},
                   {"config",
                    {{"task", echo_task(task_cfg)},
                     {"tta", echo_tta(tta)},
                     {"fpp", echo_fpp(fpp)},
                     {"seeds", seeds}}},
                   {"metadata", {{"timestamp", timestamp_utc()}}}};
    atomic_write(fs::path(out_dir) / "metrics.json", report.dump(2) + "\n");
    std::cout << "adapt: acc=" << 100.0 * res.acc_mean << "% ece=" << 100.0 * res.ece_mean
              << " (x100 scale) over " << seeds.size() << " seed(s)\n";
    return 0;
}

int cmd_verify(const std::string& config_path, const std::string& out_dir, int jobs) {
    json cfg = load_config(config_path);
    check_keys(cfg, {"theorem", "equivalence", "curvature"}, "config");
    json report = {{"schema", "flatcal.verify.v1"}};
    bool all_pass = true;

    // Eq. 7-8: regularized step == shifted-init plain step at lr = 1
    {
        json sec = cfg.value("equivalence", json::object());
        check_keys(sec, {"task", "tta", "n_trials", "seed", "lambda_ctpt", "lambda_otpt"},
                   "equivalence");
        TaskSection task_cfg = parse_task(sec.value("task", json::object()));
        TTAConfig tta = parse_tta(sec.value("tta", json::object()));
        const int n_trials = field(sec, "n_trials", 100, "equivalence");
        const uint64_t seed = field<uint64_t>(sec, "seed", 1, "equivalence");
        const double l_ctpt = field(sec, "lambda_ctpt", 50.0, "equivalence");
        const double l_otpt = field(sec, "lambda_otpt", 0.5, "equivalence");
        if (n_trials < 1) throw ConfigError("bad value for config key: equivalence.n_trials");

        SynthTask task = gen_task(task_cfg.seed, task_cfg.params);
        double worst = 0.0;
        for (int i = 0; i < n_trials; ++i) {
            const Regularizer reg = i % 2 == 0 ? Regularizer::ctpt : Regularizer::otpt;
            const double lambda = reg == Regularizer::ctpt ? l_ctpt : l_otpt;
            Rng rng(seed + static_cast<uint64_t>(i));
            const size_t s = static_cast<size_t>(i) % task.features.size();
            worst = std::max(worst, equivalence_check(task.encoder, task.classes.embeddings,
                                                      task.theta_zs.tokens, task.features[s],
                                                      reg, lambda, tta, rng));
        }
        const bool pass = worst < 1e-12;
        all_pass = all_pass && pass;
        report["equivalence"] = {{"max_deviation", worst},
                                 {"n_trials", n_trials},
                                 {"threshold", 1e-12},
                                 {"pass", pass}};
    }

    // Theorem 1 entropy expansion
    {
        json sec = cfg.value("theorem", json::object());
        check_keys(sec, {"reg", "n_classes", "d_list", "family_size", "n_mc", "seed"},
                   "theorem");
        Surrogate reg;
        try {
            reg = surrogate_from_string(field<std::string>(sec, "reg", "disp", "theorem"));
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("theorem: ") + e.what());
        }
        const int k = field(sec, "n_classes", 10, "theorem");
        const std::vector<int> d_list =
            field<std::vector<int>>(sec, "d_list", {64, 128, 256, 512}, "theorem");
        const int family_size = field(sec, "family_size", 20, "theorem");
        const int n_mc = field(sec, "n_mc", 200000, "theorem");
        const uint64_t seed = field<uint64_t>(sec, "seed", 1, "theorem");

        Rng rng(seed);
        Theorem1Report th;
        try {
            th = verify_theorem1(reg, k, d_list, family_size, n_mc, rng, jobs);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("theorem: ") + e.what());
        }
        atomic_write(fs::path(out_dir) / "theorem1.csv", to_csv(th));
        atomic_write(fs::path(out_dir) / "theorem1.json", to_json(th) + "\n");
        if (th.inconclusive)
            throw Inconclusive("theorem check inconclusive: increase n_mc to about " +
                               std::to_string(th.suggested_n_mc));
        const int biggest_d = d_list.back();
        const double residual_bound = 5.0 / (static_cast<double>(k) * biggest_d);
        const bool pass = th.rank_correlation.back() >= 0.95 &&
                          th.max_residual.back() < residual_bound &&
                          th.exponent >= -1.9 && th.exponent <= -1.1;
        all_pass = all_pass && pass;
        report["theorem"] = {{"rank_correlation", th.rank_correlation.back()},
                             {"max_residual", th.max_residual.back()},
                             {"residual_bound", residual_bound},
                             {"exponent", th.exponent},
                             {"exponent_band", {-1.9, -1.1}},
                             {"pass", pass}};
    }

    // Appendix-B curvature link: quadratic sigma scaling
    {
        json sec = cfg.value("curvature", json::object());
        check_keys(sec, {"task", "sigma1", "sigma2", "n_mc", "halvings", "seed"}, "curvature");
        TaskSection task_cfg = parse_task(sec.value("task", json::object()));
        const double sigma1 = field(sec, "sigma1", 1e-3, "curvature");
        const double sigma2 = field(sec, "sigma2", 1e-3, "curvature");
        const int n_mc = field(sec, "n_mc", 2000, "curvature");
        const int halvings = field(sec, "halvings", 3, "curvature");
        const uint64_t seed = field<uint64_t>(sec, "seed", 1, "curvature");
        if (halvings < 1) throw ConfigError("bad value for config key: curvature.halvings");

        SynthTask task = gen_task(task_cfg.seed, task_cfg.params);
        bool pass = true;
        json ratios = json::array();
        for (int h = 0; h < halvings; ++h) {
            const double s1 = sigma1 / (1 << h), s2 = sigma2 / (1 << h);
            Rng ra(seed), rb(seed);  // paired draws: ratio is nearly noise-free
            CurvatureReport big = flatness_curvature_link(
                task.encoder, task.classes.embeddings, task.theta_zs.tokens, s1, s2, n_mc, ra);
            CurvatureReport half = flatness_curvature_link(
                task.encoder, task.classes.embeddings, task.theta_zs.tokens, s1 / 2, s2 / 2,
                n_mc, rb);
            const double ratio = big.flat_mean / half.flat_mean;
            ratios.push_back(ratio);
            if (!(ratio >= 3.5 && ratio <= 4.5)) pass = false;
            if (h == 0) {
                if (big.band_checked && big.failed) pass = false;
                atomic_write(fs::path(out_dir) / "curvature.json", to_json(big) + "\n");
            }
        }
        all_pass = all_pass && pass;
        report["curvature"] = {{"halving_ratios", ratios},
                               {"ratio_band", {3.5, 4.5}},
                               {"pass", pass}};
    }

    report["all_pass"] = all_pass;
    report["config"] = cfg;
    report["metadata"] = {{"timestamp", timestamp_utc()}};
    atomic_write(fs::path(out_dir) / "verify.json", report.dump(2) + "\n");
    std::cout << "verify: " << (all_pass ? "all checks passed" : "CHECK FAILURES") << " -> "
              << (fs::path(out_dir) / "verify.json").string() << "\n";
    return all_pass ? 0 : 1;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir,
              const std::string& seed_list, int jobs) {
    json cfg = load_config(config_path);
    check_keys(cfg, {"task", "tta", "fpp", "seeds", "sweep"}, "config");
    TaskSection task_cfg = parse_task(cfg.value("task", json::object()));
    TTAConfig tta = parse_tta(cfg.value("tta", json::object()));
    FPPConfig fpp = parse_fpp(cfg.value("fpp", json::object()));
    const std::vector<uint64_t> seeds = parse_seeds(cfg, seed_list);

    if (!cfg.contains("sweep")) throw ConfigError("missing config key: sweep");
    json sw = cfg.at("sweep");
    check_keys(sw, {"param", "values"}, "sweep");
    const std::string param = field<std::string>(sw, "param", "", "sweep");
    if (!sw.contains("values") || !sw.at("values").is_array() || sw.at("values").empty())
        throw ConfigError("bad value for config key: sweep.values");
    const json values = sw.at("values");

    const std::set<std::string> known = {"fpp.sigma_scale", "fpp.lambda", "tta.lr",
                                         "tta.lambda_reg", "tta.tau"};
    if (!known.count(param)) throw ConfigError("unknown sweep parameter: " + param);

    SynthTask task = gen_task(task_cfg.seed, task_cfg.params);

    std::ostringstream csv;
    csv.precision(17);
    csv << "schema_version,flatcal.sweep.csv.v1\n";
    csv << "param,value,kind,seed,acc,acc_std,ece,ece_std,sharpness\n";
    for (const json& v : values) {
        TTAConfig vt = tta;
        FPPConfig vf = fpp;
        std::string label;
        if (param == "fpp.sigma_scale") {
            const double s = v.get<double>();
            vf.sigma1 *= std::sqrt(s);
            vf.sigma2 *= std::sqrt(s);
            label = std::to_string(s);
        } else if (param == "fpp.lambda") {
            if (v.is_string() && v.get<std::string>() == "dynamic") {
                vf.dynamic_lambda = true;
                label = "dynamic";
            } else {
                vf.dynamic_lambda = false;
                vf.fixed_lambda = v.get<double>();
                label = std::to_string(vf.fixed_lambda);
            }
        } else if (param == "tta.lr") {
            vt.lr = v.get<double>();
            label = std::to_string(vt.lr);
        } else if (param == "tta.lambda_reg") {
            vt.lambda_reg = v.get<double>();
            label = std::to_string(vt.lambda_reg);
        } else {  // tta.tau
            vt.tau = v.get<double>();
            label = std::to_string(vt.tau);
        }
        try {
            vt.validate();
            vf.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("sweep value rejected: ") + e.what());
        }
        ExperimentResult res = run_experiment(
            task, vt, vt.method == Method::fpp_init_tpt ? &vf : nullptr, seeds, jobs);
        for (const RunResult& r : res.runs)
            csv << param << ',' << label << ",run," << r.seed << ',' << r.acc << ",0," << r.ece
                << ",0," << r.mean_sharpness << '\n';
        csv << param << ',' << label << ",aggregate,all," << res.acc_mean << ','
            << res.acc_std << ',' << res.ece_mean << ',' << res.ece_std << ','
            << res.sharpness_mean << '\n';
    }
    atomic_write(fs::path(out_dir) / "sweep.csv", csv.str());
    std::cout << "sweep: " << values.size() << " value(s) x " << seeds.size() << " seed(s) -> "
              << (fs::path(out_dir) / "sweep.csv").string() << "\n";
    return 0;
}

int cmd_report(const std::string& config_path, const std::string& out_dir, int) {
    json cfg = load_config(config_path);
    check_keys(cfg, {"log", "n_classes", "bins"}, "config");
    const std::string log_path = field<std::string>(cfg, "log", "", "config");
    const int n_classes = field(cfg, "n_classes", 10, "config");
    const int bins = field(cfg, "bins", 15, "config");
    if (log_path.empty()) throw ConfigError("missing config key: log");
    if (bins < 1) throw ConfigError("bad value for config key: bins");
    if (!fs::exists(log_path)) throw MissingArtifact("missing artifact: " + log_path);

    std::ifstream in(log_path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    PredictionLog log = log_from_ndjson(buf.str());
    try {
        log.validate(n_classes);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("log failed validation: ") + e.what());
    }

    bool with_sharpness = !log.records.empty();
    for (const auto& r : log.records) with_sharpness = with_sharpness && r.sharpness.has_value();
    json m = metrics_json(log, n_classes, with_sharpness);
    json report = {{"schema", "flatcal.report.v1"},
                   {"n_records", log.size()},
                   {"metrics", m},
                   {"config", cfg},
                   {"metadata", {{"timestamp", timestamp_utc()}}}};
    atomic_write(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
    atomic_write(fs::path(out_dir) / "reliability.csv",
                 reliability_to_csv(reliability(log, bins)));

    // x100 presentation values for table parity
    std::cout << "records " << log.size() << "\n";
    std::cout << "acc%   " << 100.0 * m["acc"].get<double>() << "\n";
    std::cout << "ece%   " << 100.0 * m["ece"].get<double>() << "\n";
    std::cout << "sce%   " << 100.0 * m["sce"].get<double>() << "\n";
    std::cout << "mce    " << m["mce"].get<double>() << "\n";
    std::cout << "aece   " << m["aece"].get<double>() << "\n";
    std::cout << "aurc   " << m["aurc"].get<double>() << "\n";
    if (with_sharpness) std::cout << "sharp  " << m["mean_sharpness"].get<double>() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flatcal: flatness-aware prompt pretraining laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", seed_list;
    int jobs = 0;
    app.add_option("--config", config_path, "configuration file (JSON)");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed-list", seed_list, "comma-separated seeds (overrides config)");
    app.add_option("--jobs", jobs, "worker threads (or FLATCAL_JOBS)");

    CLI::App* pretrain = app.add_subcommand("pretrain", "run FPP pretraining");
    CLI::App* adapt = app.add_subcommand("adapt", "run test-time adaptation");
    CLI::App* verify = app.add_subcommand("verify", "run the analysis checks");
    CLI::App* sweep = app.add_subcommand("sweep", "sweep one hyperparameter");
    CLI::App* report = app.add_subcommand("report", "metrics from a prediction log");
    for (CLI::App* sub : {pretrain, adapt, verify, sweep, report}) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        if (config_path.empty()) throw ConfigError("--config is required");
        const int n_jobs = resolve_jobs(jobs);
        if (pretrain->parsed()) return cmd_pretrain(config_path, out_dir, n_jobs);
        if (adapt->parsed()) return cmd_adapt(config_path, out_dir, seed_list, n_jobs);
        if (verify->parsed()) return cmd_verify(config_path, out_dir, n_jobs);
        if (sweep->parsed()) return cmd_sweep(config_path, out_dir, seed_list, n_jobs);
        if (report->parsed()) return cmd_report(config_path, out_dir, n_jobs);
        throw ConfigError("no subcommand");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const MissingArtifact& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const Inconclusive& e) {
        std::cerr << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
