#include "flatcal/adapt.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "flatcal/optim.hpp"
#include "flatcal/probes.hpp"
#include "flatcal/tape.hpp"

namespace flatcal {

Method method_from_string(const std::string& s) {
    if (s == "tpt") return Method::tpt;
    if (s == "ctpt") return Method::ctpt;
    if (s == "otpt") return Method::otpt;
    if (s == "tpt-sam") return Method::tpt_sam;
    if (s == "fpp-init-tpt") return Method::fpp_init_tpt;
    if (s == "sequential") return Method::sequential;
    throw std::invalid_argument("unknown method: " + s);
}

std::string to_string(Method m) {
    switch (m) {
        case Method::tpt: return "tpt";
        case Method::ctpt: return "ctpt";
        case Method::otpt: return "otpt";
        case Method::tpt_sam: return "tpt-sam";
        case Method::fpp_init_tpt: return "fpp-init-tpt";
        case Method::sequential: return "sequential";
    }
    return "?";
}

SeqOrder seq_order_from_string(const std::string& s) {
    if (s == "ent-ent") return SeqOrder::ent_ent;
    if (s == "ent-reg") return SeqOrder::ent_reg;
    if (s == "reg-ent") return SeqOrder::reg_ent;
    throw std::invalid_argument("unknown sequential order: " + s);
}

std::string to_string(SeqOrder o) {
    switch (o) {
        case SeqOrder::ent_ent: return "ent-ent";
        case SeqOrder::ent_reg: return "ent-reg";
        case SeqOrder::reg_ent: return "reg-ent";
    }
    return "?";
}

void TTAConfig::validate() const {
    if (lambda_reg < 0.0) throw std::invalid_argument("tta: lambda_reg must be >= 0");
    if (lr < 0.0) throw std::invalid_argument("tta: lr must be >= 0");
    if (tau <= 0.0) throw std::invalid_argument("tta: tau must be > 0");
    if (n_views < 1) throw std::invalid_argument("tta: n_views must be >= 1");
    if (select_frac <= 0.0 || select_frac > 1.0)
        throw std::invalid_argument("tta: select_frac must be in (0, 1]");
    if (sigma_aug < 0.0) throw std::invalid_argument("tta: sigma_aug must be >= 0");
    if (sam_rho < 0.0) throw std::invalid_argument("tta: sam_rho must be >= 0");
    if (probe_rho <= 0.0) throw std::invalid_argument("tta: probe_rho must be > 0");
}

void FPPConfig::validate() const {
    if (iterations < 1) throw std::invalid_argument("fpp: iterations must be >= 1");
    if (sigma1 < 0.0 || sigma2 < 0.0) throw std::invalid_argument("fpp: sigmas must be >= 0");
    if (lr <= 0.0) throw std::invalid_argument("fpp: lr must be > 0");
    if (dynamic_lambda) {
        if (gamma1 <= 0.0 || gamma2 <= 0.0)
            throw std::invalid_argument("fpp: gammas must be > 0");
    } else if (fixed_lambda < 0.0) {
        throw std::invalid_argument("fpp: fixed_lambda must be >= 0");
    }
}

double FPPConfig::lambda_for(int n_classes) const {
    return dynamic_lambda ? fpp_lambda(gamma1, gamma2, n_classes) : fixed_lambda;
}

namespace {

struct GradEval {
    double loss = 0.0;
    Mat grad;
};

// loss + gradient w.r.t. the prompt of the Eq.-4 objective at theta
GradEval tta_grad(const SynthEncoder& enc, const Mat& c, const Mat& theta,
                  const AugmentedViews& views, const TTAConfig& cfg, Regularizer reg,
                  double lambda) {
    Tape tape;
    Tape::Var th = tape.param(theta);
    Tape::Var cv = tape.constant(c);
    Tape::Var t = enc.encode(tape, cv, th);
    Tape::Var loss = total_loss_t(tape, t, views, cfg.tau, cfg.select_frac, reg, lambda);
    GradEval out;
    out.loss = tape.scalar(loss);
    tape.backward(loss);
    out.grad = tape.grad(th);
    return out;
}

GradEval reg_grad(const SynthEncoder& enc, const Mat& c, const Mat& theta, Regularizer reg) {
    Tape tape;
    Tape::Var th = tape.param(theta);
    Tape::Var t = enc.encode(tape, tape.constant(c), th);
    Tape::Var loss = reg == Regularizer::ctpt ? ctpt_reg_t(tape, t) : otpt_reg_t(tape, t);
    GradEval out;
    out.loss = tape.scalar(loss);
    tape.backward(loss);
    out.grad = tape.grad(th);
    return out;
}

PredictionRecord make_record(const SynthEncoder& enc, const Mat& c, const Mat& theta,
                             const Vec& feature, int label, double tau) {
    ProbVector p = predict(enc.encode(c, theta), feature, tau);
    PredictionRecord r;
    r.probs = p.probs;
    r.confidence = p.confidence();
    r.predicted = p.predicted_class();
    r.label = label;
    return r;
}

LossFn em_loss_fn(const SynthEncoder& enc, const Mat& c, const AugmentedViews& views,
                  const TTAConfig& cfg) {
    return [&enc, &c, &views, &cfg](const Mat& theta) {
        GradEval g = tta_grad(enc, c, theta, views, cfg, Regularizer::none, 0.0);
        return LossEval{g.loss, std::move(g.grad)};
    };
}

bool finite_theta(const Mat& m) { return m.all_finite(); }

std::pair<Regularizer, double> method_reg(const TTAConfig& cfg) {
    switch (cfg.method) {
        case Method::ctpt: return {Regularizer::ctpt, cfg.lambda_reg};
        case Method::otpt: return {Regularizer::otpt, cfg.lambda_reg};
        default: return {Regularizer::none, 0.0};
    }
}

}  // namespace

AdaptOutcome tpt_step(const SynthEncoder& enc, const Mat& c, const Mat& theta_init,
                      const Vec& feature, int label, const TTAConfig& cfg, Rng& rng) {
    cfg.validate();
    AugmentedViews views = augment(rng, feature, cfg.n_views, cfg.sigma_aug);
    auto [reg, lambda] = method_reg(cfg);

    Mat theta = theta_init;
    bool failed = false;
    if (cfg.lr > 0.0) {
        GradEval g = tta_grad(enc, c, theta_init, views, cfg, reg, lambda);
        if (!std::isfinite(g.loss) || !finite_theta(g.grad)) {
            failed = true;
        } else if (cfg.method == Method::tpt_sam) {
            const double gn = frob_norm(g.grad);
            if (gn > 0.0) {
                Mat perturbed = theta_init + (cfg.sam_rho / gn) * g.grad;
                GradEval g2 = tta_grad(enc, c, perturbed, views, cfg, reg, lambda);
                if (!std::isfinite(g2.loss) || !finite_theta(g2.grad)) failed = true;
                else theta = theta_init - cfg.lr * g2.grad;
            }
        } else {
            theta = gd_step(theta_init, g.grad, cfg.lr);
        }
        if (!failed && !finite_theta(theta)) failed = true;
        if (failed) theta = theta_init;
    }

    AdaptOutcome out;
    out.failed = failed;
    out.record = make_record(enc, c, theta, views.base, label, cfg.tau);
    if (cfg.record_sharpness) {
        SharpnessReading s = sharpness(theta, em_loss_fn(enc, c, views, cfg), cfg.probe_rho);
        out.record.sharpness = s.value;
    }
    out.theta = std::move(theta);
    return out;
}

double equivalence_check(const SynthEncoder& enc, const Mat& c, const Mat& theta_zs,
                         const Vec& feature, Regularizer reg, double lambda, const TTAConfig& cfg,
                         Rng& rng) {
    if (reg == Regularizer::none) throw std::invalid_argument("equivalence_check: pick a regularizer");
    AugmentedViews views = augment(rng, feature, cfg.n_views, cfg.sigma_aug);

    // path A: one regularized step at lr = 1
    GradEval joint = tta_grad(enc, c, theta_zs, views, cfg, reg, lambda);
    Mat theta_a = theta_zs - joint.grad;

    // path B: shift the init along the regularizer gradient, then a plain EM
    // step whose gradient is evaluated back at theta_zs
    GradEval gr = reg_grad(enc, c, theta_zs, reg);
    Mat theta0_reg = theta_zs - lambda * gr.grad;
    GradEval gem = tta_grad(enc, c, theta_zs, views, cfg, Regularizer::none, 0.0);
    Mat theta_b = theta0_reg - gem.grad;

    double dev = 0.0;
    for (size_t i = 0; i < theta_a.a.size(); ++i)
        dev = std::max(dev, std::fabs(theta_a.a[i] - theta_b.a[i]));
    return dev;
}

FppResult fpp_pretrain(const SynthEncoder& enc, const Mat& c, const Mat& theta_zs,
                       const FPPConfig& cfg, Rng& rng) {
    cfg.validate();
    const int k = c.rows;
    FppResult res;
    res.lambda = cfg.lambda_for(k);
    Mat theta = theta_zs;
    AdamWState opt = AdamWState::init(theta.rows, theta.cols,
                                      Schedule{cfg.lr, cfg.iterations});
    // with both sigmas zero the flatness term is identically zero; dropping it
    // keeps the zero-noise fixed point exact instead of roundoff-driven
    const bool has_flat = (cfg.sigma1 > 0.0 || cfg.sigma2 > 0.0) && res.lambda > 0.0;
    for (int it = 0; it < cfg.iterations; ++it) {
        Tape tape;
        Tape::Var th = tape.param(theta);
        Tape::Var cv = tape.constant(c);
        Tape::Var loss = align_loss_t(tape, enc, cv, th, theta_zs, cfg.align_dist);
        if (has_flat) {
            Mat eps1 = rng.gaussian_mat(c.rows, c.cols, cfg.sigma1);
            Mat eps2 = rng.gaussian_mat(theta.rows, theta.cols, cfg.sigma2);
            Tape::Var flat = flat_loss_t(tape, enc, cv, th, eps1, eps2, cfg.flat_dist);
            loss = tape.add(loss, tape.scale(flat, res.lambda));
        }
        const double lv = tape.scalar(loss);
        res.loss_trace.push_back(lv);
        if (!std::isfinite(lv))
            throw std::runtime_error("fpp_pretrain: non-finite loss at iteration " +
                                     std::to_string(it));
        tape.backward(loss);
        theta = adamw_step(opt, theta, tape.grad(th));
        if (!finite_theta(theta))
            throw std::runtime_error("fpp_pretrain: non-finite prompt at iteration " +
                                     std::to_string(it));
    }
    res.theta = std::move(theta);
    return res;
}

AdaptOutcome sequential_ablation(const SynthEncoder& enc, const Mat& c, const Mat& theta_init,
                                 const Vec& feature, int label, SeqOrder order, Regularizer reg,
                                 double lambda, const TTAConfig& cfg, Rng& rng) {
    cfg.validate();
    if (reg == Regularizer::none)
        throw std::invalid_argument("sequential_ablation: pick a regularizer");
    AugmentedViews views = augment(rng, feature, cfg.n_views, cfg.sigma_aug);

    auto ent_step = [&](const Mat& th) {
        GradEval g = tta_grad(enc, c, th, views, cfg, Regularizer::none, 0.0);
        return g;
    };
    auto regl_step = [&](const Mat& th) {
        GradEval g = reg_grad(enc, c, th, reg);
        g.loss *= lambda;
        g.grad = lambda * g.grad;
        return g;
    };

    std::vector<std::function<GradEval(const Mat&)>> steps;
    switch (order) {
        case SeqOrder::ent_ent: steps = {ent_step, ent_step}; break;
        case SeqOrder::ent_reg: steps = {ent_step, regl_step}; break;
        case SeqOrder::reg_ent: steps = {regl_step, ent_step}; break;
    }

    Mat theta = theta_init;
    bool failed = false;
    if (cfg.lr > 0.0) {
        for (auto& step : steps) {
            GradEval g = step(theta);
            if (!std::isfinite(g.loss) || !finite_theta(g.grad)) {
                failed = true;
                break;
            }
            theta = gd_step(theta, g.grad, cfg.lr);
            if (!finite_theta(theta)) {
                failed = true;
                break;
            }
        }
        if (failed) theta = theta_init;
    }

    AdaptOutcome out;
    out.failed = failed;
    out.record = make_record(enc, c, theta, views.base, label, cfg.tau);
    if (cfg.record_sharpness) {
        SharpnessReading s = sharpness(theta, em_loss_fn(enc, c, views, cfg), cfg.probe_rho);
        out.record.sharpness = s.value;
    }
    out.theta = std::move(theta);
    return out;
}

RunResult run_one(const SynthTask& task, const TTAConfig& cfg, const FPPConfig* fpp,
                  uint64_t seed, int n_jobs) {
    cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();
    Rng base(seed);
    Mat theta_init = task.theta_zs.tokens;
    if (cfg.method == Method::fpp_init_tpt) {
        if (fpp == nullptr)
            throw std::invalid_argument("run_one: fpp-init-tpt needs an FPP config");
        Rng fr = base.substream(13);
        theta_init = fpp_pretrain(task.encoder, task.classes.embeddings, theta_init, *fpp, fr)
                         .theta;
    }

    const int n = static_cast<int>(task.features.size());
    std::vector<PredictionRecord> records(static_cast<size_t>(n));
    std::vector<char> failed(static_cast<size_t>(n), 0);
    Rng samples_root = base.substream(17);

    auto worker = [&](int lo, int hi) {
        for (int i = lo; i < hi; ++i) {
            Rng sr = samples_root.substream(static_cast<uint64_t>(i));
            const Vec& feat = task.features[static_cast<size_t>(i)];
            const int label = task.labels[static_cast<size_t>(i)];
            AdaptOutcome out =
                cfg.method == Method::sequential
                    ? sequential_ablation(task.encoder, task.classes.embeddings, theta_init, feat,
                                          label, cfg.seq_order, cfg.seq_reg, cfg.lambda_reg, cfg,
                                          sr)
                    : tpt_step(task.encoder, task.classes.embeddings, theta_init, feat, label,
                               cfg, sr);
            records[static_cast<size_t>(i)] = std::move(out.record);
            failed[static_cast<size_t>(i)] = out.failed ? 1 : 0;
        }
    };

    n_jobs = std::max(1, n_jobs);
    if (n_jobs == 1 || n < 2 * n_jobs) {
        worker(0, n);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n + n_jobs - 1) / n_jobs;
        for (int j = 0; j < n_jobs; ++j) {
            const int lo = j * chunk, hi = std::min(n, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(worker, lo, hi);
        }
        for (auto& t : pool) t.join();
    }

    RunResult res;
    res.seed = seed;
    res.log.records = std::move(records);
    for (char f : failed) res.n_failed += f;
    if (res.n_failed * 20 > n)
        throw std::runtime_error("run_one: more than 5% of samples failed (" +
                                 std::to_string(res.n_failed) + "/" + std::to_string(n) + ")");
    res.acc = accuracy(res.log);
    res.ece = flatcal::ece(res.log, 15);
    if (cfg.record_sharpness) {
        double s = 0.0;
        for (const auto& r : res.log.records) s += r.sharpness.value_or(0.0);
        res.mean_sharpness = s / static_cast<double>(n);
    }
    res.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    if (xs.size() < 2) return {m, 0.0};
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= static_cast<double>(xs.size() - 1);
    return {m, std::sqrt(v)};
}

ExperimentResult run_experiment(const SynthTask& task, const TTAConfig& cfg, const FPPConfig* fpp,
                                const std::vector<uint64_t>& seeds, int n_jobs) {
    if (seeds.empty()) throw std::invalid_argument("run_experiment: need >= 1 seed");
    ExperimentResult res;
    std::vector<double> accs, eces, sharps;
    for (uint64_t s : seeds) {
        RunResult r = run_one(task, cfg, fpp, s, n_jobs);
        accs.push_back(r.acc);
        eces.push_back(r.ece);
        sharps.push_back(r.mean_sharpness);
        res.runs.push_back(std::move(r));
    }
    std::tie(res.acc_mean, res.acc_std) = mean_std(accs);
    std::tie(res.ece_mean, res.ece_std) = mean_std(eces);
    std::tie(res.sharpness_mean, res.sharpness_std) = mean_std(sharps);
    return res;
}

std::string to_json(const RunResult& r, const TTAConfig& cfg) {
    nlohmann::json config = {{"method", to_string(cfg.method)},
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
    nlohmann::json j = {{"schema", "flatcal.run.v1"},
                        {"seed", r.seed},
                        {"config", config},
                        {"n_samples", r.log.size()},
                        {"n_failed", r.n_failed},
                        {"acc", r.acc},
                        {"ece", r.ece},
                        {"mean_sharpness", r.mean_sharpness}};
    return j.dump(2);
}

}  // namespace flatcal
