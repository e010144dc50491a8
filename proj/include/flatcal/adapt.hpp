#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flatcal/calibration.hpp"
#include "flatcal/encoder.hpp"
#include "flatcal/linalg.hpp"
#include "flatcal/losses.hpp"
#include "flatcal/rng.hpp"

namespace flatcal {

enum class Method { tpt, ctpt, otpt, tpt_sam, fpp_init_tpt, sequential };
Method method_from_string(const std::string& s);
std::string to_string(Method m);

enum class SeqOrder { ent_ent, ent_reg, reg_ent };
SeqOrder seq_order_from_string(const std::string& s);
std::string to_string(SeqOrder o);

struct TTAConfig {
    Method method = Method::tpt;
    double lambda_reg = 0.0;
    double lr = 0.005;
    double tau = 0.01;
    int n_views = 8;
    double select_frac = 0.1;
    double sigma_aug = 0.1;
    double sam_rho = 0.05;
    bool record_sharpness = false;
    double probe_rho = 0.05;
    SeqOrder seq_order = SeqOrder::ent_ent;
    Regularizer seq_reg = Regularizer::otpt;
    void validate() const;
};

struct FPPConfig {
    double gamma1 = 1.0;
    double gamma2 = 0.15;
    double sigma1 = 0.1414213562373095;   // sqrt(0.02)
    double sigma2 = 0.07071067811865475;  // sqrt(0.005)
    int iterations = 1000;
    double lr = 0.01;
    bool dynamic_lambda = true;  // gamma1 + gamma2 / K; else fixed_lambda
    double fixed_lambda = 0.0;
    Distance align_dist = Distance::l2;
    Distance flat_dist = Distance::cosine;
    void validate() const;
    double lambda_for(int n_classes) const;
};

struct AdaptOutcome {
    Mat theta;
    PredictionRecord record;
    bool failed = false;  // non-finite loss; prediction fell back to theta_init
};

// One augmented-view entropy-minimization step from theta_init; the prompt
// is never carried across samples.
AdaptOutcome tpt_step(const SynthEncoder& enc, const Mat& class_embeddings, const Mat& theta_init,
                      const Vec& feature, int label, const TTAConfig& cfg, Rng& rng);

// Regularized step vs shifted-init plain step at lr = 1; returns max abs
// entry deviation between the two adapted prompts.
double equivalence_check(const SynthEncoder& enc, const Mat& class_embeddings, const Mat& theta_zs,
                         const Vec& feature, Regularizer reg, double lambda, const TTAConfig& cfg,
                         Rng& rng);

struct FppResult {
    Mat theta;
    std::vector<double> loss_trace;  // combined loss per iteration, pre-update
    double lambda = 0.0;
};

FppResult fpp_pretrain(const SynthEncoder& enc, const Mat& class_embeddings, const Mat& theta_zs,
                       const FPPConfig& cfg, Rng& rng);

// Two single-loss gd steps in the named order (Tab.-6 style ablation).
AdaptOutcome sequential_ablation(const SynthEncoder& enc, const Mat& class_embeddings,
                                 const Mat& theta_init, const Vec& feature, int label,
                                 SeqOrder order, Regularizer reg, double lambda,
                                 const TTAConfig& cfg, Rng& rng);

struct RunResult {
    PredictionLog log;
    uint64_t seed = 0;
    double wall_time_s = 0.0;
    int n_failed = 0;
    double acc = 0.0;
    double ece = 0.0;
    double mean_sharpness = 0.0;  // 0 unless record_sharpness
};

struct ExperimentResult {
    std::vector<RunResult> runs;
    double acc_mean = 0.0, acc_std = 0.0;
    double ece_mean = 0.0, ece_std = 0.0;
    double sharpness_mean = 0.0, sharpness_std = 0.0;
};

// Per-sample RNG is keyed by (seed, sample index): results are independent
// of evaluation order and of n_jobs. theta_init defaults to the task's
// zero-shot prompt; fpp-init-tpt pretrains per seed before adapting.
RunResult run_one(const SynthTask& task, const TTAConfig& cfg, const FPPConfig* fpp,
                  uint64_t seed, int n_jobs = 1);

ExperimentResult run_experiment(const SynthTask& task, const TTAConfig& cfg, const FPPConfig* fpp,
                                const std::vector<uint64_t>& seeds, int n_jobs = 1);

std::string to_json(const RunResult& r, const TTAConfig& cfg);

// mean / sample std (n-1 denominator; 0 when n < 2)
std::pair<double, double> mean_std(const std::vector<double>& xs);

}  // namespace flatcal
