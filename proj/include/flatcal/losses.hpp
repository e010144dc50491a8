#pragma once

#include "flatcal/encoder.hpp"
#include "flatcal/linalg.hpp"
#include "flatcal/tape.hpp"

namespace flatcal {

enum class Regularizer { none, ctpt, otpt };

Regularizer regularizer_from_string(const std::string& s);
std::string to_string(Regularizer r);

// Temperature-scaled softmax over cosine similarities between a unit-norm
// image feature and unit-norm text feature rows.
struct ProbVector {
    Vec probs;
    double temperature = 1.0;
    int predicted_class() const;
    double confidence() const;
};

ProbVector predict(const Mat& text_features, const Vec& image_feature, double temperature);

// --- value-level losses (no tape) -------------------------------------------

double entropy_of(const Vec& probs);  // natural log, 0*log 0 := 0

// Entropy of the probability vector averaged over the lowest-entropy
// ceil(select_frac * N) views.
double em_loss(const Mat& text_features, const AugmentedViews& views, double temperature,
               double select_frac);

double ctpt_reg(const Mat& text_features);  // -(1/K) sum_k ||t_k - mu||
double otpt_reg(const Mat& text_features);  // ||T T^T - I||_F^2

double total_loss(const Mat& text_features, const AugmentedViews& views, double temperature,
                  double select_frac, Regularizer reg, double lambda);

// Appendix-style surrogates; both are functions of the dispersion statistic
// S(T) = K - K ||mu||^2 alone.
double disp_surrogate(const Mat& text_features);  // -||P T||_F^2
double orth_surrogate(const Mat& text_features);  // sum_{i<j} t_i . t_j
double s_stat(const Mat& text_features);

double flat_loss(const SynthEncoder& enc, const Mat& class_embeddings, const Mat& prompt_tokens,
                 const Mat& eps_classes, const Mat& eps_prompt);
double align_loss(const SynthEncoder& enc, const Mat& class_embeddings, const Mat& prompt_tokens,
                  const Mat& anchor_prompt_tokens);

// Dynamic flatness weight gamma1 + gamma2 / K.
double fpp_lambda(double gamma1, double gamma2, int n_classes);

// --- tape-level losses (differentiable w.r.t. prompt and classes) -----------

Tape::Var predict_t(Tape& tape, Tape::Var text_features, const Vec& image_feature,
                    double temperature);
Tape::Var em_loss_t(Tape& tape, Tape::Var text_features, const AugmentedViews& views,
                    double temperature, double select_frac);
Tape::Var ctpt_reg_t(Tape& tape, Tape::Var text_features);
Tape::Var otpt_reg_t(Tape& tape, Tape::Var text_features);
Tape::Var total_loss_t(Tape& tape, Tape::Var text_features, const AugmentedViews& views,
                       double temperature, double select_frac, Regularizer reg, double lambda);
Tape::Var disp_surrogate_t(Tape& tape, Tape::Var text_features);
Tape::Var orth_surrogate_t(Tape& tape, Tape::Var text_features);

enum class Distance { l2, cosine };
Distance distance_from_string(const std::string& s);
std::string to_string(Distance d);

// Flatness loss, Var inputs so gradients flow through both branches.
Tape::Var flat_loss_t(Tape& tape, const SynthEncoder& enc, Tape::Var class_embeddings,
                      Tape::Var prompt_tokens, const Mat& eps_classes, const Mat& eps_prompt,
                      Distance dist = Distance::cosine);
// Alignment loss; the anchor branch is a constant.
Tape::Var align_loss_t(Tape& tape, const SynthEncoder& enc, Tape::Var class_embeddings,
                       Tape::Var prompt_tokens, const Mat& anchor_prompt_tokens,
                       Distance dist = Distance::l2);

}  // namespace flatcal
