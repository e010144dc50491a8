#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flatcal/linalg.hpp"
#include "flatcal/rng.hpp"
#include "flatcal/tape.hpp"

namespace flatcal {

// Learnable prompt: P token embeddings of dimension E.
struct Prompt {
    Mat tokens;  // P x E
};

// K class-name embeddings, fixed per task.
struct ClassSet {
    Mat embeddings;  // K x E
    std::vector<std::string> names;
};

// Synthetic differentiable text encoder: two-layer tanh network mapping
// (class embedding, mean-pooled prompt) to a unit-norm feature row.
class SynthEncoder {
public:
    SynthEncoder(int prompt_len, int embed_dim, int hidden_dim, int feature_dim,
                 uint64_t weight_seed);

    int prompt_len() const { return prompt_len_; }
    int embed_dim() const { return embed_dim_; }
    int hidden_dim() const { return hidden_dim_; }
    int feature_dim() const { return feature_dim_; }
    uint64_t weight_seed() const { return weight_seed_; }

    const Mat& w1() const { return w1_; }
    const Vec& b1() const { return b1_; }
    const Mat& w2() const { return w2_; }

    // Test-only hooks for curvature fixtures: rescale a layer.
    void scale_output_weights(double factor);
    void scale_hidden_weights(double factor);

    // row k = normalize(W2 tanh(W1 [mean(theta); c_k] + b1)); K x D
    Mat encode(const Mat& class_embeddings, const Mat& prompt_tokens) const;

    // same map without the final row normalization (probe fixture)
    Mat encode_prenorm(const Mat& class_embeddings, const Mat& prompt_tokens) const;

    // Same map recorded on a tape so gradients w.r.t. prompt/classes exist.
    Tape::Var encode(Tape& tape, Tape::Var class_embeddings, Tape::Var prompt_tokens) const;

private:
    int prompt_len_, embed_dim_, hidden_dim_, feature_dim_;
    uint64_t weight_seed_;
    Mat w1_;   // H x 2E
    Vec b1_;   // H
    Mat w2_;   // D x H
    Mat w1t_;  // cached transposes for the tape path
    Mat w2t_;
};

// Base image feature plus N unit-norm augmented views; view 0 is the
// unperturbed feature.
struct AugmentedViews {
    Vec base;
    std::vector<Vec> views;
    double sigma_aug = 0.0;
};

AugmentedViews augment(Rng& rng, const Vec& v, int n_views, double sigma_aug);

struct TaskParams {
    int n_classes = 10;
    int prompt_len = 4;
    int embed_dim = 16;
    int hidden_dim = 64;
    int feature_dim = 64;
    int n_test = 300;
    double sigma_offset = 0.35;
    double sigma_noise = 0.65;
    double sigma_shift = 0.3;
};

// Synthetic classification task: ground-truth prompt, offset zero-shot
// prompt, and test features drawn around the ground-truth class prototypes
// with additive noise and a fixed domain-shift direction.
struct SynthTask {
    TaskParams params;
    uint64_t seed = 0;
    SynthEncoder encoder;
    ClassSet classes;
    Prompt theta_star;
    Prompt theta_zs;
    std::vector<Vec> features;   // each unit norm
    std::vector<int> labels;     // in [0, K)
    Vec shift_direction;         // unit norm
    double zero_shot_accuracy = 0.0;
    int rejected_attempts = 0;
};

SynthTask gen_task(uint64_t seed, const TaskParams& params);

// JSON (de)serialization for cross-run task reuse; schema in docs/formats.md.
std::string task_to_json(const SynthTask& task);
SynthTask task_from_json(const std::string& json_text);

}  // namespace flatcal
