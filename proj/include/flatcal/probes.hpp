#pragma once

#include <functional>
#include <string>

#include "flatcal/encoder.hpp"
#include "flatcal/linalg.hpp"
#include "flatcal/rng.hpp"

namespace flatcal {

// One SAM-style sharpness probe: h = L(theta + rho g/||g||) - L(theta).
struct SharpnessReading {
    double value = 0.0;
    double rho = 0.0;
    double loss_at_theta = 0.0;
    double loss_at_perturbed = 0.0;
    bool degenerate = false;  // gradient was exactly zero; value forced to 0
};

struct LossEval {
    double loss = 0.0;
    Mat grad;
};
using LossFn = std::function<LossEval(const Mat&)>;

SharpnessReading sharpness(const Mat& theta, const LossFn& loss_fn, double rho);

enum class Wrt { classes, prompt };

// Monte-Carlo ||J||_F^2 accumulator: mean of dim * ||J u||^2 over unit
// Gaussian-direction probes u, with JVPs by central differences.
struct JacobianEstimate {
    double frob_norm = 0.0;
    double sq_mean = 0.0;    // estimate of ||J||_F^2
    double sq_stderr = 0.0;  // standard error of sq_mean
    int n_probe = 0;
};

JacobianEstimate jacobian_norm_detailed(const SynthEncoder& enc, const Mat& class_embeddings,
                                        const Mat& prompt_tokens, Wrt wrt, int n_probe, Rng& rng,
                                        bool normalized = true);

// normalized = false probes the pre-normalization branch, where the Jacobian
// is exactly linear in W2 (fixture for the scaling oracles)
double jacobian_norm(const SynthEncoder& enc, const Mat& class_embeddings,
                     const Mat& prompt_tokens, Wrt wrt, int n_probe, Rng& rng,
                     bool normalized = true);

struct CurvatureReport {
    double sigma1 = 0.0;
    double sigma2 = 0.0;
    int n_classes = 0;
    JacobianEstimate jac_classes;
    JacobianEstimate jac_prompt;
    double flat_mean = 0.0;  // Monte-Carlo E[L_flat]
    double flat_stderr = 0.0;
    int n_mc = 0;
    double predicted = 0.0;  // (s1^2 ||J_C||_F^2 + s2^2 ||J_th||_F^2) / (2K)
    double ratio = 0.0;      // flat_mean / predicted (0 when predicted == 0)
    double dir_second_mean = 0.0;  // directional second derivatives of the
    double dir_second_max = 0.0;   // perturbation map, central differences
    int n_dir = 0;
    bool band_checked = false;  // sigmas small enough for the quadratic-regime test
    bool failed = false;        // band_checked and ratio outside [0.5, 2]
};

CurvatureReport flatness_curvature_link(const SynthEncoder& enc, const Mat& class_embeddings,
                                        const Mat& prompt_tokens, double sigma1, double sigma2,
                                        int n_mc, Rng& rng);

std::string to_json(const CurvatureReport& report);

}  // namespace flatcal
