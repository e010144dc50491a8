#include "flatcal/probes.hpp"

#include <json.hpp>

#include <cmath>
#include <stdexcept>

#include "flatcal/losses.hpp"

namespace flatcal {

SharpnessReading sharpness(const Mat& theta, const LossFn& loss_fn, double rho) {
    if (rho <= 0.0) throw std::invalid_argument("sharpness: rho must be > 0");
    LossEval base = loss_fn(theta);
    check_same_shape(theta, base.grad, "sharpness");
    SharpnessReading r;
    r.rho = rho;
    r.loss_at_theta = base.loss;
    const double gn = frob_norm(base.grad);
    if (gn == 0.0) {
        r.loss_at_perturbed = base.loss;
        r.degenerate = true;
        return r;
    }
    Mat perturbed = theta + (rho / gn) * base.grad;
    LossEval up = loss_fn(perturbed);
    if (!std::isfinite(up.loss))
        throw std::runtime_error("sharpness: non-finite loss at perturbed point");
    r.loss_at_perturbed = up.loss;
    r.value = up.loss - base.loss;
    return r;
}

namespace {

// ||J u||^2 for a unit direction u on the chosen input block, central-difference JVP.
double jvp_sq(const SynthEncoder& enc, const Mat& c, const Mat& theta, Wrt wrt, const Mat& u,
              bool normalized) {
    const double h = 1e-5;
    auto eval = [&](const Mat& cc, const Mat& tt) {
        return normalized ? enc.encode(cc, tt) : enc.encode_prenorm(cc, tt);
    };
    Mat plus, minus;
    if (wrt == Wrt::classes) {
        plus = eval(c + h * u, theta);
        minus = eval(c + (-h) * u, theta);
    } else {
        plus = eval(c, theta + h * u);
        minus = eval(c, theta + (-h) * u);
    }
    double sq = 0.0;
    for (size_t i = 0; i < plus.a.size(); ++i) {
        const double d = (plus.a[i] - minus.a[i]) / (2.0 * h);
        sq += d * d;
    }
    return sq;
}

Mat unit_gaussian_dir(Rng& rng, int rows, int cols) {
    Mat g = rng.gaussian_mat(rows, cols);
    const double n = frob_norm(g);
    if (n == 0.0) return unit_gaussian_dir(rng, rows, cols);
    return (1.0 / n) * g;
}

}  // namespace

JacobianEstimate jacobian_norm_detailed(const SynthEncoder& enc, const Mat& class_embeddings,
                                        const Mat& prompt_tokens, Wrt wrt, int n_probe, Rng& rng,
                                        bool normalized) {
    if (n_probe < 1) throw std::invalid_argument("jacobian_norm: n_probe must be >= 1");
    const int rows = wrt == Wrt::classes ? class_embeddings.rows : prompt_tokens.rows;
    const int cols = wrt == Wrt::classes ? class_embeddings.cols : prompt_tokens.cols;
    const double dim = static_cast<double>(rows) * cols;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n_probe; ++i) {
        Mat u = unit_gaussian_dir(rng, rows, cols);
        const double s = dim * jvp_sq(enc, class_embeddings, prompt_tokens, wrt, u, normalized);
        sum += s;
        sumsq += s * s;
    }
    JacobianEstimate e;
    e.n_probe = n_probe;
    e.sq_mean = sum / n_probe;
    if (n_probe > 1) {
        const double var = (sumsq - sum * sum / n_probe) / (n_probe - 1);
        e.sq_stderr = std::sqrt(std::max(var, 0.0) / n_probe);
    }
    e.frob_norm = std::sqrt(std::max(e.sq_mean, 0.0));
    return e;
}

double jacobian_norm(const SynthEncoder& enc, const Mat& class_embeddings,
                     const Mat& prompt_tokens, Wrt wrt, int n_probe, Rng& rng, bool normalized) {
    return jacobian_norm_detailed(enc, class_embeddings, prompt_tokens, wrt, n_probe, rng,
                                  normalized)
        .frob_norm;
}

CurvatureReport flatness_curvature_link(const SynthEncoder& enc, const Mat& class_embeddings,
                                        const Mat& prompt_tokens, double sigma1, double sigma2,
                                        int n_mc, Rng& rng) {
    if (sigma1 < 0.0 || sigma2 < 0.0)
        throw std::invalid_argument("flatness_curvature_link: sigmas must be >= 0");
    if (n_mc < 100) throw std::invalid_argument("flatness_curvature_link: n_mc must be >= 100");

    CurvatureReport rep;
    rep.sigma1 = sigma1;
    rep.sigma2 = sigma2;
    rep.n_classes = class_embeddings.rows;
    rep.n_mc = n_mc;

    Rng jc_rng = rng.substream(1);
    Rng jp_rng = rng.substream(2);
    rep.jac_classes =
        jacobian_norm_detailed(enc, class_embeddings, prompt_tokens, Wrt::classes, 256, jc_rng);
    rep.jac_prompt =
        jacobian_norm_detailed(enc, class_embeddings, prompt_tokens, Wrt::prompt, 256, jp_rng);

    // per-draw substreams: estimate is independent of evaluation order
    double sum = 0.0, sumsq = 0.0;
    Rng mc = rng.substream(3);
    for (int i = 0; i < n_mc; ++i) {
        Rng draw = mc.substream(static_cast<uint64_t>(i));
        Mat e1 = draw.gaussian_mat(class_embeddings.rows, class_embeddings.cols, sigma1);
        Mat e2 = draw.gaussian_mat(prompt_tokens.rows, prompt_tokens.cols, sigma2);
        const double l = flat_loss(enc, class_embeddings, prompt_tokens, e1, e2);
        sum += l;
        sumsq += l * l;
    }
    rep.flat_mean = sum / n_mc;
    const double var = (sumsq - sum * sum / n_mc) / (n_mc - 1);
    rep.flat_stderr = std::sqrt(std::max(var, 0.0) / n_mc);

    rep.predicted = (sigma1 * sigma1 * rep.jac_classes.sq_mean +
                     sigma2 * sigma2 * rep.jac_prompt.sq_mean) /
                    (2.0 * rep.n_classes);
    rep.ratio = rep.predicted > 0.0 ? rep.flat_mean / rep.predicted : 0.0;

    // directional curvature of the perturbation map via second differences
    Rng dir = rng.substream(4);
    const double h = 1e-4;
    rep.n_dir = 32;
    for (int i = 0; i < rep.n_dir; ++i) {
        Mat u1 = unit_gaussian_dir(dir, class_embeddings.rows, class_embeddings.cols);
        Mat u2 = unit_gaussian_dir(dir, prompt_tokens.rows, prompt_tokens.cols);
        const double lp = flat_loss(enc, class_embeddings, prompt_tokens, h * u1, h * u2);
        const double lm =
            flat_loss(enc, class_embeddings, prompt_tokens, (-h) * u1, (-h) * u2);
        const double dd = (lp + lm) / (h * h);  // f(0) = 0 by construction
        rep.dir_second_mean += dd;
        rep.dir_second_max = std::max(rep.dir_second_max, dd);
    }
    rep.dir_second_mean /= rep.n_dir;

    rep.band_checked = sigma1 > 0.0 && sigma1 <= 1e-3 && sigma2 > 0.0 && sigma2 <= 1e-3;
    if (rep.band_checked && (rep.ratio < 0.5 || rep.ratio > 2.0)) rep.failed = true;
    return rep;
}

std::string to_json(const CurvatureReport& rep) {
    nlohmann::json jc = {{"frob_norm", rep.jac_classes.frob_norm},
                         {"sq_mean", rep.jac_classes.sq_mean},
                         {"sq_stderr", rep.jac_classes.sq_stderr},
                         {"n_probe", rep.jac_classes.n_probe}};
    nlohmann::json jp = {{"frob_norm", rep.jac_prompt.frob_norm},
                         {"sq_mean", rep.jac_prompt.sq_mean},
                         {"sq_stderr", rep.jac_prompt.sq_stderr},
                         {"n_probe", rep.jac_prompt.n_probe}};
    nlohmann::json j = {{"schema", "flatcal.curvature.v1"},
                        {"sigma1", rep.sigma1},
                        {"sigma2", rep.sigma2},
                        {"n_classes", rep.n_classes},
                        {"jacobian_classes", jc},
                        {"jacobian_prompt", jp},
                        {"flat_mean", rep.flat_mean},
                        {"flat_stderr", rep.flat_stderr},
                        {"n_mc", rep.n_mc},
                        {"predicted", rep.predicted},
                        {"ratio", rep.ratio},
                        {"dir_second_mean", rep.dir_second_mean},
                        {"dir_second_max", rep.dir_second_max},
                        {"n_dir", rep.n_dir},
                        {"band_checked", rep.band_checked},
                        {"failed", rep.failed}};
    return j.dump(2);
}

}  // namespace flatcal
