#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "flatcal/linalg.hpp"

namespace flatcal {

// Cosine decay from base_lr at step 0 to 0 at total_steps.
struct Schedule {
    double base_lr = 0.0;
    int total_steps = 1;

    double lr_at(int step) const {
        if (step < 0) throw std::invalid_argument("Schedule: negative step");
        if (step >= total_steps) return 0.0;
        return base_lr * 0.5 *
               (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
    }
};

inline Mat gd_step(const Mat& theta, const Mat& gradient, double lr) {
    if (lr <= 0.0) throw std::invalid_argument("gd_step: lr must be > 0");
    check_same_shape(theta, gradient, "gd_step");
    return theta - lr * gradient;
}

// AdamW with bias correction and decoupled weight decay.
struct AdamWState {
    Mat m;
    Mat v;
    int step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    Schedule schedule;

    static AdamWState init(int rows, int cols, Schedule sched, double weight_decay = 0.0) {
        AdamWState s;
        s.m = Mat::zeros(rows, cols);
        s.v = Mat::zeros(rows, cols);
        s.schedule = sched;
        s.weight_decay = weight_decay;
        return s;
    }
};

inline Mat adamw_step(AdamWState& state, const Mat& theta, const Mat& gradient) {
    check_same_shape(theta, gradient, "adamw_step");
    check_same_shape(theta, state.m, "adamw_step(state)");
    const double lr = state.schedule.lr_at(state.step);
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, state.step);
    const double bc2 = 1.0 - std::pow(state.beta2, state.step);
    Mat out = theta;
    for (size_t i = 0; i < theta.a.size(); ++i) {
        state.m.a[i] = state.beta1 * state.m.a[i] + (1.0 - state.beta1) * gradient.a[i];
        state.v.a[i] = state.beta2 * state.v.a[i] + (1.0 - state.beta2) * gradient.a[i] * gradient.a[i];
        const double mhat = state.m.a[i] / bc1;
        const double vhat = state.v.a[i] / bc2;
        out.a[i] -= lr * (mhat / (std::sqrt(vhat) + state.eps) + state.weight_decay * theta.a[i]);
    }
    return out;
}

struct SamResult {
    Mat theta;
    bool degenerate_gradient = false;  // gradient was exactly zero
};

// SAM two-step update: gradient evaluated at the normalized-ascent point,
// applied at the original point. rho = 0 reduces to plain gd.
inline SamResult sam_step(const Mat& theta, const std::function<Mat(const Mat&)>& grad_fn,
                          double lr, double rho) {
    if (lr <= 0.0) throw std::invalid_argument("sam_step: lr must be > 0");
    if (rho < 0.0) throw std::invalid_argument("sam_step: rho must be >= 0");
    Mat g = grad_fn(theta);
    check_same_shape(theta, g, "sam_step");
    const double gn = frob_norm(g);
    if (gn == 0.0) return {theta, true};
    if (rho == 0.0) return {gd_step(theta, g, lr), false};
    Mat perturbed = theta + (rho / gn) * g;
    Mat g2 = grad_fn(perturbed);
    return {theta - lr * g2, false};
}

}  // namespace flatcal
