#include <doctest.h>

#include <cmath>

#include "flatcal/encoder.hpp"
#include "flatcal/losses.hpp"
#include "flatcal/probes.hpp"
#include "flatcal/tape.hpp"

using namespace flatcal;

namespace {

LossFn quadratic_fn() {
    return [](const Mat& m) { return LossEval{0.5 * frob_norm2_sq(m), m}; };
}

// exact ||J||_F^2 by sweeping all input basis directions with central differences
double fd_jacobian_sq(const SynthEncoder& enc, const Mat& c, const Mat& theta, Wrt wrt,
                      bool normalized) {
    const Mat& x = wrt == Wrt::classes ? c : theta;
    const double h = 1e-5;
    double total = 0.0;
    for (size_t i = 0; i < x.a.size(); ++i) {
        Mat xp = x, xm = x;
        xp.a[i] += h;
        xm.a[i] -= h;
        auto eval = [&](const Mat& xx) {
            const Mat& cc = wrt == Wrt::classes ? xx : c;
            const Mat& tt = wrt == Wrt::classes ? theta : xx;
            return normalized ? enc.encode(cc, tt) : enc.encode_prenorm(cc, tt);
        };
        Mat fp = eval(xp), fm = eval(xm);
        for (size_t j = 0; j < fp.a.size(); ++j) {
            const double d = (fp.a[j] - fm.a[j]) / (2.0 * h);
            total += d * d;
        }
    }
    return total;
}

}  // namespace

TEST_CASE("sharpness: closed-form quadratic and linear exactness") {
    Mat theta(1, 2, {1.0, 0.0});
    SharpnessReading r = sharpness(theta, quadratic_fn(), 0.1);
    CHECK(r.value == doctest::Approx(0.105).epsilon(1e-12));
    CHECK(r.loss_at_theta == doctest::Approx(0.5));
    CHECK_FALSE(r.degenerate);

    Mat g(1, 3, {0.3, -0.4, 1.2});
    LossFn linear = [&g](const Mat& m) {
        double s = 0.0;
        for (size_t i = 0; i < m.a.size(); ++i) s += g.a[i] * m.a[i];
        return LossEval{s, g};
    };
    Mat x(1, 3, {5.0, -2.0, 0.1});
    SharpnessReading lin = sharpness(x, linear, 0.25);
    CHECK(lin.value == doctest::Approx(0.25 * frob_norm(g)).epsilon(1e-12));

    CHECK_THROWS_AS(sharpness(x, linear, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(sharpness(x, linear, -1.0), std::invalid_argument);
}

TEST_CASE("sharpness: translation consistency and degenerate gradient") {
    Mat x(2, 2, {0.4, -1.1, 2.0, 0.3});
    SharpnessReading a = sharpness(x, quadratic_fn(), 0.05);
    LossFn shifted = [](const Mat& m) { return LossEval{0.5 * frob_norm2_sq(m) + 123.456, m}; };
    SharpnessReading b = sharpness(x, shifted, 0.05);
    CHECK(std::fabs(a.value - b.value) < 1e-12);

    LossFn flat = [](const Mat& m) { return LossEval{7.0, Mat::zeros(m.rows, m.cols)}; };
    SharpnessReading d = sharpness(x, flat, 0.05);
    CHECK(d.degenerate);
    CHECK(d.value == 0.0);
}

TEST_CASE("sharpness of the EM loss is an ascent probe") {
    SynthEncoder enc(4, 16, 64, 64, 7);
    Rng rng(3);
    Mat c = rng.gaussian_mat(10, 16);
    int nonneg = 0;
    const int trials = 50;
    for (int i = 0; i < trials; ++i) {
        Mat theta = rng.gaussian_mat(4, 16);
        Vec v = sphere_uniform(rng, 64);
        AugmentedViews views = augment(rng, v, 8, 0.1);
        LossFn fn = [&](const Mat& th) {
            Tape tp;
            Tape::Var x = tp.param(th);
            Tape::Var t = enc.encode(tp, tp.constant(c), x);
            Tape::Var loss = em_loss_t(tp, t, views, 0.06, 0.25);
            LossEval e;
            e.loss = tp.scalar(loss);
            tp.backward(loss);
            e.grad = tp.grad(x);
            return e;
        };
        if (sharpness(theta, fn, 0.05).value >= -1e-8) ++nonneg;
    }
    CHECK(nonneg == trials);
}

TEST_CASE("jacobian_norm matches a full finite-difference oracle") {
    SynthEncoder enc(4, 16, 32, 24, 11);
    Rng rng(4);
    Mat c = rng.gaussian_mat(6, 16);
    Mat theta = rng.gaussian_mat(4, 16);
    for (bool normalized : {true, false}) {
        for (Wrt wrt : {Wrt::prompt, Wrt::classes}) {
            const double exact = std::sqrt(fd_jacobian_sq(enc, c, theta, wrt, normalized));
            Rng pr(99);
            const double est = jacobian_norm(enc, c, theta, wrt, 3000, pr, normalized);
            CHECK(est == doctest::Approx(exact).epsilon(0.05));
        }
    }
    Rng pr(1);
    CHECK_THROWS_AS(jacobian_norm(enc, c, theta, Wrt::prompt, 0, pr), std::invalid_argument);
}

TEST_CASE("pre-normalization jacobian is exactly linear in W2") {
    SynthEncoder enc(4, 16, 32, 24, 12);
    SynthEncoder doubled = enc;
    doubled.scale_output_weights(2.0);
    Rng rng(5);
    Mat c = rng.gaussian_mat(6, 16);
    Mat theta = rng.gaussian_mat(4, 16);
    Rng pa(7), pb(7);  // paired probe directions
    const double base = jacobian_norm(enc, c, theta, Wrt::prompt, 200, pa, false);
    const double twice = jacobian_norm(doubled, c, theta, Wrt::prompt, 200, pb, false);
    CHECK(twice / base == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("jacobian_norm standard error shrinks like 1/sqrt(n_probe)") {
    SynthEncoder enc(4, 16, 32, 24, 13);
    Rng rng(6);
    Mat c = rng.gaussian_mat(6, 16);
    Mat theta = rng.gaussian_mat(4, 16);
    auto mean_stderr = [&](int n_probe, uint64_t salt) {
        double s = 0.0;
        for (int rep = 0; rep < 10; ++rep) {
            Rng pr(salt + static_cast<uint64_t>(rep));
            s += jacobian_norm_detailed(enc, c, theta, Wrt::prompt, n_probe, pr).sq_stderr;
        }
        return s / 10.0;
    };
    const double ratio = mean_stderr(200, 100) / mean_stderr(400, 500);
    CHECK(ratio > std::sqrt(2.0) * 0.7);
    CHECK(ratio < std::sqrt(2.0) * 1.3);
}

TEST_CASE("jacobian_norm estimator is unbiased against the oracle") {
    SynthEncoder enc(4, 16, 32, 24, 14);
    Rng rng(8);
    Mat c = rng.gaussian_mat(6, 16);
    Mat theta = rng.gaussian_mat(4, 16);
    const double exact_sq = fd_jacobian_sq(enc, c, theta, Wrt::prompt, true);
    std::vector<double> estimates;
    for (int rep = 0; rep < 50; ++rep) {
        Rng pr(1000 + static_cast<uint64_t>(rep));
        estimates.push_back(
            jacobian_norm_detailed(enc, c, theta, Wrt::prompt, 100, pr).sq_mean);
    }
    double mean = 0.0;
    for (double e : estimates) mean += e;
    mean /= estimates.size();
    double var = 0.0;
    for (double e : estimates) var += (e - mean) * (e - mean);
    var /= (estimates.size() - 1);
    const double se_mean = std::sqrt(var / estimates.size());
    CHECK(std::fabs(mean - exact_sq) <= 2.0 * se_mean);
}

TEST_CASE("flatness_curvature_link: quadratic sigma scaling and small-sigma band") {
    SynthEncoder enc(4, 16, 64, 64, 15);
    Rng rng(9);
    Mat c = rng.gaussian_mat(10, 16);
    Mat theta = rng.gaussian_mat(4, 16);

    // paired draws: same substreams, halved sigma
    for (int halving = 0; halving < 3; ++halving) {
        const double s = 1e-3 / (1 << halving);
        Rng ra(42), rb(42);
        CurvatureReport big = flatness_curvature_link(enc, c, theta, s, s, 400, ra);
        CurvatureReport small = flatness_curvature_link(enc, c, theta, s / 2, s / 2, 400, rb);
        const double ratio = big.flat_mean / small.flat_mean;
        CHECK(ratio > 3.5);
        CHECK(ratio < 4.5);
    }

    Rng rc(43);
    CurvatureReport rep = flatness_curvature_link(enc, c, theta, 1e-3, 1e-3, 2000, rc);
    CHECK(rep.band_checked);
    CHECK_FALSE(rep.failed);
    CHECK(rep.ratio > 0.5);
    CHECK(rep.ratio < 2.0);
    CHECK(rep.flat_mean >= 0.0);
    CHECK(rep.jac_classes.frob_norm >= 0.0);
    CHECK(rep.jac_prompt.frob_norm >= 0.0);
    CHECK(rep.dir_second_max >= rep.dir_second_mean);
    CHECK(to_json(rep).find("flatcal.curvature.v1") != std::string::npos);

    CHECK_THROWS_AS(flatness_curvature_link(enc, c, theta, 1e-3, 1e-3, 50, rc),
                    std::invalid_argument);
}

TEST_CASE("E[L_flat] grows when the measured jacobian grows") {
    SynthEncoder enc(4, 16, 64, 64, 16);
    Rng rng(10);
    Mat c = rng.gaussian_mat(10, 16);
    Mat theta = rng.gaussian_mat(4, 16);

    SynthEncoder sharper = enc;
    sharper.scale_hidden_weights(2.0);

    Rng pa(3), pb(3);
    const double j_base = jacobian_norm(enc, c, theta, Wrt::prompt, 400, pa);
    const double j_sharp = jacobian_norm(sharper, c, theta, Wrt::prompt, 400, pb);
    CHECK(j_sharp > j_base);

    Rng ma(4), mb(4);  // paired perturbation draws
    CurvatureReport base = flatness_curvature_link(enc, c, theta, 1e-3, 1e-3, 1000, ma);
    CurvatureReport sharp = flatness_curvature_link(sharper, c, theta, 1e-3, 1e-3, 1000, mb);
    CHECK(sharp.flat_mean > base.flat_mean);
}
