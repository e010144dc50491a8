#include <doctest.h>

#include <cmath>

#include "flatcal/encoder.hpp"
#include "flatcal/rng.hpp"
#include "flatcal/tape.hpp"

using namespace flatcal;

namespace {
SynthEncoder make_enc(uint64_t seed = 99) { return SynthEncoder(4, 16, 64, 64, seed); }
}  // namespace

TEST_CASE("encode rows are unit norm and deterministic") {
    SynthEncoder enc = make_enc();
    Rng rng(1);
    Mat c = rng.gaussian_mat(10, 16);
    Mat theta = rng.gaussian_mat(4, 16);
    Mat t1 = enc.encode(c, theta);
    Mat t2 = enc.encode(c, theta);
    CHECK(t1.rows == 10);
    CHECK(t1.cols == 64);
    for (int k = 0; k < t1.rows; ++k) CHECK(std::fabs(norm2(t1.row(k)) - 1.0) < 1e-12);
    for (size_t i = 0; i < t1.a.size(); ++i) CHECK(t1.a[i] == t2.a[i]);
}

TEST_CASE("encode dimension mismatch rejected") {
    SynthEncoder enc = make_enc();
    Rng rng(2);
    CHECK_THROWS_AS(enc.encode(rng.gaussian_mat(10, 8), rng.gaussian_mat(4, 16)),
                    std::invalid_argument);
    CHECK_THROWS_AS(enc.encode(rng.gaussian_mat(10, 16), rng.gaussian_mat(4, 8)),
                    std::invalid_argument);
}

TEST_CASE("tape encode matches raw encode and finite differences") {
    SynthEncoder enc = make_enc();
    Rng rng(3);
    Mat c = rng.gaussian_mat(5, 16);
    Mat theta = rng.gaussian_mat(4, 16);
    Mat raw = enc.encode(c, theta);

    Tape tape;
    Tape::Var th = tape.param(theta);
    Tape::Var t = enc.encode(tape, tape.constant(c), th);
    const Mat& taped = tape.value(t);
    REQUIRE(taped.same_shape(raw));
    for (size_t i = 0; i < raw.a.size(); ++i)
        CHECK(std::fabs(taped.a[i] - raw.a[i]) < 1e-14);

    Mat probe = rng.gaussian_mat(5, 64);
    auto f = [&](Tape& tp, Tape::Var x) {
        Tape::Var feat = enc.encode(tp, tp.constant(c), x);
        return tp.sum(tp.mul(feat, tp.constant(probe)));
    };
    CHECK(finite_diff_check(f, theta, 1e-5) < 1e-5);

    // gradient w.r.t. the class embeddings too
    auto g = [&](Tape& tp, Tape::Var x) {
        Tape::Var feat = enc.encode(tp, x, tp.constant(theta));
        return tp.sum(tp.mul(feat, tp.constant(probe)));
    };
    CHECK(finite_diff_check(g, c, 1e-5) < 1e-5);
}

TEST_CASE("encode Lipschitz bound in the prompt") {
    SynthEncoder enc = make_enc();
    Rng rng(4);
    Mat c = rng.gaussian_mat(10, 16);
    Mat theta = rng.gaussian_mat(4, 16);
    Mat t0 = enc.encode(c, theta);

    // layer-product bound, with the local normalization factor 2/min ||y||
    Mat pooled(1, 16);
    double min_pre = 1e300;
    {
        // recompute the pre-normalization row norms
        for (int k = 0; k < c.rows; ++k) {
            Vec in(32);
            for (int e = 0; e < 16; ++e) {
                double m = 0.0;
                for (int p = 0; p < 4; ++p) m += theta(p, e);
                in[static_cast<size_t>(e)] = m / 4.0;
                in[static_cast<size_t>(16 + e)] = c(k, e);
            }
            Vec hid(64);
            for (int h = 0; h < 64; ++h) {
                double s = enc.b1()[static_cast<size_t>(h)];
                for (int j = 0; j < 32; ++j) s += enc.w1()(h, j) * in[static_cast<size_t>(j)];
                hid[static_cast<size_t>(h)] = std::tanh(s);
            }
            double nsq = 0.0;
            for (int d = 0; d < 64; ++d) {
                double s = 0.0;
                for (int h = 0; h < 64; ++h) s += enc.w2()(d, h) * hid[static_cast<size_t>(h)];
                nsq += s * s;
            }
            min_pre = std::min(min_pre, std::sqrt(nsq));
        }
    }
    REQUIRE(min_pre > 0.0);
    const double lip = 2.0 * std::sqrt(10.0) * frob_norm(enc.w1()) * frob_norm(enc.w2()) / min_pre;
    for (int trial = 0; trial < 100; ++trial) {
        Mat delta = rng.gaussian_mat(4, 16, 0.02);
        Mat t1 = enc.encode(c, theta + delta);
        CHECK(frob_norm(t1 - t0) <= lip * frob_norm(delta));
    }
}

TEST_CASE("augment basics") {
    Rng rng(5);
    Vec v = sphere_uniform(rng, 64);
    AugmentedViews a0 = augment(rng, v, 6, 0.0);
    CHECK(a0.views.size() == 6);
    for (const Vec& view : a0.views)
        for (size_t i = 0; i < v.size(); ++i) CHECK(view[i] == v[i]);

    AugmentedViews a1 = augment(rng, v, 1, 0.5);
    CHECK(a1.views.size() == 1);
    for (size_t i = 0; i < v.size(); ++i) CHECK(a1.views[0][i] == v[i]);

    AugmentedViews a2 = augment(rng, v, 8, 0.1);
    for (size_t i = 0; i < v.size(); ++i) CHECK(a2.views[0][i] == v[i]);
    for (const Vec& view : a2.views) CHECK(std::fabs(norm2(view) - 1.0) < 1e-12);
}

TEST_CASE("augment mean cosine agrees across independent streams") {
    Rng ra(100), rb(200);
    Vec v = sphere_uniform(ra, 64);
    auto mean_cos = [&v](Rng& r, int n) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            AugmentedViews a = augment(r, v, 2, 0.1);
            s += dot(v, a.views[1]);
        }
        return s / n;
    };
    const double m1 = mean_cos(ra, 10000);
    const double m2 = mean_cos(rb, 10000);
    CHECK(std::fabs(m1 - m2) < 0.01);
    // sigma_aug = 0.1 in d=64 adds noise of norm ~0.8: cos ~ 1/sqrt(1.64)
    CHECK(m1 > 0.7);
    CHECK(m1 < 0.85);
}

TEST_CASE("gen_task produces a usable task and is reproducible") {
    TaskParams p;
    SynthTask t1 = gen_task(7, p);
    SynthTask t2 = gen_task(7, p);
    CHECK(t1.zero_shot_accuracy > 0.15);
    CHECK(t1.zero_shot_accuracy < 0.98);
    CHECK(t1.zero_shot_accuracy == t2.zero_shot_accuracy);
    CHECK(t1.rejected_attempts == t2.rejected_attempts);
    REQUIRE(t1.features.size() == static_cast<size_t>(p.n_test));
    for (size_t i = 0; i < t1.features.size(); ++i) {
        CHECK(std::fabs(norm2(t1.features[i]) - 1.0) < 1e-12);
        CHECK(t1.labels[i] >= 0);
        CHECK(t1.labels[i] < p.n_classes);
        for (size_t d = 0; d < t1.features[i].size(); ++d)
            CHECK(t1.features[i][d] == t2.features[i][d]);
    }
    CHECK(std::fabs(norm2(t1.shift_direction) - 1.0) < 1e-12);
}

TEST_CASE("gen_task rejects the noiseless degenerate configuration") {
    TaskParams p;
    p.sigma_offset = 0.0;
    p.sigma_noise = 0.0;
    p.sigma_shift = 0.0;
    CHECK_THROWS_AS(gen_task(1, p), std::runtime_error);
}

TEST_CASE("gen_task label histogram is roughly multinomial") {
    TaskParams p;
    p.n_test = 1000;
    SynthTask t = gen_task(11, p);
    std::vector<int> hist(static_cast<size_t>(p.n_classes), 0);
    for (int y : t.labels) hist[static_cast<size_t>(y)] += 1;
    const double expected = 1000.0 / p.n_classes;
    const double sd = std::sqrt(1000.0 * 0.1 * 0.9);
    for (int h : hist) CHECK(std::fabs(h - expected) <= 3.0 * sd);
}

TEST_CASE("task json roundtrip is exact") {
    TaskParams p;
    p.n_test = 40;
    SynthTask t = gen_task(23, p);
    SynthTask back = task_from_json(task_to_json(t));
    CHECK(back.seed == t.seed);
    CHECK(back.zero_shot_accuracy == t.zero_shot_accuracy);
    REQUIRE(back.features.size() == t.features.size());
    for (size_t i = 0; i < t.features.size(); ++i) {
        CHECK(back.labels[i] == t.labels[i]);
        for (size_t d = 0; d < t.features[i].size(); ++d)
            CHECK(back.features[i][d] == t.features[i][d]);
    }
    for (size_t i = 0; i < t.theta_zs.tokens.a.size(); ++i)
        CHECK(back.theta_zs.tokens.a[i] == t.theta_zs.tokens.a[i]);
    Mat a = t.encoder.encode(t.classes.embeddings, t.theta_zs.tokens);
    Mat b = back.encoder.encode(back.classes.embeddings, back.theta_zs.tokens);
    for (size_t i = 0; i < a.a.size(); ++i) CHECK(a.a[i] == b.a[i]);
}
