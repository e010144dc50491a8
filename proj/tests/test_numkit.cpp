#include <doctest.h>

#include <cmath>

#include "flatcal/linalg.hpp"
#include "flatcal/rng.hpp"
#include "flatcal/tape.hpp"

using namespace flatcal;

TEST_CASE("sphere_uniform returns unit vectors") {
    Rng rng(0);
    for (int d : {2, 4, 16, 64}) {
        for (int i = 0; i < 20; ++i) {
            Vec v = sphere_uniform(rng, d);
            CHECK(std::fabs(norm2(v) - 1.0) < 1e-12);
        }
    }
    CHECK_THROWS_AS(sphere_uniform(rng, 1), std::invalid_argument);
}

TEST_CASE("sphere_uniform coordinate means vanish (Monte Carlo)") {
    Rng rng(123);
    const int d = 8, n = 100000;
    Vec mean(d, 0.0);
    for (int i = 0; i < n; ++i) {
        Vec v = sphere_uniform(rng, d);
        for (int j = 0; j < d; ++j) mean[j] += v[j];
    }
    for (int j = 0; j < d; ++j) CHECK(std::fabs(mean[j] / n) < 0.02);
}

TEST_CASE("sphere_uniform second moment E[v v^T] = I/d") {
    Rng rng(7);
    const int d = 16, n = 100000;
    Vec diag(d, 0.0);
    double offdiag = 0.0;
    for (int i = 0; i < n; ++i) {
        Vec v = sphere_uniform(rng, d);
        for (int j = 0; j < d; ++j) diag[j] += v[j] * v[j];
        offdiag += v[0] * v[1];
    }
    for (int j = 0; j < d; ++j) CHECK(std::fabs(diag[j] / n - 1.0 / d) < 0.01);
    CHECK(std::fabs(offdiag / n) < 0.01);
}

TEST_CASE("rng streams are deterministic and substreams differ") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng s0 = Rng(42).substream(0);
    Rng s1 = Rng(42).substream(1);
    CHECK(s0.next_u64() != s1.next_u64());
    Rng s0b = Rng(42).substream(0);
    Rng s0c = Rng(42).substream(0);
    for (int i = 0; i < 100; ++i) CHECK(s0b.gaussian() == s0c.gaussian());
}

TEST_CASE("tape: quadratic gradient") {
    Tape t;
    Tape::Var x = t.param(Mat(1, 2, {1.0, 2.0}));
    Tape::Var loss = t.sum(t.mul(x, x));
    CHECK(t.scalar(loss) == doctest::Approx(5.0));
    t.backward(loss);
    const Mat& g = t.grad(x);
    CHECK(g.a[0] == doctest::Approx(2.0));
    CHECK(g.a[1] == doctest::Approx(4.0));
}

TEST_CASE("tape: entropy of softmax matches finite differences") {
    Mat logits(1, 5, {0.3, -1.2, 0.7, 2.0, -0.5});
    auto f = [](Tape& t, Tape::Var x) { return t.entropy(t.softmax(x)); };
    CHECK(finite_diff_check(f, logits, 1e-5) < 1e-6);
}

TEST_CASE("tape: unknown handles rejected") {
    Tape t;
    Tape::Var x = t.param(Mat(1, 1, {1.0}));
    Tape::Var bogus;
    CHECK_THROWS_AS(t.value(bogus), std::out_of_range);
    Tape::Var loss = t.sum(x);
    t.backward(loss);
    Tape::Var beyond{99};
    CHECK_THROWS_AS(t.grad(beyond), std::out_of_range);
}

TEST_CASE("tape: matmul / normalize / tanh pipeline gradient vs finite differences") {
    Rng rng(3);
    Mat w = rng.gaussian_mat(4, 3);
    Mat r = rng.gaussian_mat(2, 3);
    auto f = [&w, &r](Tape& t, Tape::Var x) {
        Tape::Var y = t.normalize_rows(t.tanh_el(t.matmul(x, t.constant(w))));
        return t.sum(t.mul(y, t.constant(r)));
    };
    Mat x = rng.gaussian_mat(2, 4);
    CHECK(finite_diff_check(f, x, 1e-5) < 1e-6);
}

TEST_CASE("tape: structural ops gradient vs finite differences") {
    Rng rng(11);
    Mat x = rng.gaussian_mat(3, 4);
    auto f = [](Tape& t, Tape::Var v) {
        Tape::Var mu = t.mean_rows(v);
        Tape::Var rep = t.repeat_rows(mu, 3);
        Tape::Var d = t.sub(v, rep);
        Tape::Var cat = t.concat_cols(d, t.mul(v, v));
        return t.sum(t.row_norms(cat));
    };
    CHECK(finite_diff_check(f, x, 1e-5) < 1e-6);
}

TEST_CASE("finite_diff_check on sum of squares is tiny") {
    Rng rng(5);
    Mat x = rng.gaussian_mat(3, 3);
    auto f = [](Tape& t, Tape::Var v) { return t.sum(t.mul(v, v)); };
    CHECK(finite_diff_check(f, x, 1e-5) < 1e-7);
}

TEST_CASE("gradient linearity: grad(a f + b g) = a grad f + b grad g") {
    Rng rng(9);
    Mat x = rng.gaussian_mat(2, 3);
    const double a = 1.7, b = -0.4;

    auto grad_of = [&x](const std::function<Tape::Var(Tape&, Tape::Var)>& fn) {
        Tape t;
        Tape::Var v = t.param(x);
        t.backward(fn(t, v));
        return t.grad(v);
    };
    auto f = [](Tape& t, Tape::Var v) { return t.sum(t.mul(v, v)); };
    auto g = [](Tape& t, Tape::Var v) { return t.entropy(t.softmax(t.mean_rows(v))); };
    auto combo = [&](Tape& t, Tape::Var v) {
        return t.add(t.scale(f(t, v), a), t.scale(g(t, v), b));
    };

    Mat gf = grad_of(f), gg = grad_of(g), gc = grad_of(combo);
    for (size_t i = 0; i < x.a.size(); ++i)
        CHECK(std::fabs(gc.a[i] - (a * gf.a[i] + b * gg.a[i])) < 1e-12);
}

TEST_CASE("Mat invariants") {
    CHECK_THROWS_AS(Mat(2, 3, {1.0, 2.0}), std::invalid_argument);
    CHECK_THROWS_AS(Mat(0, 3), std::invalid_argument);
    CHECK_THROWS_AS(matmul(Mat(2, 3), Mat(2, 3)), std::invalid_argument);
}
