#include "flatcal/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace flatcal {

Tape::Var Tape::push(Mat val, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(Var v) {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
        throw std::out_of_range("Tape: unknown parameter/node handle");
    return nodes_[static_cast<size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
        throw std::out_of_range("Tape: unknown parameter/node handle");
    return nodes_[static_cast<size_t>(v.id)];
}

Tape::Var Tape::param(Mat m) { return push(std::move(m), true); }
Tape::Var Tape::constant(Mat m) { return push(std::move(m), false); }

const Mat& Tape::value(Var v) const { return node(v).val; }

double Tape::scalar(Var v) const {
    const Mat& m = node(v).val;
    if (m.rows != 1 || m.cols != 1) throw std::invalid_argument("Tape::scalar: node is not 1x1");
    return m.a[0];
}

Tape::Var Tape::add(Var x, Var y) {
    check_same_shape(value(x), value(y), "Tape::add");
    Mat out = value(x) + value(y);
    bool rg = node(x).requires_grad || node(y).requires_grad;
    int xi = x.id, yi = y.id;
    Var v = push(std::move(out), rg);
    int vi = v.id;
    nodes_.back().back = [xi, yi, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        Mat& gx = t.nodes_[xi].grad;
        Mat& gy = t.nodes_[yi].grad;
        for (size_t k = 0; k < g.a.size(); ++k) {
            gx.a[k] += g.a[k];
            gy.a[k] += g.a[k];
        }
    };
    return v;
}

void Tape::backward(Var loss) {
    Node& top = node(loss);
    if (top.val.rows != 1 || top.val.cols != 1)
        throw std::invalid_argument("Tape::backward: loss must be scalar (1x1)");
    for (Node& n : nodes_) n.grad = Mat::zeros(n.val.rows, n.val.cols);
    top.grad.a[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.back && n.requires_grad) n.back(*this);
    }
    ran_backward_ = true;
}

const Mat& Tape::grad(Var v) const {
    const Node& n = node(v);
    if (!ran_backward_) throw std::logic_error("Tape::grad: backward() not run");
    return n.grad;
}

Tape::Var Tape::sub(Var x, Var y) {
    check_same_shape(value(x), value(y), "Tape::sub");
    Mat out = value(x) - value(y);
    bool rg = node(x).requires_grad || node(y).requires_grad;
    int xi = x.id, yi = y.id;
    Var v = push(std::move(out), rg);
    int vi = v.id;
    nodes_.back().back = [xi, yi, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        Mat& gx = t.nodes_[xi].grad;
        Mat& gy = t.nodes_[yi].grad;
        for (size_t k = 0; k < g.a.size(); ++k) {
            gx.a[k] += g.a[k];
            gy.a[k] -= g.a[k];
        }
    };
    return v;
}

Tape::Var Tape::mul(Var x, Var y) {
    check_same_shape(value(x), value(y), "Tape::mul");
    const Mat& xv = value(x);
    const Mat& yv = value(y);
    Mat out(xv.rows, xv.cols);
    for (size_t k = 0; k < out.a.size(); ++k) out.a[k] = xv.a[k] * yv.a[k];
    bool rg = node(x).requires_grad || node(y).requires_grad;
    int xi = x.id, yi = y.id;
    Var v = push(std::move(out), rg);
    int vi = v.id;
    nodes_.back().back = [xi, yi, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        const Mat& xv2 = t.nodes_[xi].val;
        const Mat& yv2 = t.nodes_[yi].val;
        Mat& gx = t.nodes_[xi].grad;
        Mat& gy = t.nodes_[yi].grad;
        for (size_t k = 0; k < g.a.size(); ++k) {
            gx.a[k] += g.a[k] * yv2.a[k];
            gy.a[k] += g.a[k] * xv2.a[k];
        }
    };
    return v;
}

Tape::Var Tape::scale(Var x, double s) {
    Mat out = value(x) * s;
    int xi = x.id;
    Var v = push(std::move(out), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi, s](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        Mat& gx = t.nodes_[xi].grad;
        for (size_t k = 0; k < g.a.size(); ++k) gx.a[k] += s * g.a[k];
    };
    return v;
}

Tape::Var Tape::log_el(Var x) {
    const Mat& xv = value(x);
    Mat out(xv.rows, xv.cols);
    for (size_t k = 0; k < out.a.size(); ++k) out.a[k] = std::log(xv.a[k]);
    int xi = x.id;
    Var v = push(std::move(out), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        const Mat& xv2 = t.nodes_[xi].val;
        Mat& gx = t.nodes_[xi].grad;
        for (size_t k = 0; k < g.a.size(); ++k) gx.a[k] += g.a[k] / xv2.a[k];
    };
    return v;
}

Tape::Var Tape::tanh_el(Var x) {
    const Mat& xv = value(x);
    Mat out(xv.rows, xv.cols);
    for (size_t k = 0; k < out.a.size(); ++k) out.a[k] = std::tanh(xv.a[k]);
    int xi = x.id;
    Var v = push(std::move(out), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        const Mat& yv = t.nodes_[vi].val;
        Mat& gx = t.nodes_[xi].grad;
        for (size_t k = 0; k < g.a.size(); ++k) gx.a[k] += g.a[k] * (1.0 - yv.a[k] * yv.a[k]);
    };
    return v;
}

Tape::Var Tape::matmul(Var x, Var y) {
    Mat out = flatcal::matmul(value(x), value(y));
    bool rg = node(x).requires_grad || node(y).requires_grad;
    int xi = x.id, yi = y.id;
    Var v = push(std::move(out), rg);
    int vi = v.id;
    nodes_.back().back = [xi, yi, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        const Mat& xv = t.nodes_[xi].val;
        const Mat& yv = t.nodes_[yi].val;
        // dX = g Y^T, dY = X^T g
        if (t.nodes_[xi].requires_grad) {
            Mat dx = flatcal::matmul(g, transpose(yv));
            Mat& gx = t.nodes_[xi].grad;
            for (size_t k = 0; k < gx.a.size(); ++k) gx.a[k] += dx.a[k];
        }
        if (t.nodes_[yi].requires_grad) {
            Mat dy = flatcal::matmul(transpose(xv), g);
            Mat& gy = t.nodes_[yi].grad;
            for (size_t k = 0; k < gy.a.size(); ++k) gy.a[k] += dy.a[k];
        }
    };
    return v;
}

Tape::Var Tape::transpose_of(Var x) {
    Mat out = transpose(value(x));
    int xi = x.id;
    Var v = push(std::move(out), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi](Tape& t) {
        Mat gt = transpose(t.nodes_[vi].grad);
        Mat& gx = t.nodes_[xi].grad;
        for (size_t k = 0; k < gx.a.size(); ++k) gx.a[k] += gt.a[k];
    };
    return v;
}

Tape::Var Tape::sum(Var x) {
    const Mat& xv = value(x);
    double s = 0.0;
    for (double e : xv.a) s += e;
    int xi = x.id;
    Var v = push(Mat(1, 1, {s}), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi](Tape& t) {
        const double g = t.nodes_[vi].grad.a[0];
        Mat& gx = t.nodes_[xi].grad;
        for (double& e : gx.a) e += g;
    };
    return v;
}

Tape::Var Tape::mean_rows(Var x) {
    const Mat& xv = value(x);
    Mat out(1, xv.cols);
    for (int r = 0; r < xv.rows; ++r)
        for (int c = 0; c < xv.cols; ++c) out(0, c) += xv(r, c);
    const double inv = 1.0 / xv.rows;
    for (double& e : out.a) e *= inv;
    int xi = x.id;
    Var v = push(std::move(out), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi, inv](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        Mat& gx = t.nodes_[xi].grad;
        for (int r = 0; r < gx.rows; ++r)
            for (int c = 0; c < gx.cols; ++c) gx(r, c) += inv * g(0, c);
    };
    return v;
}

Tape::Var Tape::repeat_rows(Var x, int k) {
    const Mat& xv = value(x);
    if (xv.rows != 1) throw std::invalid_argument("Tape::repeat_rows: expects 1xC input");
    if (k < 1) throw std::invalid_argument("Tape::repeat_rows: k must be >= 1");
    Mat out(k, xv.cols);
    for (int r = 0; r < k; ++r)
        for (int c = 0; c < xv.cols; ++c) out(r, c) = xv(0, c);
    int xi = x.id;
    Var v = push(std::move(out), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        Mat& gx = t.nodes_[xi].grad;
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) gx(0, c) += g(r, c);
    };
    return v;
}

Tape::Var Tape::add_rowvec(Var x, Var r) {
    const Mat& xv = value(x);
    const Mat& rv = value(r);
    if (rv.rows != 1 || rv.cols != xv.cols)
        throw std::invalid_argument("Tape::add_rowvec: row vector shape mismatch");
    Mat out = xv;
    for (int i = 0; i < xv.rows; ++i)
        for (int c = 0; c < xv.cols; ++c) out(i, c) += rv(0, c);
    bool rg = node(x).requires_grad || node(r).requires_grad;
    int xi = x.id, ri = r.id;
    Var v = push(std::move(out), rg);
    int vi = v.id;
    nodes_.back().back = [xi, ri, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        Mat& gx = t.nodes_[xi].grad;
        Mat& gr = t.nodes_[ri].grad;
        for (size_t k = 0; k < gx.a.size(); ++k) gx.a[k] += g.a[k];
        for (int i = 0; i < g.rows; ++i)
            for (int c = 0; c < g.cols; ++c) gr(0, c) += g(i, c);
    };
    return v;
}

Tape::Var Tape::concat_cols(Var x, Var y) {
    const Mat& xv = value(x);
    const Mat& yv = value(y);
    if (xv.rows != yv.rows) throw std::invalid_argument("Tape::concat_cols: row count mismatch");
    Mat out(xv.rows, xv.cols + yv.cols);
    for (int r = 0; r < xv.rows; ++r) {
        for (int c = 0; c < xv.cols; ++c) out(r, c) = xv(r, c);
        for (int c = 0; c < yv.cols; ++c) out(r, xv.cols + c) = yv(r, c);
    }
    bool rg = node(x).requires_grad || node(y).requires_grad;
    int xi = x.id, yi = y.id;
    const int xc = xv.cols;
    Var v = push(std::move(out), rg);
    int vi = v.id;
    nodes_.back().back = [xi, yi, vi, xc](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        Mat& gx = t.nodes_[xi].grad;
        Mat& gy = t.nodes_[yi].grad;
        for (int r = 0; r < g.rows; ++r) {
            for (int c = 0; c < xc; ++c) gx(r, c) += g(r, c);
            for (int c = xc; c < g.cols; ++c) gy(r, c - xc) += g(r, c);
        }
    };
    return v;
}

Tape::Var Tape::normalize_rows(Var x) {
    const Mat& xv = value(x);
    Mat out(xv.rows, xv.cols);
    std::vector<double> norms(static_cast<size_t>(xv.rows));
    for (int r = 0; r < xv.rows; ++r) {
        double s = 0.0;
        for (int c = 0; c < xv.cols; ++c) s += xv(r, c) * xv(r, c);
        const double n = std::sqrt(s);
        if (n == 0.0) throw std::domain_error("Tape::normalize_rows: zero row");
        norms[static_cast<size_t>(r)] = n;
        for (int c = 0; c < xv.cols; ++c) out(r, c) = xv(r, c) / n;
    }
    int xi = x.id;
    Var v = push(std::move(out), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi, norms](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        const Mat& y = t.nodes_[vi].val;  // normalized rows
        Mat& gx = t.nodes_[xi].grad;
        // d/dx (x/||x||) : (g - (g . y) y) / ||x||
        for (int r = 0; r < g.rows; ++r) {
            double gy = 0.0;
            for (int c = 0; c < g.cols; ++c) gy += g(r, c) * y(r, c);
            const double inv = 1.0 / norms[static_cast<size_t>(r)];
            for (int c = 0; c < g.cols; ++c) gx(r, c) += inv * (g(r, c) - gy * y(r, c));
        }
    };
    return v;
}

Tape::Var Tape::row_norms(Var x) {
    const Mat& xv = value(x);
    Mat out(xv.rows, 1);
    for (int r = 0; r < xv.rows; ++r) {
        double s = 0.0;
        for (int c = 0; c < xv.cols; ++c) s += xv(r, c) * xv(r, c);
        out(r, 0) = std::sqrt(s);
    }
    int xi = x.id;
    Var v = push(std::move(out), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        const Mat& xv2 = t.nodes_[xi].val;
        const Mat& nv = t.nodes_[vi].val;
        Mat& gx = t.nodes_[xi].grad;
        for (int r = 0; r < xv2.rows; ++r) {
            const double n = nv(r, 0);
            if (n == 0.0) continue;  // subgradient 0 at the kink
            const double gr = g(r, 0) / n;
            for (int c = 0; c < xv2.cols; ++c) gx(r, c) += gr * xv2(r, c);
        }
    };
    return v;
}

Tape::Var Tape::row_dots(Var x, Var y) {
    check_same_shape(value(x), value(y), "Tape::row_dots");
    const Mat& xv = value(x);
    const Mat& yv = value(y);
    Mat out(xv.rows, 1);
    for (int r = 0; r < xv.rows; ++r) {
        double s = 0.0;
        for (int c = 0; c < xv.cols; ++c) s += xv(r, c) * yv(r, c);
        out(r, 0) = s;
    }
    bool rg = node(x).requires_grad || node(y).requires_grad;
    int xi = x.id, yi = y.id;
    Var v = push(std::move(out), rg);
    int vi = v.id;
    nodes_.back().back = [xi, yi, vi](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        const Mat& xv2 = t.nodes_[xi].val;
        const Mat& yv2 = t.nodes_[yi].val;
        Mat& gx = t.nodes_[xi].grad;
        Mat& gy = t.nodes_[yi].grad;
        for (int r = 0; r < xv2.rows; ++r) {
            const double gr = g(r, 0);
            for (int c = 0; c < xv2.cols; ++c) {
                gx(r, c) += gr * yv2(r, c);
                gy(r, c) += gr * xv2(r, c);
            }
        }
    };
    return v;
}

Tape::Var Tape::softmax(Var x, double temperature) {
    if (temperature <= 0.0) throw std::invalid_argument("Tape::softmax: temperature must be > 0");
    const Mat& xv = value(x);
    if (xv.rows != 1 && xv.cols != 1)
        throw std::invalid_argument("Tape::softmax: expects a vector-shaped node");
    Mat out(xv.rows, xv.cols);
    double mx = xv.a[0];
    for (double e : xv.a) mx = std::max(mx, e);
    double z = 0.0;
    for (size_t k = 0; k < xv.a.size(); ++k) {
        out.a[k] = std::exp((xv.a[k] - mx) / temperature);
        z += out.a[k];
    }
    for (double& e : out.a) e /= z;
    int xi = x.id;
    Var v = push(std::move(out), node(x).requires_grad);
    int vi = v.id;
    nodes_.back().back = [xi, vi, temperature](Tape& t) {
        const Mat& g = t.nodes_[vi].grad;
        const Mat& p = t.nodes_[vi].val;
        Mat& gx = t.nodes_[xi].grad;
        double gp = 0.0;
        for (size_t k = 0; k < g.a.size(); ++k) gp += g.a[k] * p.a[k];
        for (size_t k = 0; k < g.a.size(); ++k)
            gx.a[k] += p.a[k] * (g.a[k] - gp) / temperature;
    };
    return v;
}

Tape::Var Tape::entropy(Var p) {
    const Mat& pv = value(p);
    if (pv.rows != 1 && pv.cols != 1)
        throw std::invalid_argument("Tape::entropy: expects a vector-shaped node");
    double h = 0.0;
    for (double e : pv.a)
        if (e > 0.0) h -= e * std::log(e);
    int pi = p.id;
    Var v = push(Mat(1, 1, {h}), node(p).requires_grad);
    int vi = v.id;
    nodes_.back().back = [pi, vi](Tape& t) {
        const double g = t.nodes_[vi].grad.a[0];
        const Mat& pv2 = t.nodes_[pi].val;
        Mat& gp = t.nodes_[pi].grad;
        for (size_t k = 0; k < pv2.a.size(); ++k) {
            if (pv2.a[k] > 0.0) gp.a[k] += g * (-(std::log(pv2.a[k]) + 1.0));
        }
    };
    return v;
}

double finite_diff_check(const std::function<Tape::Var(Tape&, Tape::Var)>& f,
                         const Mat& x, double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be > 0");

    Tape tape;
    Tape::Var xv = tape.param(x);
    Tape::Var loss = f(tape, xv);
    tape.backward(loss);
    Mat analytic = tape.grad(xv);

    auto eval = [&f](const Mat& at) {
        Tape t;
        Tape::Var v = t.param(at);
        double val = t.scalar(f(t, v));
        if (!std::isfinite(val)) throw std::domain_error("finite_diff_check: non-finite loss value");
        return val;
    };

    double worst = 0.0;
    Mat xp = x;
    for (size_t k = 0; k < x.a.size(); ++k) {
        const double orig = xp.a[k];
        xp.a[k] = orig + step;
        const double fp = eval(xp);
        xp.a[k] = orig - step;
        const double fm = eval(xp);
        xp.a[k] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::fabs(analytic.a[k]), std::fabs(numeric), 1e-8});
        worst = std::max(worst, std::fabs(analytic.a[k] - numeric) / denom);
    }
    return worst;
}

}  // namespace flatcal
