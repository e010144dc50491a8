#pragma once

#include <functional>
#include <vector>

#include "flatcal/linalg.hpp"

namespace flatcal {

// Reverse-mode gradient tape over Mat-valued nodes. Record a scalar loss
// through the op methods, call backward() once, then read grad() of any
// param node. One tape per thread of execution; independent tapes may run
// concurrently.
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Var param(Mat m);            // leaf tracked for gradients
    Var constant(Mat m);         // leaf treated as constant
    Var constant_scalar(double s) { return constant(Mat(1, 1, {s})); }

    const Mat& value(Var v) const;
    double scalar(Var v) const;  // requires 1x1

    // elementwise, same shape
    Var add(Var x, Var y);
    Var sub(Var x, Var y);
    Var mul(Var x, Var y);
    Var scale(Var x, double s);
    Var log_el(Var x);
    Var tanh_el(Var x);

    // structural / linear algebra
    Var matmul(Var x, Var y);
    Var transpose_of(Var x);
    Var sum(Var x);                    // all entries -> 1x1
    Var mean_rows(Var x);              // RxC -> 1xC
    Var repeat_rows(Var x, int k);     // 1xC -> kxC
    Var add_rowvec(Var x, Var r);      // RxC + 1xC broadcast
    Var concat_cols(Var x, Var y);     // RxA, RxB -> Rx(A+B)
    Var normalize_rows(Var x);         // each row to unit L2 norm
    Var row_norms(Var x);              // RxC -> Rx1 of L2 norms; zero rows get zero gradient
    Var row_dots(Var x, Var y);        // RxC, RxC -> Rx1 of per-row inner products

    // softmax over all entries of a vector-shaped node (1xN or Nx1)
    Var softmax(Var x, double temperature = 1.0);
    // entropy of a probability vector, natural log, 0*log 0 := 0
    Var entropy(Var p);

    void backward(Var loss);
    const Mat& grad(Var v) const;

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Mat val;
        Mat grad;
        bool requires_grad = false;
        std::function<void(Tape&)> back;  // empty for leaves
    };

    Var push(Mat val, bool requires_grad, std::function<void(Tape&)> back = {});
    Node& node(Var v);
    const Node& node(Var v) const;
    Mat& grad_buf(int id) { return nodes_[static_cast<size_t>(id)].grad; }

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

// Worst relative error between the tape gradient of f and central finite
// differences at x, with denominator max(|analytic|, |numeric|, 1e-8).
// f receives a fresh tape and the param var for x and must return the loss var.
double finite_diff_check(const std::function<Tape::Var(Tape&, Tape::Var)>& f,
                         const Mat& x, double step);

}  // namespace flatcal
