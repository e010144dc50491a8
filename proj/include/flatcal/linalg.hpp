#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace flatcal {

using Vec = std::vector<double>;

// Dense row-major matrix of 64-bit reals.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {
        if (r <= 0 || c <= 0) throw std::invalid_argument("Mat: non-positive dims");
    }
    Mat(int r, int c, std::vector<double> data) : rows(r), cols(c), a(std::move(data)) {
        if (r <= 0 || c <= 0) throw std::invalid_argument("Mat: non-positive dims");
        if (a.size() != static_cast<size_t>(r) * c)
            throw std::invalid_argument("Mat: data length " + std::to_string(a.size()) +
                                        " != " + std::to_string(r) + "x" + std::to_string(c));
    }

    double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return a.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    static Mat zeros(int r, int c) { return Mat(r, c); }

    static Mat row_vector(const Vec& v) {
        return Mat(1, static_cast<int>(v.size()), std::vector<double>(v.begin(), v.end()));
    }
    static Mat col_vector(const Vec& v) {
        return Mat(static_cast<int>(v.size()), 1, std::vector<double>(v.begin(), v.end()));
    }
    static Mat identity(int n) {
        Mat m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    Vec row(int r) const {
        Vec out(cols);
        for (int c = 0; c < cols; ++c) out[c] = (*this)(r, c);
        return out;
    }

    bool all_finite() const {
        for (double x : a)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline void check_same_shape(const Mat& x, const Mat& y, const char* op) {
    if (!x.same_shape(y))
        throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                    std::to_string(x.rows) + "x" + std::to_string(x.cols) + " vs " +
                                    std::to_string(y.rows) + "x" + std::to_string(y.cols) + ")");
}

inline Mat operator+(const Mat& x, const Mat& y) {
    check_same_shape(x, y, "add");
    Mat out = x;
    for (size_t i = 0; i < out.a.size(); ++i) out.a[i] += y.a[i];
    return out;
}

inline Mat operator-(const Mat& x, const Mat& y) {
    check_same_shape(x, y, "sub");
    Mat out = x;
    for (size_t i = 0; i < out.a.size(); ++i) out.a[i] -= y.a[i];
    return out;
}

inline Mat operator*(const Mat& x, double s) {
    Mat out = x;
    for (double& v : out.a) v *= s;
    return out;
}
inline Mat operator*(double s, const Mat& x) { return x * s; }

// x (m x k) times y (k x n)
inline Mat matmul(const Mat& x, const Mat& y) {
    if (x.cols != y.rows)
        throw std::invalid_argument("matmul: inner dims " + std::to_string(x.cols) + " vs " +
                                    std::to_string(y.rows));
    Mat out(x.rows, y.cols);
    for (int i = 0; i < x.rows; ++i) {
        for (int k = 0; k < x.cols; ++k) {
            const double xv = x(i, k);
            if (xv == 0.0) continue;
            for (int j = 0; j < y.cols; ++j) out(i, j) += xv * y(k, j);
        }
    }
    return out;
}

inline Mat transpose(const Mat& x) {
    Mat out(x.cols, x.rows);
    for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < x.cols; ++j) out(j, i) = x(i, j);
    return out;
}

inline double dot(const Vec& x, const Vec& y) {
    if (x.size() != y.size()) throw std::invalid_argument("dot: length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline double norm2(const Vec& x) { return std::sqrt(dot(x, x)); }

inline double frob_norm2_sq(const Mat& x) {
    double s = 0.0;
    for (double v : x.a) s += v * v;
    return s;
}

inline double frob_norm(const Mat& x) { return std::sqrt(frob_norm2_sq(x)); }

}  // namespace flatcal
