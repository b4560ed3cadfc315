#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <vector>

namespace nahaco {

// Dense row-major matrix of doubles. Also used as an items-by-features batch
// (rows = nodes or edges). Deliberately minimal: the network kernels are
// written as explicit loops so their execution order is under our control.
struct Matrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double value = 0.0) : rows(r), cols(c), a(r * c, value) {}

    double& operator()(std::size_t r, std::size_t c) { return a[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return a[r * cols + c]; }

    double* row(std::size_t r) { return a.data() + r * cols; }
    const double* row(std::size_t r) const { return a.data() + r * cols; }

    std::size_t size() const { return a.size(); }
    void fill(double v) { std::fill(a.begin(), a.end(), v); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// y = W x
inline void matvec(const Matrix& W, const double* x, double* y) {
    for (std::size_t r = 0; r < W.rows; ++r) {
        const double* w = W.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < W.cols; ++c) s += w[c] * x[c];
        y[r] = s;
    }
}

// y += W x
inline void matvec_acc(const Matrix& W, const double* x, double* y) {
    for (std::size_t r = 0; r < W.rows; ++r) {
        const double* w = W.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < W.cols; ++c) s += w[c] * x[c];
        y[r] += s;
    }
}

// x += W^T d
inline void matvec_t_acc(const Matrix& W, const double* d, double* x) {
    for (std::size_t r = 0; r < W.rows; ++r) {
        const double* w = W.row(r);
        const double dr = d[r];
        for (std::size_t c = 0; c < W.cols; ++c) x[c] += w[c] * dr;
    }
}

// dW += d (outer) x
inline void outer_acc(Matrix& dW, const double* d, const double* x) {
    for (std::size_t r = 0; r < dW.rows; ++r) {
        double* w = dW.row(r);
        const double dr = d[r];
        for (std::size_t c = 0; c < dW.cols; ++c) w[c] += dr * x[c];
    }
}

}  // namespace nahaco
