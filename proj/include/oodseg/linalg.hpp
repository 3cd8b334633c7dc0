#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

// Small dense matrix helpers for the low-dimensional linear algebra in
// this project (feature dims are tens, not thousands).

namespace oodseg {

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }

    const double* row(int r) const { return v.data() + static_cast<std::size_t>(r) * cols; }
    double* row(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }
};

inline double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

// Cholesky factorization of a symmetric positive-definite matrix, in place
// on a copy. Throws if the matrix is not positive definite.
class Cholesky {
public:
    explicit Cholesky(const Matrix& a) : n_(a.rows), l_(a.rows, a.cols) {
        if (a.rows != a.cols) throw std::invalid_argument("Cholesky: matrix not square");
        for (int i = 0; i < n_; ++i) {
            for (int j = 0; j <= i; ++j) {
                double s = a.at(i, j);
                for (int k = 0; k < j; ++k) s -= l_.at(i, k) * l_.at(j, k);
                if (i == j) {
                    if (s <= 0.0) throw std::runtime_error("Cholesky: matrix not positive definite");
                    l_.at(i, i) = std::sqrt(s);
                } else {
                    l_.at(i, j) = s / l_.at(j, j);
                }
            }
        }
    }

    // Solves A x = b.
    std::vector<double> solve(const std::vector<double>& b) const {
        std::vector<double> y(n_), x(n_);
        for (int i = 0; i < n_; ++i) {
            double s = b[i];
            for (int k = 0; k < i; ++k) s -= l_.at(i, k) * y[k];
            y[i] = s / l_.at(i, i);
        }
        for (int i = n_ - 1; i >= 0; --i) {
            double s = y[i];
            for (int k = i + 1; k < n_; ++k) s -= l_.at(k, i) * x[k];
            x[i] = s / l_.at(i, i);
        }
        return x;
    }

    // Quadratic form b' A^{-1} b without forming the inverse.
    double quad_form(const std::vector<double>& b) const {
        std::vector<double> y(n_);
        double q = 0.0;
        for (int i = 0; i < n_; ++i) {
            double s = b[i];
            for (int k = 0; k < i; ++k) s -= l_.at(i, k) * y[k];
            y[i] = s / l_.at(i, i);
            q += y[i] * y[i];
        }
        return q;
    }

private:
    int n_;
    Matrix l_;
};

// Numerically stable softmax over a contiguous range, written in place.
inline void softmax_inplace(double* x, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    for (int i = 0; i < n; ++i) x[i] /= sum;
}

}  // namespace oodseg
