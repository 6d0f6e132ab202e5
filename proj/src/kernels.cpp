#include "vconf/kernels.hpp"

#include "vconf/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace vconf {

matrix::matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

matrix::matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw error(error_kind::shape, "matrix data length " + std::to_string(data_.size()) +
                                           " != " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

matrix matrix::identity(std::size_t n) {
    matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

matrix matrix::transposed() const {
    matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

namespace kernels {

matrix matmul(const matrix & a, const matrix & b) {
    if (a.cols() != b.rows()) {
        throw error(error_kind::shape, "matmul (" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                           ") x (" + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
    }
    matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out_row = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto b_row = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
        }
    }
    return out;
}

real_vector vecmat(std::span<const double> x, const matrix & w) {
    if (x.size() != w.rows()) {
        throw error(error_kind::shape, "vecmat length " + std::to_string(x.size()) + " vs rows " +
                                           std::to_string(w.rows()));
    }
    real_vector out(w.cols(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double xk = x[k];
        if (xk == 0.0) continue;
        auto w_row = w.row(k);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += xk * w_row[j];
    }
    return out;
}

real_vector softmax(std::span<const double> v) {
    if (v.empty()) throw error(error_kind::validation, "softmax of empty vector");
    double max_v = neg_inf;
    for (double x : v) max_v = std::max(max_v, x);
    if (max_v == neg_inf) throw error(error_kind::degenerate_row, "every softmax entry is masked");

    real_vector out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = v[i] == neg_inf ? 0.0 : std::exp(v[i] - max_v);
        total += out[i];
    }
    for (double & x : out) x /= total;
    return out;
}

real_vector log_softmax(std::span<const double> v) {
    if (v.empty()) throw error(error_kind::validation, "log_softmax of empty vector");
    double max_v = neg_inf;
    for (double x : v) max_v = std::max(max_v, x);
    if (max_v == neg_inf) throw error(error_kind::degenerate_row, "every log_softmax entry is masked");
    double total = 0.0;
    for (double x : v)
        if (x != neg_inf) total += std::exp(x - max_v);
    const double log_z = max_v + std::log(total);
    real_vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - log_z;
    return out;
}

real_vector rms_norm(std::span<const double> v, std::span<const double> gain, double eps) {
    if (v.size() != gain.size()) {
        throw error(error_kind::shape, "rms_norm length " + std::to_string(v.size()) + " vs gain " +
                                           std::to_string(gain.size()));
    }
    double mean_sq = 0.0;
    for (double x : v) mean_sq += x * x;
    mean_sq /= static_cast<double>(v.size());
    const double denom = std::sqrt(mean_sq + eps);
    real_vector out(v.size());
    if (denom == 0.0) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = gain[i] * v[i] / denom;
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw error(error_kind::shape, "dot length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw error(error_kind::validation, "argmax of empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

} // namespace kernels
} // namespace vconf
