#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace vconf {

using real_vector = std::vector<double>;

inline constexpr double neg_inf = -std::numeric_limits<double>::infinity();

// Dense row-major matrix of doubles.
class matrix {
public:
    matrix() = default;
    matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    double & operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    const std::vector<double> & data() const noexcept { return data_; }
    std::vector<double> & data() noexcept { return data_; }

    matrix transposed() const;

    bool operator==(const matrix &) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace kernels {

matrix matmul(const matrix & a, const matrix & b);

// out = x * w for a row vector x of length w.rows().
real_vector vecmat(std::span<const double> x, const matrix & w);

// Masked entries are -inf and map to exactly 0. Throws degenerate_row when every entry is masked.
real_vector softmax(std::span<const double> v);

real_vector log_softmax(std::span<const double> v);

real_vector rms_norm(std::span<const double> v, std::span<const double> gain, double eps);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);

// Lowest index wins ties.
std::size_t argmax(std::span<const double> v);

} // namespace kernels
} // namespace vconf
