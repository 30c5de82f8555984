#pragma once

// Dense 64-bit linear algebra and numerically stable special functions.
//
// Matrices are row-major. Vectors are plain std::vector<double>; functions
// take std::span<const double> so rows of a Matrix can be passed directly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oodforge/error.hpp"

namespace oodforge {

using Vector = std::vector<double>;

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string(what) + ": non-finite value");
    }
  }
}

}  // namespace detail

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    detail::require_finite(std::span<const double>(&fill, 1), "Matrix");
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ConfigError("Matrix: data length " + std::to_string(data_.size()) +
                        " != " + std::to_string(rows_) + "x" +
                        std::to_string(cols_));
    }
    detail::require_finite(data_, "Matrix");
  }

  // Nested row lists, e.g. Matrix::from_rows({{4, 2}, {2, 5}}).
  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.front().size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ConfigError("Matrix: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw ConfigError("argmax: empty input");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// y = A x
inline Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) {
    throw ConfigError("matvec: matrix has " + std::to_string(a.cols()) +
                      " columns, vector has " + std::to_string(x.size()));
  }
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ConfigError("matmul: inner dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline double frobenius_norm(const Matrix& a) { return norm2(a.data()); }

inline double logsumexp(std::span<const double> v) {
  if (v.empty()) throw ConfigError("logsumexp: empty input");
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline Vector softmax(std::span<const double> v) {
  const double lse = logsumexp(v);
  Vector p(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = std::exp(v[i] - lse);
  return p;
}

inline Vector l2_normalize(std::span<const double> v) {
  const double n = norm2(v);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw NumericalError("l2_normalize: zero or non-finite vector");
  }
  Vector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

// Lower-triangular L with L L^T = A. Inputs within 1e-10 of symmetric are
// symmetrized as (A + A^T) / 2; anything further off is rejected.
inline Matrix cholesky(const Matrix& a) {
  if (a.rows() != a.cols()) throw ConfigError("cholesky: matrix is not square");
  const std::size_t n = a.rows();
  double scale = 0.0;
  for (double x : a.data()) scale = std::max(scale, std::abs(x));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(a(i, j) - a(j, i)) > 1e-10 * std::max(1.0, scale)) {
        throw ConfigError("cholesky: matrix is not symmetric at (" +
                          std::to_string(i) + "," + std::to_string(j) + ")");
      }

  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw NotPositiveDefinite(j, d);
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.5 * (a(i, j) + a(j, i));
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

// Solves L y = b for lower-triangular L.
inline Vector forward_substitute(const Matrix& l, std::span<const double> b) {
  if (l.rows() != l.cols() || l.rows() != b.size()) {
    throw ConfigError("forward_substitute: dimension mismatch");
  }
  const std::size_t n = b.size();
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  return y;
}

// Solves (L L^T) x = b given the Cholesky factor L.
inline Vector solve_spd(const Matrix& l, std::span<const double> b) {
  Vector y = forward_substitute(l, b);
  const std::size_t n = y.size();
  Vector x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

// Nearest-rank percentile: the element at index ceil(q n) - 1 of the sorted
// values, clamped to [0, n - 1]. Products q n within 1e-9 of an integer are
// treated as that integer so that q = 1 - 0.95 behaves like q = 0.05.
inline double percentile_nearest_rank(std::span<const double> values, double q) {
  if (values.empty()) throw ConfigError("percentile_nearest_rank: empty input");
  if (!(q >= 0.0 && q <= 1.0)) {
    throw ConfigError("percentile_nearest_rank: q outside [0, 1]");
  }
  Vector sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  const double rank = std::ceil(q * n - 1e-9) - 1.0;
  const auto idx = static_cast<std::size_t>(std::clamp(rank, 0.0, n - 1.0));
  return sorted[idx];
}

}  // namespace oodforge
