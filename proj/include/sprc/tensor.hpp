#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sprc/errors.hpp"

namespace sprc {

/// Dense row-major matrix. Vectors are 1×n matrices.
template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw StructuralError("matrix payload size mismatch");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<T> flat() { return {data_.data(), data_.size()}; }
  std::span<const T> flat() const { return {data_.data(), data_.size()}; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <class T>
std::string shape_str(const Matrix<T>& m) {
  return shape_str(m.rows(), m.cols());
}

namespace detail {

template <class T>
using EigenRowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const EigenRowMajor<T>> view(const Matrix<T>& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

template <class T>
Eigen::Map<EigenRowMajor<T>> view(Matrix<T>& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

}  // namespace detail

// out += a * b
template <class T>
void gemm_nn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  assert(a.cols() == b.rows() && out.rows() == a.rows() && out.cols() == b.cols());
  if (a.size() == 0 || b.size() == 0) return;
  detail::view(out).noalias() += detail::view(a) * detail::view(b);
}

// out += a^T * b
template <class T>
void gemm_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  assert(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols());
  if (a.size() == 0 || b.size() == 0) return;
  detail::view(out).noalias() += detail::view(a).transpose() * detail::view(b);
}

// out += a * b^T
template <class T>
void gemm_nt_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  assert(a.cols() == b.cols() && out.rows() == a.rows() && out.cols() == b.rows());
  if (a.size() == 0 || b.size() == 0) return;
  detail::view(out).noalias() += detail::view(a) * detail::view(b).transpose();
}

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) throw StructuralError("matmul " + shape_str(a) + " x " + shape_str(b));
  Matrix<T> out(a.rows(), b.cols());
  gemm_nn_acc(a, b, out);
  return out;
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <class T>
T l2_norm(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

template <class T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.flat().begin(), m.flat().end(), [](T v) { return std::isfinite(v); });
}

template <class T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) throw StructuralError("shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Fills with N(0, stddev^2) draws. A fresh distribution object per call keeps
/// the generator state the only source of randomness (checkpointable).
template <class T>
void fill_normal(Matrix<T>& m, std::mt19937_64& rng, double stddev) {
  for (auto& v : m.flat()) {
    std::normal_distribution<double> dist(0.0, stddev);
    v = static_cast<T>(dist(rng));
  }
}

template <class T>
Matrix<T> random_normal(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev) {
  Matrix<T> m(rows, cols);
  fill_normal(m, rng, stddev);
  return m;
}

}  // namespace sprc
