// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense array and linear-algebra substrate. Matrices are row-major Eigen
// types templated on scalar; storage is float, while Hessian and
// factorization math runs in double.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dllmq/error.hpp"
#include "dllmq/rng.hpp"

namespace dllmq {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using VectorF = Vector<float>;
using VectorD = Vector<double>;

/// N-dimensional float array used at persistence boundaries. Rejects
/// non-finite values on construction.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::int64_t> shape, std::vector<float> data);

  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    std::vector<float> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
    return Tensor({m.rows(), m.cols()}, std::move(data));
  }

  static Tensor from_vector(const VectorF& v);

  const std::vector<std::int64_t>& shape() const { return shape_; }
  const std::vector<float>& data() const { return data_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  /// Interprets the tensor as a matrix: rank-2 as-is, rank-1 as a row.
  MatrixF to_matrix() const;
  VectorF to_vector() const;

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::int64_t> shape_;
  std::vector<float> data_;
};

std::int64_t shape_product(const std::vector<std::int64_t>& shape);

template <typename DerivedA, typename DerivedB>
auto matmul(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b)
    -> Matrix<typename DerivedA::Scalar> {
  using T = typename DerivedA::Scalar;
  require(a.cols() == b.rows(), "shape_mismatch",
          "matmul: inner extents differ (" + std::to_string(a.cols()) + " vs " +
              std::to_string(b.rows()) + ")");
  Matrix<double> c = a.template cast<double>() * b.template cast<double>();
  return c.template cast<T>();
}

/// (h + damp*I)^-1 through a Cholesky factorization, symmetrized.
MatrixD cholesky_inverse(const MatrixD& h, double damp);

inline bool is_power_of_two(std::int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

/// Orthonormal Sylvester-Walsh-Hadamard matrix, entries +-1/sqrt(n).
template <typename T = double>
Matrix<T> hadamard(std::int64_t n) {
  require(is_power_of_two(n), "not_power_of_two",
          "hadamard: extent " + std::to_string(n) + " is not a power of two");
  Matrix<double> h = Matrix<double>::Ones(1, 1);
  while (h.rows() < n) {
    const Eigen::Index k = h.rows();
    Matrix<double> next(2 * k, 2 * k);
    next << h, h, h, -h;
    h = std::move(next);
  }
  h /= std::sqrt(static_cast<double>(n));
  return h.template cast<T>();
}

/// D*H with D a random +-1 diagonal.
template <typename T = double>
Matrix<T> random_sign_hadamard(std::int64_t n, Rng& rng) {
  Matrix<double> h = hadamard<double>(n);
  for (std::int64_t i = 0; i < n; ++i)
    if (rng.next_u64() & 1ULL) h.row(i) *= -1.0;
  return h.template cast<T>();
}

template <typename T>
Matrix<T> random_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0) {
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<T>(rng.normal() * stddev);
  return m;
}

/// Max-abs deviation of q*q^T from the identity.
template <typename Derived>
double orthogonality_error(const Eigen::MatrixBase<Derived>& q) {
  Matrix<double> qd = q.template cast<double>();
  Matrix<double> p = qd * qd.transpose();
  p -= Matrix<double>::Identity(q.rows(), q.rows());
  return p.cwiseAbs().maxCoeff();
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace dllmq
