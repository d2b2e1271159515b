// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include "dllmq/ndcore.hpp"

#include <algorithm>

namespace dllmq {

std::int64_t shape_product(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    require(e >= 0, "shape_mismatch", "negative extent in shape");
    n *= e;
  }
  return n;
}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(shape_product(shape_) == static_cast<std::int64_t>(data_.size()), "shape_mismatch",
          "tensor: shape product does not match data length");
  require(std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); }),
          "non_finite", "tensor: NaN or Inf entry");
}

Tensor Tensor::from_vector(const VectorF& v) {
  return Tensor({v.size()}, std::vector<float>(v.data(), v.data() + v.size()));
}

MatrixF Tensor::to_matrix() const {
  require(shape_.size() == 1 || shape_.size() == 2, "shape_mismatch",
          "tensor: rank " + std::to_string(shape_.size()) + " cannot be viewed as a matrix");
  const Eigen::Index rows = shape_.size() == 2 ? shape_[0] : 1;
  const Eigen::Index cols = shape_.back();
  MatrixF m(rows, cols);
  std::copy(data_.begin(), data_.end(), m.data());
  return m;
}

VectorF Tensor::to_vector() const {
  VectorF v(static_cast<Eigen::Index>(data_.size()));
  std::copy(data_.begin(), data_.end(), v.data());
  return v;
}

MatrixD cholesky_inverse(const MatrixD& h, double damp) {
  require(h.rows() == h.cols(), "shape_mismatch", "cholesky_inverse: matrix is not square");
  require(damp >= 0.0, "invalid_argument", "cholesky_inverse: negative damping");
  const double scale = std::max(1.0, h.cwiseAbs().maxCoeff());
  require((h - h.transpose()).cwiseAbs().maxCoeff() <= 1e-8 * scale, "not_symmetric",
          "cholesky_inverse: matrix is not symmetric");
  MatrixD damped = h;
  damped.diagonal().array() += damp;
  Eigen::LLT<MatrixD> llt(damped);
  require(llt.info() == Eigen::Success, "not_positive_definite",
          "cholesky_inverse: matrix not positive definite after damping");
  MatrixD inv = llt.solve(MatrixD::Identity(h.rows(), h.cols()));
  require(inv.allFinite(), "not_positive_definite", "cholesky_inverse: non-finite inverse");
  return 0.5 * (inv + inv.transpose());
}

}  // namespace dllmq
