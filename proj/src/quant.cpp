// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include "dllmq/quant.hpp"

#include <algorithm>
#include <limits>

namespace dllmq {

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::kPerTensor: return "per_tensor";
    case Granularity::kPerChannel: return "per_channel";
    case Granularity::kPerGroup: return "per_group";
    case Granularity::kPerToken: return "per_token";
  }
  return "?";
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "per_tensor") return Granularity::kPerTensor;
  if (s == "per_channel") return Granularity::kPerChannel;
  if (s == "per_group") return Granularity::kPerGroup;
  if (s == "per_token") return Granularity::kPerToken;
  fail("invalid_config", "unknown granularity '" + s + "'");
}

QuantSpec QuantSpec::per_tensor(int bits, bool symmetric) {
  QuantSpec s;
  s.bits = bits;
  s.symmetric = symmetric;
  s.granularity = Granularity::kPerTensor;
  return s;
}

QuantSpec QuantSpec::per_channel(int bits, int axis, bool symmetric) {
  QuantSpec s = per_tensor(bits, symmetric);
  s.granularity = Granularity::kPerChannel;
  s.axis = axis;
  return s;
}

QuantSpec QuantSpec::per_group(int bits, int group_size, int axis, bool symmetric) {
  QuantSpec s = per_tensor(bits, symmetric);
  s.granularity = Granularity::kPerGroup;
  s.axis = axis;
  s.group_size = group_size;
  return s;
}

QuantSpec QuantSpec::per_token(int bits, bool symmetric) {
  QuantSpec s = per_tensor(bits, symmetric);
  s.granularity = Granularity::kPerToken;
  s.axis = 1;
  return s;
}

void QuantSpec::validate() const {
  require(bits >= 2 && bits <= 16, "invalid_spec", "bits must lie in [2,16], got " + std::to_string(bits));
  require(clip_ratio > 0.0 && clip_ratio <= 1.0, "invalid_spec", "clip_ratio must lie in (0,1]");
  if (granularity == Granularity::kPerChannel || granularity == Granularity::kPerGroup)
    require(axis == 0 || axis == 1, "invalid_spec", "axis must be 0 or 1");
  if (granularity == Granularity::kPerGroup)
    require(group_size > 0, "invalid_spec", "group_size must be positive");
}

std::vector<GroupBlock> group_layout(Eigen::Index rows, Eigen::Index cols, const QuantSpec& spec) {
  spec.validate();
  std::vector<GroupBlock> out;
  switch (spec.granularity) {
    case Granularity::kPerTensor:
      out.push_back({0, 0, rows, cols});
      break;
    case Granularity::kPerToken:
      for (Eigen::Index r = 0; r < rows; ++r) out.push_back({r, 0, 1, cols});
      break;
    case Granularity::kPerChannel:
      if (spec.axis == 0) {
        for (Eigen::Index r = 0; r < rows; ++r) out.push_back({r, 0, 1, cols});
      } else {
        for (Eigen::Index c = 0; c < cols; ++c) out.push_back({0, c, rows, 1});
      }
      break;
    case Granularity::kPerGroup: {
      const Eigen::Index g = spec.group_size;
      const Eigen::Index extent = spec.axis == 1 ? cols : rows;
      require(extent % g == 0, "granularity_mismatch",
              "group size " + std::to_string(g) + " does not divide axis extent " + std::to_string(extent));
      if (spec.axis == 1) {
        for (Eigen::Index r = 0; r < rows; ++r)
          for (Eigen::Index c = 0; c < cols; c += g) out.push_back({r, c, 1, g});
      } else {
        for (Eigen::Index r = 0; r < rows; r += g)
          for (Eigen::Index c = 0; c < cols; ++c) out.push_back({r, c, g, 1});
      }
      break;
    }
  }
  return out;
}

QParams qparams_from_range(double lo, double hi, const QuantSpec& spec) {
  spec.validate();
  QParams p;
  if (spec.symmetric) {
    const double amax = spec.clip_ratio * std::max(std::abs(lo), std::abs(hi));
    if (amax <= 0.0) return {static_cast<float>(kDegenerateScale), 0};
    const double half = static_cast<double>((1u << (spec.bits - 1)) - 1u);
    p.scale = static_cast<float>(amax / half);
    p.zero_point = static_cast<std::int32_t>(1u << (spec.bits - 1));
    return p;
  }
  lo = std::min(lo, 0.0) * spec.clip_ratio;
  hi = std::max(hi, 0.0) * spec.clip_ratio;
  if (hi - lo <= 0.0) return {static_cast<float>(kDegenerateScale), 0};
  const double levels = static_cast<double>(spec.max_code());
  p.scale = static_cast<float>((hi - lo) / levels);
  if (!(p.scale > 0.0f)) p.scale = std::numeric_limits<float>::min();
  // -round(lo / s) with s = (hi - lo) / levels, evaluated without the
  // intermediate division so exact half-steps stay exact.
  const double z = -std::round(lo * levels / (hi - lo));
  p.zero_point = static_cast<std::int32_t>(std::clamp(z, 0.0, levels));
  return p;
}

QParams compute_qparams(std::span<const float> x, const QuantSpec& spec) {
  require(!x.empty(), "empty_slice", "compute_qparams: empty slice");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (float v : x) {
    require(std::isfinite(v), "non_finite", "compute_qparams: non-finite entry");
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  return qparams_from_range(lo, hi, spec);
}

namespace {

template <typename Block>
QParams block_qparams(const Block& b, const QuantSpec& spec) {
  require(b.size() > 0, "empty_slice", "quantize: empty group");
  require(b.allFinite(), "non_finite", "quantize: non-finite entry");
  return qparams_from_range(static_cast<double>(b.minCoeff()), static_cast<double>(b.maxCoeff()), spec);
}

}  // namespace

QuantizedTensor quantize(const MatrixF& x, const QuantSpec& spec) {
  QuantizedTensor q;
  q.spec = spec;
  q.original_shape = {x.rows(), x.cols()};
  q.codes.resize(static_cast<std::size_t>(x.size()));
  const auto max_code = spec.max_code();
  for (const auto& g : group_layout(x.rows(), x.cols(), spec)) {
    auto block = x.block(g.row, g.col, g.rows, g.cols);
    const QParams p = block_qparams(block, spec);
    q.params.push_back(p);
    for (Eigen::Index r = 0; r < g.rows; ++r)
      for (Eigen::Index c = 0; c < g.cols; ++c)
        q.codes[static_cast<std::size_t>((g.row + r) * x.cols() + g.col + c)] =
            quantize_value(block(r, c), p, max_code);
  }
  return q;
}

namespace {

MatrixF as_rows(const Tensor& x) {
  require(!x.shape().empty(), "shape_mismatch", "quantize: scalar tensors are not supported");
  const std::int64_t cols = x.shape().back();
  const std::int64_t rows = cols == 0 ? 0 : x.numel() / cols;
  MatrixF m(rows, cols);
  std::copy(x.data().begin(), x.data().end(), m.data());
  return m;
}

}  // namespace

QuantizedTensor quantize(const Tensor& x, const QuantSpec& spec) {
  QuantizedTensor q = quantize(as_rows(x), spec);
  q.original_shape = x.shape();
  return q;
}

void validate(const QuantizedTensor& q) {
  q.spec.validate();
  const std::int64_t n = shape_product(q.original_shape);
  require(static_cast<std::int64_t>(q.codes.size()) == n, "corrupt_quantized", "code count does not match shape");
  const std::int64_t cols = q.original_shape.empty() ? 1 : q.original_shape.back();
  const std::int64_t rows = cols == 0 ? 0 : n / cols;
  const auto groups = group_layout(rows, cols, q.spec);
  require(groups.size() == q.params.size(), "corrupt_quantized", "parameter count does not match groups");
  const auto max_code = q.spec.max_code();
  for (auto c : q.codes) require(c <= max_code, "corrupt_quantized", "code outside [0, 2^b-1]");
  for (const auto& p : q.params) {
    require(p.scale > 0.0f && std::isfinite(p.scale), "corrupt_quantized", "non-positive scale");
    require(p.zero_point >= 0 && static_cast<std::uint32_t>(p.zero_point) <= max_code, "corrupt_quantized",
            "zero point outside code range");
  }
}

MatrixF dequantize_matrix(const QuantizedTensor& q) {
  validate(q);
  const std::int64_t cols = q.original_shape.back();
  const std::int64_t rows = cols == 0 ? 0 : shape_product(q.original_shape) / cols;
  MatrixF out(rows, cols);
  const auto groups = group_layout(rows, cols, q.spec);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    for (Eigen::Index r = 0; r < g.rows; ++r)
      for (Eigen::Index c = 0; c < g.cols; ++c) {
        const auto idx = (g.row + r) * cols + g.col + c;
        out(g.row + r, g.col + c) = dequantize_value(q.codes[static_cast<std::size_t>(idx)], q.params[gi]);
      }
  }
  return out;
}

Tensor dequantize(const QuantizedTensor& q) {
  MatrixF m = dequantize_matrix(q);
  return Tensor(q.original_shape, std::vector<float>(m.data(), m.data() + m.size()));
}

MatrixF fake_quant(const MatrixF& x, const QuantSpec& spec) {
  MatrixF out(x.rows(), x.cols());
  const auto max_code = spec.max_code();
  for (const auto& g : group_layout(x.rows(), x.cols(), spec)) {
    auto block = x.block(g.row, g.col, g.rows, g.cols);
    const QParams p = block_qparams(block, spec);
    for (Eigen::Index r = 0; r < g.rows; ++r)
      for (Eigen::Index c = 0; c < g.cols; ++c)
        out(g.row + r, g.col + c) = dequantize_value(quantize_value(block(r, c), p, max_code), p);
  }
  return out;
}

Tensor fake_quant(const Tensor& x, const QuantSpec& spec) {
  MatrixF m = fake_quant(as_rows(x), spec);
  return Tensor(x.shape(), std::vector<float>(m.data(), m.data() + m.size()));
}

template <typename T>
void fake_quant_rows_inplace(Matrix<T>& x, const QuantSpec& spec, Eigen::Index group) {
  const Eigen::Index g = group > 0 ? group : x.cols();
  require(x.cols() % g == 0, "granularity_mismatch", "row group does not divide the feature extent");
  const auto max_code = spec.max_code();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c0 = 0; c0 < x.cols(); c0 += g) {
      auto seg = x.row(r).segment(c0, g);
      // Activations are stored as float at site boundaries.
      const QParams p = qparams_from_range(static_cast<double>(static_cast<float>(seg.minCoeff())),
                                           static_cast<double>(static_cast<float>(seg.maxCoeff())), spec);
      for (Eigen::Index c = 0; c < g; ++c)
        seg(c) = static_cast<T>(dequantize_value(quantize_value(static_cast<float>(seg(c)), p, max_code), p));
    }
  }
}

template void fake_quant_rows_inplace<float>(Matrix<float>&, const QuantSpec&, Eigen::Index);
template void fake_quant_rows_inplace<double>(Matrix<double>&, const QuantSpec&, Eigen::Index);

}  // namespace dllmq
