// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Uniform affine quantization:
//
//   X_q = clamp(round(X / s) + z, 0, 2^b - 1)
//   s   = (max - min) / (2^b - 1),  z = -round(min / s)
//
// round() is round-half-away-from-zero. The asymmetric range is widened to
// contain zero so z always lies on the code grid. Symmetric mode uses
// s = clip * max|x| / (2^(b-1) - 1) with z = 2^(b-1).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dllmq/ndcore.hpp"

namespace dllmq {

enum class Granularity { kPerTensor, kPerChannel, kPerGroup, kPerToken };

std::string to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

struct QuantSpec {
  int bits = 8;
  bool symmetric = false;
  Granularity granularity = Granularity::kPerTensor;
  // Channel axis for per-channel; grouping axis for per-group.
  int axis = 0;
  int group_size = 128;
  double clip_ratio = 1.0;

  static QuantSpec per_tensor(int bits, bool symmetric = false);
  static QuantSpec per_channel(int bits, int axis = 0, bool symmetric = false);
  static QuantSpec per_group(int bits, int group_size, int axis = 1, bool symmetric = false);
  static QuantSpec per_token(int bits, bool symmetric = false);

  QuantSpec with_clip(double ratio) const {
    QuantSpec s = *this;
    s.clip_ratio = ratio;
    return s;
  }

  std::uint32_t max_code() const { return (1u << bits) - 1u; }

  /// Throws on bits outside [2,16] or clip outside (0,1].
  void validate() const;

  bool operator==(const QuantSpec&) const = default;
};

struct QParams {
  float scale = 1.0f;
  std::int32_t zero_point = 0;

  bool operator==(const QParams&) const = default;
};

inline constexpr double kDegenerateScale = 1e-8;

struct QuantizedTensor {
  std::vector<std::uint16_t> codes;
  std::vector<QParams> params;
  QuantSpec spec;
  std::vector<std::int64_t> original_shape;
};

/// Rectangular block of a rows x cols matrix holding one quantization group.
struct GroupBlock {
  Eigen::Index row, col, rows, cols;
};

/// Groups in row-major group order. Throws "granularity_mismatch" when the
/// shape cannot be tiled by the spec.
std::vector<GroupBlock> group_layout(Eigen::Index rows, Eigen::Index cols, const QuantSpec& spec);

QParams compute_qparams(std::span<const float> x, const QuantSpec& spec);

/// Min/max form used by compute_qparams; exposed for callers holding range
/// statistics only.
QParams qparams_from_range(double lo, double hi, const QuantSpec& spec);

inline std::uint16_t quantize_value(double x, const QParams& p, std::uint32_t max_code) {
  double q = std::round(x / static_cast<double>(p.scale)) + p.zero_point;
  q = std::clamp(q, 0.0, static_cast<double>(max_code));
  return static_cast<std::uint16_t>(q);
}

inline float dequantize_value(std::uint16_t code, const QParams& p) {
  return static_cast<float>((static_cast<double>(code) - p.zero_point) * static_cast<double>(p.scale));
}

QuantizedTensor quantize(const MatrixF& x, const QuantSpec& spec);
/// Rank >= 1 tensors are viewed as [prod(leading dims) x last dim].
QuantizedTensor quantize(const Tensor& x, const QuantSpec& spec);

/// Returns the dequantized values as a [rows x cols] matrix.
MatrixF dequantize_matrix(const QuantizedTensor& q);
Tensor dequantize(const QuantizedTensor& q);

MatrixF fake_quant(const MatrixF& x, const QuantSpec& spec);
Tensor fake_quant(const Tensor& x, const QuantSpec& spec);

/// In-place fake quantization of every row independently along the last
/// axis; the activation hot path. `group` > 0 splits rows into groups.
template <typename T>
void fake_quant_rows_inplace(Matrix<T>& x, const QuantSpec& spec, Eigen::Index group = 0);

/// Validates the QuantizedTensor invariants; throws "corrupt_quantized".
void validate(const QuantizedTensor& q);

}  // namespace dllmq
