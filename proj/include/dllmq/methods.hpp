// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Post-training quantization methods. Each method emits a TransformPlan:
// an ordered list of function-preserving rewrites (norm folding, residual
// rotation, per-site scales, rotations and permutations), followed by the
// quantized weight replacements and the activation quantizers to install.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dllmq/calib.hpp"
#include "dllmq/modelio.hpp"

namespace dllmq {

enum class Method { kRtn, kGptq, kAwq, kSmoothQuant, kQuaRot, kDuQuant };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
bool is_weight_only(Method m);

/// "W4A16" style label; 16 activation bits means weight-only.
struct BitSetting {
  int weight_bits = 4;
  int act_bits = 16;

  std::string label() const;
  static BitSetting parse(const std::string& s);
};

struct MethodConfig {
  Method method = Method::kRtn;
  QuantSpec weight_spec = QuantSpec::per_group(4, 128);
  std::optional<QuantSpec> act_spec;

  double alpha = 0.5;         // smoothing migration strength
  int awq_grid = 20;          // alpha grid {0, 1/G, ..., 1}
  double damp_frac = 0.01;    // GPTQ damping, fraction of mean diag(H)
  int gptq_block = 128;       // GPTQ lazy-update block, columns
  bool act_order = false;     // GPTQ: columns by descending diag(H)
  int rotation_steps = 32;    // DuQuant greedy steps per block
  int block_size = 32;        // DuQuant rotation block
  double act_clip = 0.9;      // DuQuant activation clip ratio
  double weight_clip = 0.8;   // DuQuant weight clip ratio
  bool keep_query_fp = true;  // QuaRot: queries unquantized, keys/values quantized
  bool quantize_head = false;
  std::uint64_t seed = 0;

  /// Throws "invalid_config" on inconsistent settings, including an
  /// act_spec on a weight-only method.
  void validate() const;
  nlohmann::json to_json() const;
  static MethodConfig from_json(const nlohmann::json& j);

  /// Defaults for a method at a bit setting: per-group(128) asymmetric
  /// weights for weight-only methods, per-channel weights with per-token
  /// activations otherwise (symmetric for QuaRot).
  static MethodConfig defaults(Method m, const BitSetting& bits);
};

struct PlanOp {
  enum class Kind {
    kFoldNorms,         // multiply norm gains into consuming weights
    kUnfoldNorms,       // inverse of kFoldNorms
    kResidualRotation,  // residual stream h -> h Q
    kSiteScale,         // site input x -> x / s
    kSiteRotation,      // site input x -> x R
    kSitePermutation,   // site input column j <- column perm[j]
  };
  Kind kind = Kind::kFoldNorms;
  std::string site;
  bool fold = false;  // kSiteScale: absorb 1/s into the preceding norm gain
  VectorD scale;
  MatrixD matrix;
  std::vector<int> perm;
  std::map<std::string, VectorD> gains;  // norm name -> gain, for (un)folding
};

std::string to_string(PlanOp::Kind k);

struct TransformPlan {
  std::string method;
  std::string signature;
  std::uint64_t seed = 0;
  nlohmann::json hyper = nlohmann::json::object();
  nlohmann::json stats = nlohmann::json::object();

  std::vector<PlanOp> ops;
  std::map<std::string, QuantizedTensor> weights;
  std::map<std::string, QuantSpec> act_quant;
  StateQuant state_quant;

  bool empty() const { return ops.empty() && weights.empty() && act_quant.empty() && state_quant.empty(); }
  /// Orthogonality of rotations, bijectivity of permutations, positive scales.
  void validate() const;
};

struct ApplyOptions {
  // Install weight replacements, activation and state quantizers.
  bool quantizers = true;
};

/// Throws "signature_mismatch" when the plan was built for another
/// architecture.
Model<float> apply_plan(const Model<float>& model, const TransformPlan& plan, const ApplyOptions& opts = {});

/// Inverse of the rewrite ops in reverse order; quantizers are dropped.
TransformPlan invert(const TransformPlan& plan);

Container plan_to_container(const TransformPlan& plan);
TransformPlan plan_from_container(const Container& c);

/// Effective weight spec for a layer with `in_features` inputs: the group
/// size is clamped to the input width.
QuantSpec weight_spec_for(const QuantSpec& spec, Eigen::Index in_features);

/// Weight matrices quantized by a config, in forward order.
std::vector<std::string> quantized_weights(const ModelConfig& cfg, const MethodConfig& mc);

// Layer-level kernels. W is [out x in]; H is [in x in].

/// tr(D H D^T) with D = W_hat - W.
double proxy_loss(const MatrixD& w, const MatrixD& w_hat, const MatrixD& h);

/// GPTQ column-by-column quantization with error feedback. `spec` must be
/// per-channel (axis 0) or per-group along the input axis.
QuantizedTensor gptq_quantize(const MatrixD& w, const MatrixD& h, const QuantSpec& spec, double damp_frac = 0.01,
                              int block = 128, bool act_order = false);

struct AwqSearch {
  std::vector<double> alphas;
  std::vector<double> losses;
  int best = 0;
  VectorD scale;
};

/// Scale search for the weights reading one site, given the site inputs X.
AwqSearch awq_search(const MatrixD& x, const std::vector<MatrixD>& weights, const QuantSpec& spec, int grid);

/// max|X_j|^alpha / max|W_j|^(1-alpha), both floored at 1e-5.
VectorD smooth_scales(const VectorD& act_absmax, const VectorD& weight_absmax, double alpha);

/// Serpentine dealing of channels, ranked by descending magnitude, into
/// blocks. Returns perm with new position j reading old channel perm[j].
std::vector<int> zigzag_permutation(const VectorD& magnitude, int block);

struct GreedyRotation {
  MatrixD rotation;  // [channels x channels], block diagonal
  std::vector<int> steps;  // accepted steps per block
};

/// Per block: move the channel holding the largest |x| to position 0 and
/// apply the block Hadamard while that lowers the block maximum.
GreedyRotation greedy_block_rotation(const MatrixD& x, int block, int max_steps);

/// Calibration for methods that need data.
struct CalibContext {
  const CalibSet* calib = nullptr;
  std::uint64_t seed = 0;
  double mask_fraction = 0.5;
};

TransformPlan build_plan(const Model<float>& model, const MethodConfig& mc, const CalibContext& ctx);

/// build_plan followed by apply_plan.
Model<float> quantize_model(const Model<float>& model, const MethodConfig& mc, const CalibContext& ctx,
                            TransformPlan* plan_out = nullptr);

}  // namespace dllmq
