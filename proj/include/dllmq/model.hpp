// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale masked diffusion transformer: bidirectional pre-norm blocks
// with scale-only RMS normalization, rotary positions on queries and keys,
// GELU FFN and a biased output head. Weights use the [out x in] layout, y = x W^T.
//
// Every linear layer reads its input through a "site". A site may carry
// activation-side ops (elementwise divide, right-multiplication by a
// matrix) and an activation fake-quantizer; quantization methods install
// these through module `methods`.

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dllmq/ndcore.hpp"
#include "dllmq/quant.hpp"

namespace dllmq {

using TokenBatch = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Closed character alphabet. The mask token takes the last id.
class Tokenizer {
 public:
  static const std::string& alphabet();
  static int pad_id() { return 0; }
  static char pad_char() { return '.'; }
  static int mask_id() { return static_cast<int>(alphabet().size()); }
  static int vocab_size() { return mask_id() + 1; }

  static std::vector<int> encode(const std::string& text);
  static std::string decode(const std::vector<int>& ids);
  static bool known(char c);
};

struct ModelConfig {
  int vocab_size = Tokenizer::vocab_size();
  int mask_token_id = Tokenizer::mask_id();
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int ffn_hidden = 256;
  int max_seq_len = 64;
  std::string variant = "base";
  double norm_eps = 1e-5;
  double rope_base = 10000.0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// Structural identity used to match plans to models.
  std::string signature() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class SiteKind { kQkvIn, kAttnOutIn, kFfnUpIn, kFfnDownIn, kHeadIn };

std::string site_kind_name(SiteKind k);
std::string site_name(int layer, SiteKind k);
/// Parses "L0.ffn.down-in" / "head-in"; throws "unknown_site".
std::pair<int, SiteKind> parse_site(const std::string& name);
/// All sites of a config in forward order (head-in last).
std::vector<std::string> all_sites(const ModelConfig& cfg);
/// Parameter names of the weights that consume a site.
std::vector<std::string> site_weights(const std::string& site);
/// Input channel count of a site.
int site_channels(const ModelConfig& cfg, const std::string& site);

/// Activation-side op at a site input: divide by a vector, or right-multiply
/// by a matrix.
struct ActOp {
  enum class Kind { kDivide, kMatmul };
  Kind kind = Kind::kDivide;
  VectorD scale;
  MatrixD matrix;

  static ActOp divide(VectorD s) { return {Kind::kDivide, std::move(s), {}}; }
  static ActOp multiply(MatrixD m) { return {Kind::kMatmul, {}, std::move(m)}; }
};

struct SiteRuntime {
  std::vector<ActOp> ops;
  std::optional<QuantSpec> act_quant;

  bool empty() const { return ops.empty() && !act_quant; }
};

/// Optional fake quantization of attention states, grouped per head.
struct StateQuant {
  std::optional<QuantSpec> q, k, v;
  bool empty() const { return !q && !k && !v; }
};

/// All trainable tensors. Norm gains and the head bias are stored as 1 x n rows
/// so every parameter is a matrix.
template <typename T>
struct Params {
  struct Layer {
    Matrix<T> norm1, wq, wk, wv, wo, norm2, w_up, w_down;
  };
  Matrix<T> tok_emb;
  std::vector<Layer> layers;
  Matrix<T> norm_f, head, head_bias;

  template <typename F>
  void visit(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      auto& l = layers[i];
      f(p + "norm1", l.norm1);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "norm2", l.norm2);
      f(p + "w_up", l.w_up);
      f(p + "w_down", l.w_down);
    }
    f(std::string("norm_f"), norm_f);
    f(std::string("head"), head);
    f(std::string("head_bias"), head_bias);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<Params*>(this)->visit([&](const std::string& n, Matrix<T>& m) { f(n, static_cast<const Matrix<T>&>(m)); });
  }

  Matrix<T>& get(const std::string& name);
  const Matrix<T>& get(const std::string& name) const;

  static Params zeros_like(const ModelConfig& cfg);
};

template <typename T>
struct Model {
  ModelConfig config;
  Params<T> params;
  std::map<std::string, SiteRuntime> sites;
  StateQuant state_quant;

  /// True when no site ops, quantizers or state quantizers are installed.
  bool is_plain() const;
  SiteRuntime& site(const std::string& name) { return sites[name]; }
};

template <typename U, typename T>
Model<U> cast_model(const Model<T>& m) {
  Model<U> out;
  out.config = m.config;
  out.params = Params<U>::zeros_like(m.config);
  m.params.visit([&](const std::string& n, const Matrix<T>& w) { out.params.get(n) = w.template cast<U>(); });
  out.sites = m.sites;
  out.state_quant = m.state_quant;
  return out;
}

template <typename T>
Model<T> init_model(const ModelConfig& cfg, Rng& rng);

/// Called with (site name, activation) after site ops and before the
/// activation quantizer, one call per site per forward.
template <typename T>
using SiteObserver = std::function<void(const std::string&, const Matrix<T>&)>;

template <typename T>
struct ForwardTrace;

/// Options for forward that only tests and analyses use.
struct ForwardOptions {
  // Skip the rotary position encoding.
  bool zero_positions = false;
};

/// Logits for a batch of sequences, shape [(batch*seq) x vocab], row-major by
/// (sequence, position).
template <typename T>
Matrix<T> forward(const Model<T>& model, const TokenBatch& tokens, ForwardTrace<T>* trace = nullptr,
                  const SiteObserver<T>* observer = nullptr, ForwardOptions opts = {});

/// Gradients of sum(dlogits .* logits) with respect to every parameter, given
/// the trace of the matching forward call. Requires a plain model and
/// default forward options.
template <typename T>
Params<T> backward(const Model<T>& model, const TokenBatch& tokens, const ForwardTrace<T>& trace,
                   const Matrix<T>& dlogits);

template <typename T>
struct ForwardTrace {
  struct Layer {
    Matrix<T> h_in, n1, a, q, k, v, o, h_mid, n2, u, z, g;  // q, k after rotation
    Vector<T> inv1, inv2;
    std::vector<Matrix<T>> probs;  // one [seq x seq] per (sequence, head)
  };
  std::vector<Layer> layers;
  Matrix<T> h_out, nf, fin;
  Vector<T> invf;
};

struct MaskedBatch {
  TokenBatch clean;
  TokenBatch input;  // masked positions carry the mask token
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mask;
  std::vector<double> t;
};

/// Masks exactly round(t*len) positions per row, chosen uniformly at random.
MaskedBatch make_masked_batch(const TokenBatch& clean, double t, int mask_token_id, Rng& rng);

struct LossOptions {
  std::optional<double> t;
  // When set, only these positions may be masked and the per-row
  // normalizer is the eligible count (response-only training).
  const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>* eligible = nullptr;
};

/// Masked-diffusion loss: each token is masked with probability t
/// (t ~ U(1e-3, 1) unless fixed); loss = mean over rows of
/// (1/t) * (1/len) * sum of cross-entropies at masked positions. Writes
/// gradients into `grads` when non-null.
template <typename T>
double mdm_loss(const Model<T>& model, const TokenBatch& clean, Rng& rng, const LossOptions& opts = {},
                Params<T>* grads = nullptr);

}  // namespace dllmq
