// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include "dllmq/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace dllmq {

// ---------------------------------------------------------------------------
// Tokenizer

const std::string& Tokenizer::alphabet() {
  static const std::string kAlphabet = ".abcdefghijklmnopqrstuvwxyz0123456789+-=:;,?>#()[]{}";
  return kAlphabet;
}

bool Tokenizer::known(char c) { return alphabet().find(c) != std::string::npos; }

std::vector<int> Tokenizer::encode(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) {
    const auto pos = alphabet().find(c);
    require(pos != std::string::npos, "unknown_character",
            std::string("tokenizer: character '") + c + "' is outside the alphabet");
    ids.push_back(static_cast<int>(pos));
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == mask_id()) {
      out.push_back('_');
    } else {
      require(id >= 0 && id < mask_id(), "token_out_of_range", "tokenizer: id out of range");
      out.push_back(alphabet()[static_cast<std::size_t>(id)]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config and sites

void ModelConfig::validate() const {
  require(vocab_size > 1, "invalid_config", "vocab_size must exceed 1");
  require(mask_token_id >= 0 && mask_token_id < vocab_size, "invalid_config", "mask_token_id outside vocabulary");
  require(n_heads > 0 && d_model % n_heads == 0, "invalid_config", "d_model must be divisible by n_heads");
  require(is_power_of_two(d_model), "invalid_config", "d_model must be a power of two");
  require(is_power_of_two(ffn_hidden), "invalid_config", "ffn_hidden must be a power of two");
  require(n_layers >= 1, "invalid_config", "n_layers must be positive");
  require(max_seq_len >= 1, "invalid_config", "max_seq_len must be positive");
  require(head_dim() % 2 == 0, "invalid_config", "head_dim must be even for rotary positions");
  require(rope_base > 1.0, "invalid_config", "rope_base must exceed 1");
  require(variant == "base" || variant == "instruct", "invalid_config", "variant must be base or instruct");
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"vocab_size", vocab_size}, {"mask_token_id", mask_token_id}, {"d_model", d_model},
                        {"n_layers", n_layers},     {"n_heads", n_heads},             {"ffn_hidden", ffn_hidden},
                        {"max_seq_len", max_seq_len}, {"variant", variant},           {"norm_eps", norm_eps},
                        {"rope_base", rope_base}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.mask_token_id = j.at("mask_token_id").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.ffn_hidden = j.at("ffn_hidden").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.variant = j.at("variant").get<std::string>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.rope_base = j.at("rope_base").get<double>();
  c.validate();
  return c;
}

std::string ModelConfig::signature() const {
  std::ostringstream os;
  os << "v" << vocab_size << "-d" << d_model << "-l" << n_layers << "-h" << n_heads << "-f" << ffn_hidden << "-s"
     << max_seq_len;
  return os.str();
}

std::string site_kind_name(SiteKind k) {
  switch (k) {
    case SiteKind::kQkvIn: return "attn.qkv-in";
    case SiteKind::kAttnOutIn: return "attn.out-in";
    case SiteKind::kFfnUpIn: return "ffn.up-in";
    case SiteKind::kFfnDownIn: return "ffn.down-in";
    case SiteKind::kHeadIn: return "head-in";
  }
  return "?";
}

std::string site_name(int layer, SiteKind k) {
  if (k == SiteKind::kHeadIn) return "head-in";
  return "L" + std::to_string(layer) + "." + site_kind_name(k);
}

std::pair<int, SiteKind> parse_site(const std::string& name) {
  if (name == "head-in") return {-1, SiteKind::kHeadIn};
  const auto dot = name.find('.');
  if (name.size() > 1 && name[0] == 'L' && dot != std::string::npos && dot > 1) {
    const std::string num = name.substr(1, dot - 1);
    const std::string kind = name.substr(dot + 1);
    if (std::all_of(num.begin(), num.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      const int layer = std::stoi(num);
      for (auto k : {SiteKind::kQkvIn, SiteKind::kAttnOutIn, SiteKind::kFfnUpIn, SiteKind::kFfnDownIn})
        if (site_kind_name(k) == kind) return {layer, k};
    }
  }
  fail("unknown_site", "unknown site '" + name + "'");
}

std::vector<std::string> all_sites(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (auto k : {SiteKind::kQkvIn, SiteKind::kAttnOutIn, SiteKind::kFfnUpIn, SiteKind::kFfnDownIn})
      out.push_back(site_name(l, k));
  out.push_back("head-in");
  return out;
}

std::vector<std::string> site_weights(const std::string& site) {
  const auto [layer, kind] = parse_site(site);
  const std::string p = "layers." + std::to_string(layer) + ".";
  switch (kind) {
    case SiteKind::kQkvIn: return {p + "wq", p + "wk", p + "wv"};
    case SiteKind::kAttnOutIn: return {p + "wo"};
    case SiteKind::kFfnUpIn: return {p + "w_up"};
    case SiteKind::kFfnDownIn: return {p + "w_down"};
    case SiteKind::kHeadIn: return {"head"};
  }
  return {};
}

int site_channels(const ModelConfig& cfg, const std::string& site) {
  const auto [layer, kind] = parse_site(site);
  require(kind == SiteKind::kHeadIn || layer < cfg.n_layers, "unknown_site", "site layer out of range: " + site);
  return kind == SiteKind::kFfnDownIn ? cfg.ffn_hidden : cfg.d_model;
}

// ---------------------------------------------------------------------------
// Params and model

template <typename T>
Matrix<T>& Params<T>::get(const std::string& name) {
  Matrix<T>* found = nullptr;
  visit([&](const std::string& n, Matrix<T>& m) {
    if (n == name) found = &m;
  });
  require(found != nullptr, "unknown_parameter", "unknown parameter '" + name + "'");
  return *found;
}

template <typename T>
const Matrix<T>& Params<T>::get(const std::string& name) const {
  return const_cast<Params*>(this)->get(name);
}

template <typename T>
Params<T> Params<T>::zeros_like(const ModelConfig& cfg) {
  Params p;
  const auto d = cfg.d_model, f = cfg.ffn_hidden, v = cfg.vocab_size;
  p.tok_emb = Matrix<T>::Zero(v, d);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : p.layers) {
    l.norm1 = Matrix<T>::Zero(1, d);
    l.wq = Matrix<T>::Zero(d, d);
    l.wk = Matrix<T>::Zero(d, d);
    l.wv = Matrix<T>::Zero(d, d);
    l.wo = Matrix<T>::Zero(d, d);
    l.norm2 = Matrix<T>::Zero(1, d);
    l.w_up = Matrix<T>::Zero(f, d);
    l.w_down = Matrix<T>::Zero(d, f);
  }
  p.norm_f = Matrix<T>::Zero(1, d);
  p.head = Matrix<T>::Zero(v, d);
  p.head_bias = Matrix<T>::Zero(1, v);
  return p;
}

template <typename T>
bool Model<T>::is_plain() const {
  return state_quant.empty() &&
         std::all_of(sites.begin(), sites.end(), [](const auto& kv) { return kv.second.empty(); });
}

template <typename T>
Model<T> init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  m.params = Params<T>::zeros_like(cfg);
  auto& p = m.params;
  const double d = cfg.d_model, f = cfg.ffn_hidden;
  const double resid = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  p.tok_emb = random_normal<T>(cfg.vocab_size, cfg.d_model, rng, 0.5);
  for (auto& l : p.layers) {
    l.norm1.setOnes();
    l.norm2.setOnes();
    l.wq = random_normal<T>(cfg.d_model, cfg.d_model, rng, 1.0 / std::sqrt(d));
    l.wk = random_normal<T>(cfg.d_model, cfg.d_model, rng, 1.0 / std::sqrt(d));
    l.wv = random_normal<T>(cfg.d_model, cfg.d_model, rng, 1.0 / std::sqrt(d));
    l.wo = random_normal<T>(cfg.d_model, cfg.d_model, rng, resid / std::sqrt(d));
    l.w_up = random_normal<T>(cfg.ffn_hidden, cfg.d_model, rng, 1.0 / std::sqrt(d));
    l.w_down = random_normal<T>(cfg.d_model, cfg.ffn_hidden, rng, resid / std::sqrt(f));
  }
  p.norm_f.setOnes();
  p.head = random_normal<T>(cfg.vocab_size, cfg.d_model, rng, 1.0 / std::sqrt(d));
  return m;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename T>
void rms_forward(const Matrix<T>& h, const Matrix<T>& gamma, double eps, Matrix<T>& normed, Vector<T>& inv,
                 Matrix<T>& out) {
  inv.resize(h.rows());
  normed.resize(h.rows(), h.cols());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const T ms = h.row(i).squaredNorm() / static_cast<T>(h.cols());
    inv(i) = T(1) / std::sqrt(ms + static_cast<T>(eps));
    normed.row(i) = h.row(i) * inv(i);
  }
  out = normed.array().rowwise() * gamma.row(0).array();
}

/// d(loss)/d(h) for normed = h * inv given d(loss)/d(normed).
template <typename T>
Matrix<T> rms_backward(const Matrix<T>& dnormed, const Matrix<T>& normed, const Vector<T>& inv) {
  Matrix<T> dh(dnormed.rows(), dnormed.cols());
  const T c = static_cast<T>(dnormed.cols());
  for (Eigen::Index i = 0; i < dnormed.rows(); ++i) {
    const T dot = dnormed.row(i).dot(normed.row(i)) / c;
    dh.row(i) = inv(i) * (dnormed.row(i) - normed.row(i) * dot);
  }
  return dh;
}

template <typename T>
T gelu(T z) {
  return T(0.5) * z * (T(1) + std::erf(z / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T z) {
  const T cdf = T(0.5) * (T(1) + std::erf(z / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * z * z) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + z * pdf;
}

template <typename T>
void apply_site(const Model<T>& model, const std::string& name, Matrix<T>& x, const SiteObserver<T>* observer) {
  const auto it = model.sites.find(name);
  if (it != model.sites.end()) {
    for (const auto& op : it->second.ops) {
      if (op.kind == ActOp::Kind::kDivide) {
        require(op.scale.size() == x.cols(), "shape_mismatch", "site " + name + ": scale extent mismatch");
        const Vector<T> s = op.scale.template cast<T>();
        x = (x.array().rowwise() / s.transpose().array()).matrix();
      } else {
        require(op.matrix.rows() == x.cols(), "shape_mismatch", "site " + name + ": matrix extent mismatch");
        x = (x.template cast<double>() * op.matrix).template cast<T>();
      }
    }
  }
  if (observer != nullptr && *observer) (*observer)(name, x);
  if (it != model.sites.end() && it->second.act_quant) {
    const QuantSpec& spec = *it->second.act_quant;
    if (spec.granularity == Granularity::kPerGroup)
      fake_quant_rows_inplace(x, spec, spec.group_size);
    else
      fake_quant_rows_inplace(x, spec);
  }
}

/// Rotates each head's (j, j + dh/2) channel pairs by pos * base^(-2j/dh).
/// Rows are (sequence, position) with seq_len positions per sequence.
template <typename T>
void rope(Matrix<T>& x, Eigen::Index seq_len, int n_heads, double base, bool inverse) {
  const Eigen::Index dh = x.cols() / n_heads, half = dh / 2;
  for (Eigen::Index pos = 0; pos < seq_len; ++pos)
    for (Eigen::Index j = 0; j < half; ++j) {
      const double angle = static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(j) / dh);
      const T c = static_cast<T>(std::cos(angle));
      const T sn = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
      for (Eigen::Index r = pos; r < x.rows(); r += seq_len)
        for (int h = 0; h < n_heads; ++h) {
          T& a = x(r, h * dh + j);
          T& b = x(r, h * dh + j + half);
          const T a0 = a;
          a = a0 * c - b * sn;
          b = b * c + a0 * sn;
        }
    }
}

template <typename T>
void softmax_rows(Matrix<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const T mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
}

}  // namespace

template <typename T>
Matrix<T> forward(const Model<T>& model, const TokenBatch& tokens, ForwardTrace<T>* trace,
                  const SiteObserver<T>* observer, ForwardOptions opts) {
  const auto& cfg = model.config;
  const auto& p = model.params;
  const Eigen::Index B = tokens.rows(), L = tokens.cols(), N = B * L;
  const Eigen::Index d = cfg.d_model, dh = cfg.head_dim(), H = cfg.n_heads;
  require(L <= cfg.max_seq_len, "sequence_too_long",
          "sequence length " + std::to_string(L) + " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));

  Matrix<T> h(N, d);
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index i = 0; i < L; ++i) {
      const int tok = tokens(b, i);
      require(tok >= 0 && tok < cfg.vocab_size, "token_out_of_range",
              "token id " + std::to_string(tok) + " outside vocabulary");
      h.row(b * L + i) = p.tok_emb.row(tok);
    }

  if (trace) trace->layers.assign(p.layers.size(), {});
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& lw = p.layers[li];
    const int l = static_cast<int>(li);
    typename ForwardTrace<T>::Layer local;
    auto& t = trace ? trace->layers[li] : local;
    t.h_in = h;

    rms_forward(h, lw.norm1, cfg.norm_eps, t.n1, t.inv1, t.a);
    Matrix<T> a_in = t.a;
    apply_site(model, site_name(l, SiteKind::kQkvIn), a_in, observer);
    t.q = a_in * lw.wq.transpose();
    t.k = a_in * lw.wk.transpose();
    t.v = a_in * lw.wv.transpose();
    if (!opts.zero_positions) {
      rope(t.q, L, cfg.n_heads, cfg.rope_base, false);
      rope(t.k, L, cfg.n_heads, cfg.rope_base, false);
    }
    if (model.state_quant.q) fake_quant_rows_inplace(t.q, *model.state_quant.q, dh);
    if (model.state_quant.k) fake_quant_rows_inplace(t.k, *model.state_quant.k, dh);
    if (model.state_quant.v) fake_quant_rows_inplace(t.v, *model.state_quant.v, dh);

    t.o.resize(N, d);
    if (trace) t.probs.resize(static_cast<std::size_t>(B * H));
    for (Eigen::Index b = 0; b < B; ++b)
      for (Eigen::Index hh = 0; hh < H; ++hh) {
        Matrix<T> s = t.q.block(b * L, hh * dh, L, dh) * t.k.block(b * L, hh * dh, L, dh).transpose() * scale;
        softmax_rows(s);
        t.o.block(b * L, hh * dh, L, dh) = s * t.v.block(b * L, hh * dh, L, dh);
        if (trace) t.probs[static_cast<std::size_t>(b * H + hh)] = std::move(s);
      }
    Matrix<T> o_in = t.o;
    apply_site(model, site_name(l, SiteKind::kAttnOutIn), o_in, observer);
    h += o_in * lw.wo.transpose();
    t.h_mid = h;

    rms_forward(h, lw.norm2, cfg.norm_eps, t.n2, t.inv2, t.u);
    Matrix<T> u_in = t.u;
    apply_site(model, site_name(l, SiteKind::kFfnUpIn), u_in, observer);
    t.z = u_in * lw.w_up.transpose();
    t.g = t.z.unaryExpr([](T z) { return gelu(z); });
    Matrix<T> g_in = t.g;
    apply_site(model, site_name(l, SiteKind::kFfnDownIn), g_in, observer);
    h += g_in * lw.w_down.transpose();
  }

  ForwardTrace<T> local_final;
  auto& ft = trace ? *trace : local_final;
  ft.h_out = h;
  rms_forward(h, p.norm_f, cfg.norm_eps, ft.nf, ft.invf, ft.fin);
  Matrix<T> fin_in = ft.fin;
  apply_site(model, "head-in", fin_in, observer);
  Matrix<T> logits = fin_in * p.head.transpose();
  logits.rowwise() += p.head_bias.row(0);
  return logits;
}

// ---------------------------------------------------------------------------
// Backward

template <typename T>
Params<T> backward(const Model<T>& model, const TokenBatch& tokens, const ForwardTrace<T>& tr,
                   const Matrix<T>& dlogits) {
  require(model.is_plain(), "unsupported", "backward requires a model without site ops or quantizers");
  const auto& cfg = model.config;
  const auto& p = model.params;
  const Eigen::Index B = tokens.rows(), L = tokens.cols();
  const Eigen::Index dh = cfg.head_dim(), H = cfg.n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Params<T> g = Params<T>::zeros_like(cfg);
  g.head = dlogits.transpose() * tr.fin;
  g.head_bias = dlogits.colwise().sum();
  Matrix<T> dfin = dlogits * p.head;
  g.norm_f = (dfin.array() * tr.nf.array()).colwise().sum();
  Matrix<T> dh_res = rms_backward<T>((dfin.array().rowwise() * p.norm_f.row(0).array()).matrix(), tr.nf, tr.invf);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lw = p.layers[li];
    const auto& t = tr.layers[li];
    auto& gl = g.layers[li];

    // FFN: h_out = h_mid + gelu(u W_up^T) W_down^T
    gl.w_down = dh_res.transpose() * t.g;
    Matrix<T> dz = dh_res * lw.w_down;
    dz.array() *= t.z.unaryExpr([](T z) { return gelu_grad(z); }).array();
    gl.w_up = dz.transpose() * t.u;
    Matrix<T> du = dz * lw.w_up;
    gl.norm2 = (du.array() * t.n2.array()).colwise().sum();
    Matrix<T> dh_mid =
        dh_res + rms_backward<T>((du.array().rowwise() * lw.norm2.row(0).array()).matrix(), t.n2, t.inv2);

    // Attention: h_mid = h_in + attn(a) W_o^T
    gl.wo = dh_mid.transpose() * t.o;
    Matrix<T> dout = dh_mid * lw.wo;
    Matrix<T> dq(t.q.rows(), t.q.cols()), dk(t.k.rows(), t.k.cols()), dv(t.v.rows(), t.v.cols());
    for (Eigen::Index b = 0; b < B; ++b)
      for (Eigen::Index hh = 0; hh < H; ++hh) {
        const Matrix<T>& a = tr.layers[li].probs[static_cast<std::size_t>(b * H + hh)];
        const auto qb = t.q.block(b * L, hh * dh, L, dh);
        const auto kb = t.k.block(b * L, hh * dh, L, dh);
        const auto vb = t.v.block(b * L, hh * dh, L, dh);
        const auto dob = dout.block(b * L, hh * dh, L, dh);
        Matrix<T> da = dob * vb.transpose();
        dv.block(b * L, hh * dh, L, dh) = a.transpose() * dob;
        Matrix<T> ds = a.array() * (da.array().colwise() - (da.array() * a.array()).rowwise().sum());
        ds *= scale;
        dq.block(b * L, hh * dh, L, dh) = ds * kb;
        dk.block(b * L, hh * dh, L, dh) = ds.transpose() * qb;
      }
    rope(dq, L, cfg.n_heads, cfg.rope_base, true);
    rope(dk, L, cfg.n_heads, cfg.rope_base, true);
    gl.wq = dq.transpose() * t.a;
    gl.wk = dk.transpose() * t.a;
    gl.wv = dv.transpose() * t.a;
    Matrix<T> da_in = dq * lw.wq + dk * lw.wk + dv * lw.wv;
    gl.norm1 = (da_in.array() * t.n1.array()).colwise().sum();
    dh_res = dh_mid + rms_backward<T>((da_in.array().rowwise() * lw.norm1.row(0).array()).matrix(), t.n1, t.inv1);
  }

  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index i = 0; i < L; ++i) {
      g.tok_emb.row(tokens(b, i)) += dh_res.row(b * L + i);
    }
  return g;
}

// ---------------------------------------------------------------------------
// Masking and loss

MaskedBatch make_masked_batch(const TokenBatch& clean, double t, int mask_token_id, Rng& rng) {
  require(t > 0.0 && t <= 1.0, "invalid_argument", "mask fraction must lie in (0,1]");
  MaskedBatch mb;
  mb.clean = clean;
  mb.input = clean;
  mb.mask.setConstant(clean.rows(), clean.cols(), false);
  mb.t.assign(static_cast<std::size_t>(clean.rows()), t);
  const auto L = clean.cols();
  const auto count = static_cast<Eigen::Index>(std::llround(t * static_cast<double>(L)));
  for (Eigen::Index b = 0; b < clean.rows(); ++b) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(L));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    for (Eigen::Index k = 0; k < count; ++k) {
      mb.mask(b, idx[static_cast<std::size_t>(k)]) = true;
      mb.input(b, idx[static_cast<std::size_t>(k)]) = mask_token_id;
    }
  }
  return mb;
}

template <typename T>
double mdm_loss(const Model<T>& model, const TokenBatch& clean, Rng& rng, const LossOptions& opts, Params<T>* grads) {
  const auto B = clean.rows(), L = clean.cols();
  require(B > 0 && L > 0, "empty_batch", "mdm_loss: empty batch");
  if (opts.t) require(*opts.t > 0.0 && *opts.t <= 1.0, "invalid_argument", "mdm_loss: t must lie in (0,1]");
  if (opts.eligible)
    require(opts.eligible->rows() == B && opts.eligible->cols() == L, "shape_mismatch",
            "mdm_loss: eligibility mask shape mismatch");

  std::vector<double> t(static_cast<std::size_t>(B));
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mask(B, L);
  for (int attempt = 0;; ++attempt) {
    require(attempt < 1000, "no_masked_tokens", "mdm_loss: could not draw a non-empty mask");
    Eigen::Index total = 0;
    for (Eigen::Index b = 0; b < B; ++b) {
      const double tb = opts.t ? *opts.t : 1e-3 + (1.0 - 1e-3) * rng.uniform();
      t[static_cast<std::size_t>(b)] = tb;
      for (Eigen::Index i = 0; i < L; ++i) {
        const bool ok = opts.eligible == nullptr || (*opts.eligible)(b, i);
        mask(b, i) = ok && rng.bernoulli(tb);
        total += mask(b, i) ? 1 : 0;
      }
    }
    if (total > 0) break;
  }

  TokenBatch input = clean;
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index i = 0; i < L; ++i)
      if (mask(b, i)) input(b, i) = model.config.mask_token_id;

  ForwardTrace<T> trace;
  Matrix<T> logits = forward(model, input, grads ? &trace : nullptr);
  Matrix<T> dlogits;
  if (grads) dlogits = Matrix<T>::Zero(logits.rows(), logits.cols());

  double loss = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) {
    Eigen::Index denom = L;
    if (opts.eligible) denom = std::max<Eigen::Index>(1, opts.eligible->row(b).count());
    const double w = 1.0 / (t[static_cast<std::size_t>(b)] * static_cast<double>(denom) * static_cast<double>(B));
    for (Eigen::Index i = 0; i < L; ++i) {
      if (!mask(b, i)) continue;
      const auto r = b * L + i;
      const T mx = logits.row(r).maxCoeff();
      Vector<T> e = (logits.row(r).array() - mx).exp().transpose();
      const T z = e.sum();
      const int target = clean(b, i);
      loss += w * static_cast<double>(std::log(z) + mx - logits(r, target));
      if (grads) {
        dlogits.row(r) = (e / z).transpose() * static_cast<T>(w);
        dlogits(r, target) -= static_cast<T>(w);
      }
    }
  }
  if (grads) *grads = backward(model, input, trace, dlogits);
  return loss;
}

// ---------------------------------------------------------------------------

template struct Params<float>;
template struct Params<double>;
template struct Model<float>;
template struct Model<double>;
template Model<float> init_model<float>(const ModelConfig&, Rng&);
template Model<double> init_model<double>(const ModelConfig&, Rng&);
template Matrix<float> forward<float>(const Model<float>&, const TokenBatch&, ForwardTrace<float>*,
                                      const SiteObserver<float>*, ForwardOptions);
template Matrix<double> forward<double>(const Model<double>&, const TokenBatch&, ForwardTrace<double>*,
                                        const SiteObserver<double>*, ForwardOptions);
template Params<float> backward<float>(const Model<float>&, const TokenBatch&, const ForwardTrace<float>&,
                                       const Matrix<float>&);
template Params<double> backward<double>(const Model<double>&, const TokenBatch&, const ForwardTrace<double>&,
                                         const Matrix<double>&);
template double mdm_loss<float>(const Model<float>&, const TokenBatch&, Rng&, const LossOptions&, Params<float>*);
template double mdm_loss<double>(const Model<double>&, const TokenBatch&, Rng&, const LossOptions&, Params<double>*);

}  // namespace dllmq
