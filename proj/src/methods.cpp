// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include "dllmq/methods.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <regex>

namespace dllmq {

std::string to_string(Method m) {
  switch (m) {
    case Method::kRtn: return "rtn";
    case Method::kGptq: return "gptq";
    case Method::kAwq: return "awq";
    case Method::kSmoothQuant: return "smoothquant";
    case Method::kQuaRot: return "quarot";
    case Method::kDuQuant: return "duquant";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (auto m : {Method::kRtn, Method::kGptq, Method::kAwq, Method::kSmoothQuant, Method::kQuaRot, Method::kDuQuant})
    if (to_string(m) == s) return m;
  fail("invalid_config", "unknown method '" + s + "'");
}

bool is_weight_only(Method m) { return m == Method::kRtn || m == Method::kGptq || m == Method::kAwq; }

std::string BitSetting::label() const { return "W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits); }

BitSetting BitSetting::parse(const std::string& s) {
  static const std::regex re("W([0-9]+)A([0-9]+)");
  std::smatch m;
  require(std::regex_match(s, m, re), "invalid_config", "bit setting '" + s + "' is not of the form W<b>A<b>");
  BitSetting b{std::stoi(m[1]), std::stoi(m[2])};
  require(b.weight_bits >= 2 && b.weight_bits <= 16 && b.act_bits >= 2 && b.act_bits <= 16, "invalid_config",
          "bit setting '" + s + "' outside [2,16]");
  return b;
}

void MethodConfig::validate() const {
  weight_spec.validate();
  if (act_spec) act_spec->validate();
  require(!(is_weight_only(method) && act_spec), "invalid_config",
          to_string(method) + " is weight-only and takes no activation spec");
  require(is_weight_only(method) || act_spec.has_value(), "invalid_config",
          to_string(method) + " needs an activation spec");
  require(weight_spec.granularity != Granularity::kPerToken, "invalid_config", "weights cannot be per-token");
  require(!act_spec || act_spec->granularity == Granularity::kPerToken ||
              act_spec->granularity == Granularity::kPerTensor,
          "invalid_config", "activations are quantized per token or per tensor");
  require(alpha >= 0.0 && alpha <= 1.0, "invalid_config", "alpha must lie in [0,1]");
  require(awq_grid >= 1, "invalid_config", "awq_grid must be positive");
  require(damp_frac > 0.0, "invalid_config", "damp_frac must be positive");
  require(gptq_block >= 1, "invalid_config", "gptq_block must be positive");
  require(rotation_steps >= 0, "invalid_config", "rotation_steps must be non-negative");
  require(is_power_of_two(block_size), "invalid_config", "block_size must be a power of two");
  require(act_clip > 0.0 && act_clip <= 1.0 && weight_clip > 0.0 && weight_clip <= 1.0, "invalid_config",
          "clip ratios must lie in (0,1]");
}

nlohmann::json MethodConfig::to_json() const {
  return {{"method", to_string(method)},
          {"weight_spec", dllmq::to_json(weight_spec)},
          {"act_spec", act_spec ? dllmq::to_json(*act_spec) : nlohmann::json()},
          {"alpha", alpha},
          {"awq_grid", awq_grid},
          {"damp_frac", damp_frac},
          {"gptq_block", gptq_block},
          {"act_order", act_order},
          {"rotation_steps", rotation_steps},
          {"block_size", block_size},
          {"act_clip", act_clip},
          {"weight_clip", weight_clip},
          {"keep_query_fp", keep_query_fp},
          {"quantize_head", quantize_head},
          {"seed", seed}};
}

MethodConfig MethodConfig::from_json(const nlohmann::json& j) {
  MethodConfig m;
  m.method = method_from_string(j.at("method").get<std::string>());
  m.weight_spec = quant_spec_from_json(j.at("weight_spec"));
  if (!j.at("act_spec").is_null()) m.act_spec = quant_spec_from_json(j.at("act_spec"));
  m.alpha = j.at("alpha").get<double>();
  m.awq_grid = j.at("awq_grid").get<int>();
  m.damp_frac = j.at("damp_frac").get<double>();
  m.gptq_block = j.at("gptq_block").get<int>();
  m.act_order = j.at("act_order").get<bool>();
  m.rotation_steps = j.at("rotation_steps").get<int>();
  m.block_size = j.at("block_size").get<int>();
  m.act_clip = j.at("act_clip").get<double>();
  m.weight_clip = j.at("weight_clip").get<double>();
  m.keep_query_fp = j.at("keep_query_fp").get<bool>();
  m.quantize_head = j.at("quantize_head").get<bool>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.validate();
  return m;
}

MethodConfig MethodConfig::defaults(Method m, const BitSetting& bits) {
  MethodConfig c;
  c.method = m;
  if (is_weight_only(m)) {
    require(bits.act_bits == 16, "invalid_config",
            to_string(m) + " is weight-only; setting " + bits.label() + " quantizes activations");
    c.weight_spec = QuantSpec::per_group(bits.weight_bits, 128);
    return c;
  }
  c.weight_spec = QuantSpec::per_channel(bits.weight_bits, 0);
  if (bits.act_bits < 16) c.act_spec = QuantSpec::per_token(bits.act_bits, m == Method::kQuaRot);
  require(c.act_spec.has_value(), "invalid_config",
          to_string(m) + " quantizes activations; setting " + bits.label() + " leaves them at 16 bits");
  return c;
}

std::string to_string(PlanOp::Kind k) {
  switch (k) {
    case PlanOp::Kind::kFoldNorms: return "fold_norms";
    case PlanOp::Kind::kUnfoldNorms: return "unfold_norms";
    case PlanOp::Kind::kResidualRotation: return "residual_rotation";
    case PlanOp::Kind::kSiteScale: return "site_scale";
    case PlanOp::Kind::kSiteRotation: return "site_rotation";
    case PlanOp::Kind::kSitePermutation: return "site_permutation";
  }
  return "?";
}

namespace {

PlanOp::Kind op_kind_from_string(const std::string& s) {
  for (auto k : {PlanOp::Kind::kFoldNorms, PlanOp::Kind::kUnfoldNorms, PlanOp::Kind::kResidualRotation,
                 PlanOp::Kind::kSiteScale, PlanOp::Kind::kSiteRotation, PlanOp::Kind::kSitePermutation})
    if (to_string(k) == s) return k;
  fail("corrupt_plan", "unknown plan op '" + s + "'");
}

bool is_bijection(const std::vector<int>& perm) {
  std::vector<char> seen(perm.size(), 0);
  for (int p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= perm.size() || seen[static_cast<std::size_t>(p)]) return false;
    seen[static_cast<std::size_t>(p)] = 1;
  }
  return true;
}

MatrixD permutation_matrix(const std::vector<int>& perm) {
  const auto n = static_cast<Eigen::Index>(perm.size());
  MatrixD p = MatrixD::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) p(perm[static_cast<std::size_t>(j)], j) = 1.0;
  return p;
}

std::vector<int> inverse_permutation(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t j = 0; j < perm.size(); ++j) inv[static_cast<std::size_t>(perm[j])] = static_cast<int>(j);
  return inv;
}

// Norm gain that feeds a site, or empty when the site has none.
std::string norm_for_site(const std::string& site) {
  const auto [layer, kind] = parse_site(site);
  switch (kind) {
    case SiteKind::kQkvIn: return "layers." + std::to_string(layer) + ".norm1";
    case SiteKind::kFfnUpIn: return "layers." + std::to_string(layer) + ".norm2";
    case SiteKind::kHeadIn: return "norm_f";
    default: return "";
  }
}

std::vector<std::string> norm_names(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    out.push_back("layers." + std::to_string(l) + ".norm1");
    out.push_back("layers." + std::to_string(l) + ".norm2");
  }
  out.push_back("norm_f");
  return out;
}

std::vector<std::string> norm_consumers(const std::string& norm) {
  if (norm == "norm_f") return {"head"};
  const std::string p = norm.substr(0, norm.rfind('.') + 1);
  if (norm.ends_with("norm1")) return {p + "wq", p + "wk", p + "wv"};
  return {p + "w_up"};
}

std::vector<std::string> layer_sites(const ModelConfig& cfg, bool with_head) {
  std::vector<std::string> out;
  for (const auto& s : all_sites(cfg))
    if (s != "head-in" || with_head) out.push_back(s);
  return out;
}

bool near_identity(const MatrixD& m, double tol = 1e-9) {
  return m.rows() == m.cols() && (m - MatrixD::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff() < tol;
}

// Pushes an activation op, or cancels it against the last op when the two
// compose to the identity.
void push_site_op(SiteRuntime& rt, ActOp op) {
  if (!rt.ops.empty()) {
    const ActOp& last = rt.ops.back();
    if (last.kind == op.kind && op.kind == ActOp::Kind::kDivide && last.scale.size() == op.scale.size() &&
        (last.scale.cwiseProduct(op.scale).array() - 1.0).abs().maxCoeff() < 1e-12) {
      rt.ops.pop_back();
      return;
    }
    if (last.kind == op.kind && op.kind == ActOp::Kind::kMatmul && last.matrix.cols() == op.matrix.rows() &&
        near_identity(last.matrix * op.matrix)) {
      rt.ops.pop_back();
      return;
    }
  }
  rt.ops.push_back(std::move(op));
}

void scale_columns(MatrixD& w, const VectorD& s) { w = w * s.asDiagonal(); }

void apply_op(Model<double>& m, const PlanOp& op) {
  auto& p = m.params;
  switch (op.kind) {
    case PlanOp::Kind::kFoldNorms:
      for (const auto& norm : norm_names(m.config)) {
        MatrixD& g = p.get(norm);
        const VectorD gain = g.row(0).transpose();
        for (const auto& w : norm_consumers(norm)) scale_columns(p.get(w), gain);
        g.setOnes();
      }
      break;
    case PlanOp::Kind::kUnfoldNorms:
      for (const auto& [norm, gain] : op.gains) {
        MatrixD& g = p.get(norm);
        require(g.cols() == gain.size(), "shape_mismatch", "unfold: gain extent mismatch for " + norm);
        for (const auto& w : norm_consumers(norm)) scale_columns(p.get(w), gain.cwiseInverse());
        g.row(0) = gain.transpose();
      }
      break;
    case PlanOp::Kind::kResidualRotation: {
      const MatrixD& q = op.matrix;
      require(q.rows() == m.config.d_model, "shape_mismatch", "residual rotation has the wrong extent");
      for (const auto& norm : norm_names(m.config))
        require((p.get(norm).array() == 1.0).all(), "non_foldable_norm",
                "residual rotation needs unit norm gains; fold " + norm + " first");
      p.tok_emb = p.tok_emb * q;
      for (auto& l : p.layers) {
        l.wq = l.wq * q;
        l.wk = l.wk * q;
        l.wv = l.wv * q;
        l.w_up = l.w_up * q;
        l.wo = q.transpose() * l.wo;
        l.w_down = q.transpose() * l.w_down;
      }
      p.head = p.head * q;
      break;
    }
    case PlanOp::Kind::kSiteScale: {
      const int c = site_channels(m.config, op.site);
      require(op.scale.size() == c, "shape_mismatch", "site scale extent mismatch at " + op.site);
      for (const auto& w : site_weights(op.site)) scale_columns(p.get(w), op.scale);
      if (op.fold) {
        const std::string norm = norm_for_site(op.site);
        require(!norm.empty(), "invalid_plan", "site " + op.site + " has no preceding norm to fold into");
        MatrixD& g = p.get(norm);
        g.row(0) = g.row(0).cwiseQuotient(op.scale.transpose());
      } else {
        push_site_op(m.site(op.site), ActOp::divide(op.scale));
      }
      break;
    }
    case PlanOp::Kind::kSiteRotation:
    case PlanOp::Kind::kSitePermutation: {
      const MatrixD r = op.kind == PlanOp::Kind::kSiteRotation ? op.matrix : permutation_matrix(op.perm);
      require(r.rows() == site_channels(m.config, op.site) && r.cols() == r.rows(), "shape_mismatch",
              "site transform extent mismatch at " + op.site);
      for (const auto& w : site_weights(op.site)) p.get(w) = p.get(w) * r;
      push_site_op(m.site(op.site), ActOp::multiply(r));
      break;
    }
  }
}

}  // namespace

void TransformPlan::validate() const {
  for (const auto& op : ops) {
    switch (op.kind) {
      case PlanOp::Kind::kResidualRotation:
      case PlanOp::Kind::kSiteRotation:
        require(op.matrix.rows() == op.matrix.cols() && orthogonality_error(op.matrix) < 1e-6, "invalid_plan",
                to_string(op.kind) + " at '" + op.site + "' is not orthogonal");
        break;
      case PlanOp::Kind::kSitePermutation:
        require(is_bijection(op.perm), "invalid_plan", "permutation at '" + op.site + "' is not a bijection");
        break;
      case PlanOp::Kind::kSiteScale:
        require(op.scale.size() > 0 && op.scale.allFinite() && (op.scale.array() > 0.0).all(), "invalid_plan",
                "scale at '" + op.site + "' is not positive and finite");
        break;
      case PlanOp::Kind::kUnfoldNorms:
        for (const auto& [n, g] : op.gains)
          require(g.allFinite() && (g.array() != 0.0).all(), "invalid_plan", "gain " + n + " is not invertible");
        break;
      case PlanOp::Kind::kFoldNorms:
        break;
    }
  }
  for (const auto& [name, q] : weights) dllmq::validate(q);
}

Model<float> apply_plan(const Model<float>& model, const TransformPlan& plan, const ApplyOptions& opts) {
  require(plan.signature.empty() || plan.signature == model.config.signature(), "signature_mismatch",
          "plan built for " + plan.signature + ", model is " + model.config.signature());
  plan.validate();
  Model<double> m = cast_model<double>(model);
  for (const auto& op : plan.ops) apply_op(m, op);
  if (opts.quantizers) {
    for (const auto& [name, q] : plan.weights) {
      MatrixD& w = m.params.get(name);
      const MatrixF deq = dequantize_matrix(q);
      require(deq.rows() == w.rows() && deq.cols() == w.cols(), "shape_mismatch",
              "replacement for '" + name + "' has the wrong shape");
      w = deq.cast<double>();
    }
    for (const auto& [site, spec] : plan.act_quant) {
      parse_site(site);
      m.site(site).act_quant = spec;
    }
    m.state_quant = plan.state_quant;
  }
  for (auto it = m.sites.begin(); it != m.sites.end();) it = it->second.empty() ? m.sites.erase(it) : std::next(it);
  return cast_model<float>(m);
}

TransformPlan invert(const TransformPlan& plan) {
  TransformPlan inv;
  inv.method = plan.method + "-inverse";
  inv.signature = plan.signature;
  inv.seed = plan.seed;
  inv.hyper = plan.hyper;
  for (auto it = plan.ops.rbegin(); it != plan.ops.rend(); ++it) {
    PlanOp op = *it;
    switch (op.kind) {
      case PlanOp::Kind::kFoldNorms:
        require(!op.gains.empty(), "not_invertible", "fold_norms op carries no gains");
        op.kind = PlanOp::Kind::kUnfoldNorms;
        break;
      case PlanOp::Kind::kUnfoldNorms:
        op.kind = PlanOp::Kind::kFoldNorms;
        break;
      case PlanOp::Kind::kResidualRotation:
      case PlanOp::Kind::kSiteRotation:
        op.matrix.transposeInPlace();
        break;
      case PlanOp::Kind::kSiteScale:
        op.scale = op.scale.cwiseInverse();
        break;
      case PlanOp::Kind::kSitePermutation:
        op.perm = inverse_permutation(op.perm);
        break;
    }
    inv.ops.push_back(std::move(op));
  }
  return inv;
}

// ---------------------------------------------------------------------------
// Serialization

Container plan_to_container(const TransformPlan& plan) {
  plan.validate();
  Container c;
  nlohmann::json ops = nlohmann::json::array();
  for (std::size_t i = 0; i < plan.ops.size(); ++i) {
    const auto& op = plan.ops[i];
    const std::string key = "op" + std::to_string(i);
    nlohmann::json j = {{"kind", to_string(op.kind)}, {"site", op.site}, {"fold", op.fold}};
    if (op.scale.size() > 0) {
      c.put_f64(key + ".scale", op.scale);
      j["scale"] = key + ".scale";
    }
    if (op.matrix.size() > 0) {
      c.put_f64(key + ".matrix", op.matrix);
      j["matrix"] = key + ".matrix";
    }
    if (!op.perm.empty()) {
      c.put_i32(key + ".perm", std::vector<std::int32_t>(op.perm.begin(), op.perm.end()));
      j["perm"] = key + ".perm";
    }
    nlohmann::json gains = nlohmann::json::object();
    for (const auto& [n, g] : op.gains) {
      c.put_f64(key + ".gain." + n, g);
      gains[n] = key + ".gain." + n;
    }
    j["gains"] = gains;
    ops.push_back(j);
  }
  nlohmann::json weights = nlohmann::json::array();
  for (const auto& [name, q] : plan.weights) {
    c.put_quantized("weight/" + name, q);
    weights.push_back(name);
  }
  nlohmann::json act = nlohmann::json::object();
  for (const auto& [site, spec] : plan.act_quant) act[site] = to_json(spec);
  auto opt = [](const std::optional<QuantSpec>& s) { return s ? to_json(*s) : nlohmann::json(); };
  c.metadata["kind"] = "plan";
  c.metadata["method"] = plan.method;
  c.metadata["signature"] = plan.signature;
  c.metadata["seed"] = plan.seed;
  c.metadata["hyper"] = plan.hyper;
  c.metadata["stats"] = plan.stats;
  c.metadata["ops"] = ops;
  c.metadata["weights"] = weights;
  c.metadata["act_quant"] = act;
  c.metadata["state_quant"] = {
      {"q", opt(plan.state_quant.q)}, {"k", opt(plan.state_quant.k)}, {"v", opt(plan.state_quant.v)}};
  return c;
}

TransformPlan plan_from_container(const Container& c) {
  require(c.metadata.value("kind", "") == "plan", "corrupt_plan", "container does not hold a transform plan");
  TransformPlan plan;
  const auto& md = c.metadata;
  plan.method = md.at("method").get<std::string>();
  plan.signature = md.at("signature").get<std::string>();
  plan.seed = md.at("seed").get<std::uint64_t>();
  plan.hyper = md.at("hyper");
  plan.stats = md.at("stats");
  for (const auto& j : md.at("ops")) {
    PlanOp op;
    op.kind = op_kind_from_string(j.at("kind").get<std::string>());
    op.site = j.at("site").get<std::string>();
    op.fold = j.at("fold").get<bool>();
    if (j.contains("scale")) op.scale = c.get_f64_vector(j["scale"].get<std::string>());
    if (j.contains("matrix")) op.matrix = c.get_f64(j["matrix"].get<std::string>());
    if (j.contains("perm")) {
      const auto v = c.get_i32(j["perm"].get<std::string>());
      op.perm.assign(v.begin(), v.end());
    }
    for (const auto& [n, t] : j.at("gains").items()) op.gains[n] = c.get_f64_vector(t.get<std::string>());
    plan.ops.push_back(std::move(op));
  }
  for (const auto& n : md.at("weights")) {
    const std::string name = n.get<std::string>();
    plan.weights[name] = c.get_quantized("weight/" + name);
  }
  for (const auto& [site, spec] : md.at("act_quant").items()) plan.act_quant[site] = quant_spec_from_json(spec);
  auto opt = [](const nlohmann::json& j) -> std::optional<QuantSpec> {
    if (j.is_null()) return std::nullopt;
    return quant_spec_from_json(j);
  };
  const auto& sq = md.at("state_quant");
  plan.state_quant.q = opt(sq.at("q"));
  plan.state_quant.k = opt(sq.at("k"));
  plan.state_quant.v = opt(sq.at("v"));
  plan.validate();
  return plan;
}

// ---------------------------------------------------------------------------
// Kernels

QuantSpec weight_spec_for(const QuantSpec& spec, Eigen::Index in_features) {
  QuantSpec s = spec;
  if (s.granularity == Granularity::kPerGroup && s.axis == 1 && s.group_size > in_features)
    s.group_size = static_cast<int>(in_features);
  return s;
}

std::vector<std::string> quantized_weights(const ModelConfig& cfg, const MethodConfig& mc) {
  std::vector<std::string> out;
  for (const auto& site : layer_sites(cfg, mc.quantize_head))
    for (const auto& w : site_weights(site)) out.push_back(w);
  return out;
}

double proxy_loss(const MatrixD& w, const MatrixD& w_hat, const MatrixD& h) {
  require(w.rows() == w_hat.rows() && w.cols() == w_hat.cols() && h.rows() == w.cols() && h.cols() == w.cols(),
          "shape_mismatch", "proxy_loss: shapes disagree");
  const MatrixD d = w_hat - w;
  return (d * h).cwiseProduct(d).sum();
}

QuantizedTensor gptq_quantize(const MatrixD& w_in, const MatrixD& h_in, const QuantSpec& spec, double damp_frac,
                              int block, bool act_order) {
  const Eigen::Index rows = w_in.rows(), n = w_in.cols();
  require(h_in.rows() == n && h_in.cols() == n, "shape_mismatch",
          "gptq: Hessian is " + std::to_string(h_in.rows()) + "x" + std::to_string(h_in.cols()) + ", weights have " +
              std::to_string(n) + " inputs");
  require(spec.granularity == Granularity::kPerChannel ? spec.axis == 0
                                                       : spec.granularity == Granularity::kPerGroup && spec.axis == 1,
          "invalid_spec", "gptq needs per-channel (axis 0) or per-group (axis 1) weights");
  require(block >= 1, "invalid_config", "gptq block must be positive");
  const Eigen::Index gsize = spec.granularity == Granularity::kPerGroup ? spec.group_size : n;
  require(n % gsize == 0, "granularity_mismatch", "gptq: group size does not divide the input width");
  const Eigen::Index ngroups = n / gsize;
  const auto max_code = spec.max_code();

  MatrixD w = w_in;
  MatrixD h = h_in;
  for (Eigen::Index i = 0; i < n; ++i)
    if (h(i, i) == 0.0) {
      h(i, i) = 1.0;
      w.col(i).setZero();
    }

  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  if (act_order) {
    std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) { return h(a, a) > h(b, b); });
    const MatrixD p = permutation_matrix(perm);
    w = w * p;
    h = p.transpose() * h * p;
  }

  std::vector<QParams> params(static_cast<std::size_t>(rows * ngroups));
  auto set_params = [&](Eigen::Index g, const MatrixD& cols) {
    for (Eigen::Index r = 0; r < rows; ++r)
      params[static_cast<std::size_t>(r * ngroups + g)] =
          qparams_from_range(cols.row(r).minCoeff(), cols.row(r).maxCoeff(), spec);
  };
  // With act_order, groups stay on natural column ranges and take their
  // parameters from the unmodified weights.
  if (act_order) {
    MatrixD natural = w * permutation_matrix(perm).transpose();
    for (Eigen::Index g = 0; g < ngroups; ++g) set_params(g, natural.middleCols(g * gsize, gsize));
  }

  const double damp = damp_frac * h.diagonal().mean();
  h.diagonal().array() += damp;
  Eigen::LLT<MatrixD> llt(h);
  require(llt.info() == Eigen::Success, "hessian_not_pd", "gptq: Hessian is not positive definite after damping");
  const MatrixD hinv = llt.solve(MatrixD::Identity(n, n));
  Eigen::LLT<MatrixD> llt_inv(0.5 * (hinv + hinv.transpose()));
  require(llt_inv.info() == Eigen::Success, "hessian_not_pd", "gptq: inverse Hessian factorization failed");
  const MatrixD u = llt_inv.matrixU();

  QuantizedTensor q;
  q.spec = spec;
  q.original_shape = {rows, n};
  q.codes.assign(static_cast<std::size_t>(rows * n), 0);

  for (Eigen::Index i1 = 0; i1 < n; i1 += block) {
    const Eigen::Index i2 = std::min<Eigen::Index>(i1 + block, n), count = i2 - i1;
    MatrixD w1 = w.middleCols(i1, count);
    MatrixD err(rows, count);
    for (Eigen::Index i = 0; i < count; ++i) {
      const Eigen::Index col = i1 + i;
      const int natural = perm[static_cast<std::size_t>(col)];
      const Eigen::Index g = natural / gsize;
      if (!act_order && col % gsize == 0) {
        // Group range as currently updated: in-block columns from w1, the
        // rest still awaiting this block's lazy update.
        MatrixD cols(rows, gsize);
        for (Eigen::Index k = 0; k < gsize; ++k)
          cols.col(k) = col + k < i2 ? w1.col(i + k) : w.col(col + k);
        set_params(g, cols);
      }
      VectorD deq(rows);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const QParams& p = params[static_cast<std::size_t>(r * ngroups + g)];
        const auto code = quantize_value(w1(r, i), p, max_code);
        q.codes[static_cast<std::size_t>(r * n + natural)] = code;
        deq(r) = dequantize_value(code, p);
      }
      const VectorD e = (w1.col(i) - deq) / u(col, col);
      w1.rightCols(count - i) -= e * u.row(col).segment(col, count - i);
      err.col(i) = e;
    }
    if (i2 < n) w.rightCols(n - i2) -= err * u.block(i1, i2, count, n - i2);
  }
  q.params = std::move(params);
  // Per-channel params are indexed by row only.
  validate(q);
  return q;
}

AwqSearch awq_search(const MatrixD& x, const std::vector<MatrixD>& weights, const QuantSpec& spec, int grid) {
  require(grid >= 1, "invalid_config", "awq grid must be positive");
  require(!weights.empty(), "invalid_config", "awq needs at least one weight");
  for (const auto& w : weights)
    require(w.cols() == x.cols(), "shape_mismatch", "awq: activation and weight widths differ");
  const MatrixD gram = x.transpose() * x;
  VectorD amax = x.cwiseAbs().colwise().maxCoeff().transpose();
  amax = amax.cwiseMax(1e-8);
  const VectorD log_amax = amax.array().log();

  AwqSearch out;
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= grid; ++k) {
    const double alpha = static_cast<double>(k) / grid;
    VectorD log_s = alpha * log_amax;
    log_s.array() -= log_s.mean();
    const VectorD s = log_s.array().exp();
    double loss = 0.0;
    for (const auto& w : weights) {
      const MatrixF scaled = (w * s.asDiagonal()).cast<float>();
      const MatrixD wq = fake_quant(scaled, weight_spec_for(spec, w.cols())).cast<double>() * s.cwiseInverse().asDiagonal();
      const MatrixD d = w - wq;
      loss += (d * gram).cwiseProduct(d).sum();
    }
    out.alphas.push_back(alpha);
    out.losses.push_back(loss);
    if (loss < best) {
      best = loss;
      out.best = k;
      out.scale = s;
    }
  }
  return out;
}

VectorD smooth_scales(const VectorD& act_absmax, const VectorD& weight_absmax, double alpha) {
  require(act_absmax.size() == weight_absmax.size(), "shape_mismatch", "smooth_scales: extents differ");
  const VectorD a = act_absmax.cwiseMax(1e-5), w = weight_absmax.cwiseMax(1e-5);
  return (a.array().pow(alpha) / w.array().pow(1.0 - alpha)).matrix();
}

std::vector<int> zigzag_permutation(const VectorD& magnitude, int block) {
  const auto n = static_cast<int>(magnitude.size());
  require(block > 0 && n % block == 0, "block_mismatch",
          "block size " + std::to_string(block) + " does not divide " + std::to_string(n) + " channels");
  const int nblocks = n / block;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return magnitude(a) > magnitude(b); });
  std::vector<std::vector<int>> blocks(static_cast<std::size_t>(nblocks));
  for (int k = 0; k < n; ++k) {
    const int round = k / nblocks, pos = k % nblocks;
    const int b = round % 2 == 0 ? pos : nblocks - 1 - pos;
    blocks[static_cast<std::size_t>(b)].push_back(order[static_cast<std::size_t>(k)]);
  }
  std::vector<int> perm;
  for (const auto& b : blocks) perm.insert(perm.end(), b.begin(), b.end());
  return perm;
}

GreedyRotation greedy_block_rotation(const MatrixD& x, int block, int max_steps) {
  const Eigen::Index n = x.cols();
  require(block > 0 && n % block == 0, "block_mismatch",
          "block size " + std::to_string(block) + " does not divide " + std::to_string(n) + " channels");
  const MatrixD hb = hadamard<double>(block);
  GreedyRotation out;
  out.rotation = MatrixD::Identity(n, n);
  for (Eigen::Index b0 = 0; b0 < n; b0 += block) {
    MatrixD xb = x.middleCols(b0, block);
    MatrixD rb = MatrixD::Identity(block, block);
    double cur = xb.size() > 0 ? xb.cwiseAbs().maxCoeff() : 0.0;
    int steps = 0;
    for (int s = 0; s < max_steps && xb.rows() > 0; ++s) {
      Eigen::Index r = 0, c = 0;
      xb.cwiseAbs().maxCoeff(&r, &c);
      MatrixD step = MatrixD::Identity(block, block);
      step.col(0).swap(step.col(c));
      step = step * hb;
      const MatrixD cand = xb * step;
      const double m = cand.cwiseAbs().maxCoeff();
      if (!(m < cur)) break;
      xb = cand;
      rb = rb * step;
      cur = m;
      ++steps;
    }
    out.rotation.block(b0, b0, block, block) = rb;
    out.steps.push_back(steps);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Methods

namespace {

VectorD weight_absmax(const Model<float>& m, const std::string& site) {
  VectorD out = VectorD::Zero(site_channels(m.config, site));
  for (const auto& w : site_weights(site))
    out = out.cwiseMax(m.params.get(w).cast<double>().cwiseAbs().colwise().maxCoeff().transpose());
  return out;
}

bool foldable(const std::string& site) {
  const auto kind = parse_site(site).second;
  return kind == SiteKind::kQkvIn || kind == SiteKind::kFfnUpIn;
}

const CalibSet& need_calib(const CalibContext& ctx, Method m) {
  require(ctx.calib != nullptr, "missing_calibration", to_string(m) + " needs a calibration set");
  return *ctx.calib;
}

CaptureOptions capture_opts(const CalibContext& ctx, bool keep_inputs, std::vector<std::string> sites = {}) {
  CaptureOptions o;
  o.seed = ctx.seed;
  o.mask_fraction = ctx.mask_fraction;
  o.keep_inputs = keep_inputs;
  o.sites = std::move(sites);
  return o;
}

// RTN replacements for every quantized weight of the transformed model.
void quantize_weights_rtn(TransformPlan& plan, const Model<float>& model, const MethodConfig& mc) {
  TransformPlan rewrites = plan;
  rewrites.weights.clear();
  const Model<float> t = apply_plan(model, rewrites, {.quantizers = false});
  for (const auto& name : quantized_weights(model.config, mc)) {
    const MatrixF& w = t.params.get(name);
    plan.weights[name] = quantize(w, weight_spec_for(mc.weight_spec, w.cols()));
  }
}

void install_act_quant(TransformPlan& plan, const Model<float>& model, const MethodConfig& mc) {
  if (!mc.act_spec) return;
  for (const auto& site : layer_sites(model.config, mc.quantize_head)) plan.act_quant[site] = *mc.act_spec;
}

PlanOp fold_norms_op(const Model<float>& model) {
  PlanOp op;
  op.kind = PlanOp::Kind::kFoldNorms;
  for (const auto& n : norm_names(model.config)) op.gains[n] = model.params.get(n).row(0).transpose().cast<double>();
  return op;
}

void build_rtn(TransformPlan& plan, const Model<float>& model, const MethodConfig& mc) {
  quantize_weights_rtn(plan, model, mc);
}

void build_gptq(TransformPlan& plan, const Model<float>& model, const MethodConfig& mc, const CalibContext& ctx) {
  const CalibSet& calib = need_calib(ctx, mc.method);
  Model<float> cur = model;
  // Sequential: each site's Hessian comes from the model with every earlier
  // weight already quantized.
  for (const auto& site : layer_sites(model.config, mc.quantize_head)) {
    const Capture cap = capture(cur, calib, capture_opts(ctx, true, {site}));
    const MatrixD& x = cap.inputs.at(site);
    const MatrixD h = 2.0 * x.transpose() * x;
    for (const auto& name : site_weights(site)) {
      MatrixF& w = cur.params.get(name);
      QuantizedTensor q = gptq_quantize(w.cast<double>(), h, weight_spec_for(mc.weight_spec, w.cols()), mc.damp_frac,
                                        mc.gptq_block, mc.act_order);
      w = dequantize_matrix(q);
      plan.weights[name] = std::move(q);
    }
  }
}

void build_awq(TransformPlan& plan, const Model<float>& model, const MethodConfig& mc, const CalibContext& ctx) {
  const CalibSet& calib = need_calib(ctx, mc.method);
  const Capture cap = capture(model, calib, capture_opts(ctx, true));
  nlohmann::json alphas = nlohmann::json::object();
  for (const auto& site : layer_sites(model.config, mc.quantize_head)) {
    std::vector<MatrixD> ws;
    for (const auto& name : site_weights(site)) ws.push_back(model.params.get(name).cast<double>());
    const AwqSearch s = awq_search(cap.inputs.at(site), ws, mc.weight_spec, mc.awq_grid);
    alphas[site] = s.alphas[static_cast<std::size_t>(s.best)];
    PlanOp op;
    op.kind = PlanOp::Kind::kSiteScale;
    op.site = site;
    op.scale = s.scale;
    op.fold = foldable(site);
    plan.ops.push_back(std::move(op));
  }
  plan.stats["alpha"] = alphas;
  quantize_weights_rtn(plan, model, mc);
}

void build_smoothquant(TransformPlan& plan, const Model<float>& model, const MethodConfig& mc,
                       const CalibContext& ctx) {
  const CalibSet& calib = need_calib(ctx, mc.method);
  const Capture cap = capture(model, calib, capture_opts(ctx, false));
  for (const auto& site : layer_sites(model.config, mc.quantize_head)) {
    PlanOp op;
    op.kind = PlanOp::Kind::kSiteScale;
    op.site = site;
    op.scale = smooth_scales(cap.record(site).absmax, weight_absmax(model, site), mc.alpha);
    op.fold = foldable(site);
    plan.ops.push_back(std::move(op));
  }
  quantize_weights_rtn(plan, model, mc);
  install_act_quant(plan, model, mc);
}

void build_quarot(TransformPlan& plan, const Model<float>& model, const MethodConfig& mc) {
  const auto& cfg = model.config;
  require(is_power_of_two(cfg.d_model) && is_power_of_two(cfg.ffn_hidden), "not_power_of_two",
          "quarot needs power-of-two residual and FFN widths");
  Rng rng(mc.seed);
  plan.ops.push_back(fold_norms_op(model));
  PlanOp rot;
  rot.kind = PlanOp::Kind::kResidualRotation;
  rot.matrix = random_sign_hadamard<double>(cfg.d_model, rng);
  plan.ops.push_back(std::move(rot));
  for (int l = 0; l < cfg.n_layers; ++l) {
    PlanOp had;
    had.kind = PlanOp::Kind::kSiteRotation;
    had.site = site_name(l, SiteKind::kFfnDownIn);
    had.matrix = random_sign_hadamard<double>(cfg.ffn_hidden, rng);
    plan.ops.push_back(std::move(had));
  }
  quantize_weights_rtn(plan, model, mc);
  install_act_quant(plan, model, mc);
  if (mc.act_spec) {
    plan.state_quant.k = *mc.act_spec;
    plan.state_quant.v = *mc.act_spec;
    if (!mc.keep_query_fp) plan.state_quant.q = *mc.act_spec;
  }
}

void build_duquant(TransformPlan& plan, const Model<float>& model, const MethodConfig& cfg, const CalibContext& ctx) {
  MethodConfig mc = cfg;
  mc.weight_spec = mc.weight_spec.with_clip(mc.weight_clip);
  if (mc.act_spec) mc.act_spec = mc.act_spec->with_clip(mc.act_clip);
  const CalibSet& calib = need_calib(ctx, mc.method);
  const Capture cap = capture(model, calib, capture_opts(ctx, true));
  nlohmann::json steps = nlohmann::json::object();
  for (const auto& site : layer_sites(model.config, mc.quantize_head)) {
    MatrixD x = cap.inputs.at(site);
    require(x.cols() % mc.block_size == 0, "block_mismatch",
            "block size " + std::to_string(mc.block_size) + " does not divide the " + std::to_string(x.cols()) +
                " channels of " + site);
    PlanOp smooth;
    smooth.kind = PlanOp::Kind::kSiteScale;
    smooth.site = site;
    smooth.scale = smooth_scales(cap.record(site).absmax, weight_absmax(model, site), mc.alpha);
    smooth.fold = foldable(site);
    x = x * smooth.scale.cwiseInverse().asDiagonal();
    plan.ops.push_back(std::move(smooth));

    const GreedyRotation r1 = greedy_block_rotation(x, mc.block_size, mc.rotation_steps);
    x = x * r1.rotation;
    const std::vector<int> perm = zigzag_permutation(x.cwiseAbs().colwise().maxCoeff().transpose(), mc.block_size);
    x = x * permutation_matrix(perm);
    const GreedyRotation r2 = greedy_block_rotation(x, mc.block_size, mc.rotation_steps);

    auto push_rotation = [&](const GreedyRotation& r) {
      if (near_identity(r.rotation)) return;
      PlanOp op;
      op.kind = PlanOp::Kind::kSiteRotation;
      op.site = site;
      op.matrix = r.rotation;
      plan.ops.push_back(std::move(op));
    };
    push_rotation(r1);
    PlanOp p;
    p.kind = PlanOp::Kind::kSitePermutation;
    p.site = site;
    p.perm = perm;
    plan.ops.push_back(std::move(p));
    push_rotation(r2);
    steps[site] = {{"first", r1.steps}, {"second", r2.steps}};
  }
  plan.stats["rotation_steps"] = steps;
  quantize_weights_rtn(plan, model, mc);
  install_act_quant(plan, model, mc);
}

}  // namespace

TransformPlan build_plan(const Model<float>& model, const MethodConfig& mc, const CalibContext& ctx) {
  mc.validate();
  model.config.validate();
  require(model.is_plain(), "unsupported", "methods take a model without installed quantizers");
  TransformPlan plan;
  plan.method = to_string(mc.method);
  plan.signature = model.config.signature();
  plan.seed = mc.seed;
  plan.hyper = mc.to_json();
  switch (mc.method) {
    case Method::kRtn: build_rtn(plan, model, mc); break;
    case Method::kGptq: build_gptq(plan, model, mc, ctx); break;
    case Method::kAwq: build_awq(plan, model, mc, ctx); break;
    case Method::kSmoothQuant: build_smoothquant(plan, model, mc, ctx); break;
    case Method::kQuaRot: build_quarot(plan, model, mc); break;
    case Method::kDuQuant: build_duquant(plan, model, mc, ctx); break;
  }
  plan.validate();
  return plan;
}

Model<float> quantize_model(const Model<float>& model, const MethodConfig& mc, const CalibContext& ctx,
                            TransformPlan* plan_out) {
  TransformPlan plan = build_plan(model, mc, ctx);
  Model<float> out = apply_plan(model, plan);
  if (plan_out) *plan_out = std::move(plan);
  return out;
}

}  // namespace dllmq
