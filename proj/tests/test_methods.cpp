// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "dllmq/evalharness.hpp"
#include "dllmq/methods.hpp"
#include "trained_model.hpp"

namespace dllmq {
namespace {

namespace fs = std::filesystem;

using testing_model::default_tasks;
using testing_model::trained;

const CalibSet& calib() {
  static const CalibSet c = make_calib_set(make_corpus(default_tasks(), 400, 4242), 64, 32, 7);
  return c;
}

CalibContext ctx() { return {&calib(), 1, 0.5}; }

TokenBatch random_batch(int rows, int len, std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch t(rows, len);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<int>(rng.below(Tokenizer::vocab_size()));
  return t;
}

double max_logit_diff(const Model<float>& a, const Model<float>& b, int rows = 32) {
  const TokenBatch t = random_batch(rows, 32, 123);
  return (forward(a, t) - forward(b, t)).cwiseAbs().maxCoeff();
}

MethodConfig wa(Method m, int bits) {
  MethodConfig c = MethodConfig::defaults(m, {bits, bits});
  return c;
}

// ---------------------------------------------------------------------------
// Config

TEST(MethodConfig, WeightOnlyRejectsActivationSpec) {
  MethodConfig c = MethodConfig::defaults(Method::kGptq, {4, 16});
  c.act_spec = QuantSpec::per_token(8);
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "invalid_config");
  }
}

TEST(MethodConfig, DefaultsAndJson) {
  const MethodConfig g = MethodConfig::defaults(Method::kAwq, BitSetting::parse("W3A16"));
  EXPECT_EQ(g.weight_spec, QuantSpec::per_group(3, 128));
  EXPECT_FALSE(g.act_spec);
  const MethodConfig q = MethodConfig::defaults(Method::kQuaRot, BitSetting::parse("W4A4"));
  EXPECT_EQ(q.weight_spec, QuantSpec::per_channel(4, 0));
  EXPECT_EQ(*q.act_spec, QuantSpec::per_token(4, true));
  EXPECT_FALSE(MethodConfig::defaults(Method::kSmoothQuant, {8, 8}).act_spec->symmetric);
  const MethodConfig back = MethodConfig::from_json(q.to_json());
  EXPECT_EQ(back.to_json(), q.to_json());
  EXPECT_EQ(BitSetting::parse("W8A8").label(), "W8A8");
}

// ---------------------------------------------------------------------------
// RTN

TEST(Rtn, SixteenBitsIsNearIdentity) {
  Rng rng(1);
  const Model<float> m = init_model<float>(ModelConfig{}, rng);
  MethodConfig c = MethodConfig::defaults(Method::kRtn, {16, 16});
  const Model<float> q = quantize_model(m, c, {});
  EXPECT_LT(max_logit_diff(m, q), 1e-3);
}

TEST(Rtn, OnGridWeightsUnchanged) {
  Rng rng(2);
  Model<float> m = init_model<float>(ModelConfig{}, rng);
  const MethodConfig c = MethodConfig::defaults(Method::kRtn, {4, 16});
  for (const auto& name : quantized_weights(m.config, c)) {
    MatrixF& w = m.params.get(name);
    w = fake_quant(w, weight_spec_for(c.weight_spec, w.cols()));
  }
  TransformPlan plan;
  const Model<float> q = quantize_model(m, c, {}, &plan);
  // The scale is recomputed from the dequantized range, so values may move
  // by one float rounding; the codes may not move at all.
  m.params.visit([&](const std::string& n, const MatrixF& w) {
    const auto it = plan.weights.find(n);
    if (it == plan.weights.end()) {
      EXPECT_EQ(q.params.get(n), w) << n;
      return;
    }
    EXPECT_EQ(it->second.codes, quantize(w, weight_spec_for(c.weight_spec, w.cols())).codes) << n;
    EXPECT_LE((q.params.get(n) - w).cwiseAbs().maxCoeff(), 1e-6f * w.cwiseAbs().maxCoeff()) << n;
  });
}

// Per-group asymmetric quantization written out directly.
double oracle_group_mse(const MatrixF& w, int bits, int group) {
  const double levels = std::pow(2.0, bits) - 1.0;
  double sum = 0.0;
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index g0 = 0; g0 < w.cols(); g0 += group) {
      double lo = 0.0, hi = 0.0;
      for (Eigen::Index c = g0; c < g0 + group; ++c) {
        lo = std::min<double>(lo, w(r, c));
        hi = std::max<double>(hi, w(r, c));
      }
      const double s = static_cast<float>((hi - lo) / levels);
      const double z = -std::round(lo * levels / (hi - lo));
      for (Eigen::Index c = g0; c < g0 + group; ++c) {
        const double q = std::clamp(std::round(w(r, c) / s) + z, 0.0, levels);
        const double d = static_cast<float>((q - z) * s) - static_cast<double>(w(r, c));
        sum += d * d;
      }
    }
  return sum / static_cast<double>(w.size());
}

TEST(Rtn, PerGroupMseMatchesOracle) {
  const Model<float>& m = trained();
  const MethodConfig c = MethodConfig::defaults(Method::kRtn, {4, 16});
  const TransformPlan plan = build_plan(m, c, {});
  for (const auto& name : quantized_weights(m.config, c)) {
    const MatrixF& w = m.params.get(name);
    const MatrixF deq = dequantize_matrix(plan.weights.at(name));
    const double mse = (deq - w).cast<double>().squaredNorm() / static_cast<double>(w.size());
    const int group = std::min<int>(128, static_cast<int>(w.cols()));
    EXPECT_NEAR(mse, oracle_group_mse(w, 4, group), 1e-9 + 1e-6 * mse) << name;
  }
}

// ---------------------------------------------------------------------------
// GPTQ

MatrixD correlated_inputs(Eigen::Index tokens, Eigen::Index n, Rng& rng) {
  const MatrixD z = random_normal<double>(tokens, n, rng);
  const MatrixD mix = MatrixD::Identity(n, n) + 0.6 * random_normal<double>(n, n, rng);
  return z * mix;
}

double rtn_proxy(const MatrixD& w, const MatrixD& h, const QuantSpec& spec) {
  return proxy_loss(w, fake_quant(w.cast<float>(), spec).cast<double>(), h);
}

TEST(Gptq, DiagonalHessianEqualsRtn) {
  Rng rng(3);
  const MatrixD w = random_normal<float>(8, 32, rng).cast<double>();
  VectorD d(32);
  for (int i = 0; i < 32; ++i) d(i) = 0.5 + rng.uniform();
  const QuantSpec spec = QuantSpec::per_group(4, 16);
  const QuantizedTensor g = gptq_quantize(w, d.asDiagonal().toDenseMatrix(), spec);
  const QuantizedTensor r = quantize(w.cast<float>(), spec);
  EXPECT_EQ(g.codes, r.codes);
  EXPECT_EQ(g.params, r.params);
}

TEST(Gptq, TwoByTwoAgainstExhaustiveOptimum) {
  Rng rng(5);
  const MatrixD w = random_normal<float>(2, 2, rng).cast<double>();
  MatrixD x = random_normal<double>(64, 2, rng);
  x.col(1) += 0.5 * x.col(0);
  const MatrixD h = 2.0 * x.transpose() * x;
  const QuantSpec spec = QuantSpec::per_channel(2, 0);
  const QuantizedTensor g = gptq_quantize(w, h, spec);
  const double gptq = proxy_loss(w, dequantize_matrix(g).cast<double>(), h);

  // Every code assignment on the same per-row grids.
  double best = std::numeric_limits<double>::infinity();
  for (int code = 0; code < 256; ++code) {
    MatrixD wq(2, 2);
    for (int e = 0; e < 4; ++e) {
      const int r = e / 2, c = e % 2, k = (code >> (2 * e)) & 3;
      const QParams& p = g.params[static_cast<std::size_t>(r)];
      wq(r, c) = static_cast<float>((k - p.zero_point) * static_cast<double>(p.scale));
    }
    best = std::min(best, proxy_loss(w, wq, h));
  }
  EXPECT_LE(gptq, 1.5 * best);
  EXPECT_LE(gptq, rtn_proxy(w, h, spec));
}

TEST(Gptq, BeatsRtnOnRandomLayers) {
  int wins = 0;
  for (int i = 0; i < 100; ++i) {
    Rng rng(1000 + static_cast<std::uint64_t>(i));
    const MatrixD w = random_normal<double>(16, 16, rng);
    const MatrixD x = correlated_inputs(64, 16, rng);
    const MatrixD h = 2.0 * x.transpose() * x;
    const QuantSpec spec = QuantSpec::per_channel(4, 0);
    const double g = proxy_loss(w, dequantize_matrix(gptq_quantize(w, h, spec)).cast<double>(), h);
    if (g <= rtn_proxy(w, h, spec)) ++wins;
  }
  EXPECT_GE(wins, 95);
}

TEST(Gptq, ActOrderKeepsNaturalGroups) {
  Rng rng(6);
  const MatrixD w = random_normal<float>(4, 32, rng).cast<double>();
  const MatrixD x = correlated_inputs(128, 32, rng);
  const MatrixD h = 2.0 * x.transpose() * x;
  const QuantSpec spec = QuantSpec::per_group(4, 8);
  const QuantizedTensor q = gptq_quantize(w, h, spec, 0.01, 128, true);
  EXPECT_EQ(q.params, quantize(w.cast<float>(), spec).params);
  EXPECT_LE(proxy_loss(w, dequantize_matrix(q).cast<double>(), h), rtn_proxy(w, h, spec));
}

TEST(Gptq, IndefiniteHessianRejected) {
  try {
    gptq_quantize(MatrixD::Ones(2, 4), -MatrixD::Identity(4, 4), QuantSpec::per_channel(4, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "hessian_not_pd");
  }
}

TEST(Gptq, HessianShapeMismatch) {
  try {
    gptq_quantize(MatrixD::Ones(2, 4), MatrixD::Identity(3, 3), QuantSpec::per_channel(4, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "shape_mismatch");
  }
}

TEST(Gptq, NeedsCalibration) {
  try {
    build_plan(trained(), MethodConfig::defaults(Method::kGptq, {4, 16}), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "missing_calibration");
  }
}

// ---------------------------------------------------------------------------
// AWQ

// ||X W^T - X diag(s)^-1 FQ(W diag(s))^T||^2 evaluated on the inputs.
double awq_objective(const MatrixD& x, const MatrixD& w, const VectorD& s, const QuantSpec& spec) {
  const MatrixD scaled = w * s.asDiagonal();
  const MatrixD wq = fake_quant(scaled.cast<float>(), spec).cast<double>();
  const MatrixD ref = x * w.transpose();
  const MatrixD got = x * s.cwiseInverse().asDiagonal() * wq.transpose();
  return (ref - got).squaredNorm();
}

TEST(Awq, ReevaluationOracle) {
  Rng rng(9);
  MatrixD x = random_normal<double>(64, 32, rng);
  for (int c = 0; c < 32; c += 5) x.col(c) *= 8.0;
  const MatrixD w = random_normal<double>(16, 32, rng, 0.2);
  const QuantSpec spec = QuantSpec::per_group(3, 16);
  const AwqSearch s = awq_search(x, {w}, spec, 20);
  ASSERT_EQ(s.alphas.size(), 21u);

  const VectorD amax = x.cwiseAbs().colwise().maxCoeff().transpose();
  int best = 0;
  std::vector<double> losses;
  for (int k = 0; k <= 20; ++k) {
    const double alpha = k / 20.0;
    VectorD sc = amax.array().pow(alpha);
    sc /= std::exp(sc.array().log().mean());
    losses.push_back(awq_objective(x, w, sc, spec));
    if (losses.back() < losses[static_cast<std::size_t>(best)]) best = k;
    EXPECT_NEAR(s.losses[static_cast<std::size_t>(k)], losses.back(), 1e-8 * (1.0 + losses.back())) << k;
  }
  EXPECT_EQ(s.best, best);
  EXPECT_LE(s.losses[static_cast<std::size_t>(s.best)], s.losses[0]);
  EXPECT_NEAR(s.losses[0], awq_objective(x, w, VectorD::Ones(32), spec), 1e-8 * (1.0 + s.losses[0]));
}

TEST(Awq, LosslessWeightsPickSmallestAlpha) {
  Rng rng(10);
  MatrixD x(32, 16);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.bernoulli(0.5) ? 1.0 : -1.0;
  const QuantSpec spec = QuantSpec::per_channel(4, 0);
  const MatrixD w = fake_quant(random_normal<float>(8, 16, rng), spec).cast<double>();
  const AwqSearch s = awq_search(x, {w}, spec, 20);
  const double scale = (x * w.transpose()).squaredNorm();
  for (double l : s.losses) {
    EXPECT_LT(l, 1e-12 * scale);
    EXPECT_EQ(l, s.losses[0]);
  }
  EXPECT_EQ(s.best, 0);
}

TEST(Awq, NeverWorseThanRtnPerLayer) {
  const Model<float>& m = trained();
  const MethodConfig c = MethodConfig::defaults(Method::kAwq, {3, 16});
  const TransformPlan plan = build_plan(m, c, ctx());
  EXPECT_EQ(plan.stats.at("alpha").size(), 8u);
  CaptureOptions o;
  o.seed = 1;
  o.keep_inputs = true;
  const Capture cap = capture(m, calib(), o);
  for (const auto& [site, x] : cap.inputs) {
    if (site == "head-in") continue;
    std::vector<MatrixD> ws;
    for (const auto& n : site_weights(site)) ws.push_back(m.params.get(n).cast<double>());
    const AwqSearch s = awq_search(x, ws, c.weight_spec, c.awq_grid);
    EXPECT_LE(s.losses[static_cast<std::size_t>(s.best)], s.losses[0]) << site;
  }
}

// ---------------------------------------------------------------------------
// SmoothQuant

TEST(SmoothQuant, ScaleFormula) {
  VectorD a(2), w(2);
  a << 4.0, 9.0;
  w << 1.0, 4.0;
  const VectorD s = smooth_scales(a, w, 0.5);
  EXPECT_DOUBLE_EQ(s(0), 2.0);
  EXPECT_DOUBLE_EQ(s(1), 1.5);
  const VectorD s0 = smooth_scales(a, w, 0.0);
  EXPECT_DOUBLE_EQ(s0(0), 1.0);
  EXPECT_DOUBLE_EQ(s0(1), 0.25);
  VectorD z = VectorD::Zero(2);
  EXPECT_TRUE(smooth_scales(z, z, 0.5).allFinite());
}

// ---------------------------------------------------------------------------
// Computational invariance

class Invariance : public ::testing::TestWithParam<Method> {};

TEST_P(Invariance, FullPrecisionLogitsUnchanged) {
  const Model<float>& m = trained();
  const Method meth = GetParam();
  const MethodConfig c = is_weight_only(meth) ? MethodConfig::defaults(meth, {4, 16}) : wa(meth, 4);
  const TransformPlan plan = build_plan(m, c, ctx());
  EXPECT_FALSE(plan.ops.empty());
  const Model<float> t = apply_plan(m, plan, {.quantizers = false});
  EXPECT_LT(max_logit_diff(m, t), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Methods, Invariance,
                         ::testing::Values(Method::kSmoothQuant, Method::kQuaRot, Method::kDuQuant, Method::kAwq),
                         [](const auto& info) { return to_string(info.param); });

TEST(Invariance, RotationsAreOrthogonal) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    Rng rng(seed);
    const MatrixD q = random_sign_hadamard<double>(64, rng);
    EXPECT_LT((q.transpose() * q - MatrixD::Identity(64, 64)).cwiseAbs().maxCoeff(), 1e-6);
  }
  for (Method m : {Method::kQuaRot, Method::kDuQuant}) {
    const TransformPlan plan = build_plan(trained(), wa(m, 4), ctx());
    for (const auto& op : plan.ops) {
      if (op.matrix.size() > 0) EXPECT_LT(orthogonality_error(op.matrix), 1e-6);
      if (!op.perm.empty()) {
        std::vector<int> sorted = op.perm;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], static_cast<int>(i));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// QuaRot

TEST(QuaRot, DownProjectionAbsmaxDoesNotGrow) {
  const Model<float>& m = trained();
  const TransformPlan plan = build_plan(m, wa(Method::kQuaRot, 4), ctx());
  const Model<float> t = apply_plan(m, plan, {.quantizers = false});
  CaptureOptions o;
  o.seed = 1;
  for (int l = 0; l < m.config.n_layers; ++l) {
    o.sites = {site_name(l, SiteKind::kFfnDownIn)};
    const double before = capture(m, calib(), o).records[0].absmax.maxCoeff();
    const double after = capture(t, calib(), o).records[0].absmax.maxCoeff();
    EXPECT_LE(after, before) << o.sites[0];
  }
}

TEST(QuaRot, QueriesStayFullPrecision) {
  const TransformPlan plan = build_plan(trained(), wa(Method::kQuaRot, 4), ctx());
  EXPECT_FALSE(plan.state_quant.q);
  ASSERT_TRUE(plan.state_quant.k);
  EXPECT_TRUE(plan.state_quant.k->symmetric);
  MethodConfig c = wa(Method::kQuaRot, 4);
  c.keep_query_fp = false;
  EXPECT_TRUE(build_plan(trained(), c, ctx()).state_quant.q);
}

TEST(QuaRot, NonPowerOfTwoRejected) {
  ModelConfig cfg;
  cfg.d_model = 48;
  cfg.n_heads = 4;
  Model<float> m;
  m.config = cfg;
  m.params = Params<float>::zeros_like(cfg);
  try {
    build_plan(m, wa(Method::kQuaRot, 4), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_TRUE(e.kind() == "not_power_of_two" || e.kind() == "invalid_config") << e.kind();
  }
}

// ---------------------------------------------------------------------------
// DuQuant

TEST(DuQuant, ZigzagDealsSerpentine) {
  // Channel c has rank order[c] (1 = largest).
  const std::vector<int> rank = {3, 8, 1, 6, 2, 4, 7, 5};
  VectorD mag(8);
  for (int c = 0; c < 8; ++c) mag(c) = 10.0 - rank[static_cast<std::size_t>(c)];
  const std::vector<int> perm = zigzag_permutation(mag, 4);
  std::set<int> b0, b1;
  for (int j = 0; j < 4; ++j) b0.insert(rank[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])]);
  for (int j = 4; j < 8; ++j) b1.insert(rank[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])]);
  EXPECT_EQ(b0, (std::set<int>{1, 4, 5, 8}));
  EXPECT_EQ(b1, (std::set<int>{2, 3, 6, 7}));
}

TEST(DuQuant, BlockMustDivideChannels) {
  try {
    zigzag_permutation(VectorD::Ones(10), 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "block_mismatch");
  }
  MethodConfig c = wa(Method::kDuQuant, 4);
  c.block_size = 128;
  try {
    build_plan(trained(), c, ctx());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "block_mismatch");
  }
}

TEST(DuQuant, UniformActivationsStopImmediately) {
  const GreedyRotation r = greedy_block_rotation(MatrixD::Constant(16, 8, 0.7), 4, 32);
  EXPECT_EQ(r.steps, (std::vector<int>{0, 0}));
  EXPECT_EQ(r.rotation, MatrixD::Identity(8, 8));
}

TEST(DuQuant, GreedyRotationFlattensSpike) {
  Rng rng(4);
  MatrixD x = random_normal<double>(32, 16, rng, 0.1);
  x.col(5).array() += 10.0;
  const GreedyRotation r = greedy_block_rotation(x, 8, 32);
  EXPECT_GE(r.steps[0], 1);
  EXPECT_LT((x * r.rotation).cwiseAbs().maxCoeff(), x.cwiseAbs().maxCoeff());
  EXPECT_LT(orthogonality_error(r.rotation), 1e-9);
}

TEST(DuQuant, AbsmaxDoesNotGrowAtAnySite) {
  const Model<float>& m = trained();
  const TransformPlan plan = build_plan(m, wa(Method::kDuQuant, 4), ctx());
  const Model<float> t = apply_plan(m, plan, {.quantizers = false});
  CaptureOptions o;
  o.seed = 1;
  const Capture before = capture(m, calib(), o), after = capture(t, calib(), o);
  for (const auto& site : all_sites(m.config)) {
    if (site == "head-in") continue;
    EXPECT_LE(after.record(site).absmax.maxCoeff(), before.record(site).absmax.maxCoeff() * (1 + 1e-9)) << site;
  }
}

TEST(DuQuant, ClipRatiosApplied) {
  const TransformPlan plan = build_plan(trained(), wa(Method::kDuQuant, 4), ctx());
  EXPECT_EQ(plan.weights.begin()->second.spec.clip_ratio, 0.8);
  EXPECT_EQ(plan.act_quant.begin()->second.clip_ratio, 0.9);
}

// ---------------------------------------------------------------------------
// Plans

TEST(Plan, EmptyPlanIsIdentity) {
  const Model<float>& m = trained();
  const Model<float> t = apply_plan(m, TransformPlan{});
  m.params.visit([&](const std::string& n, const MatrixF& w) { EXPECT_EQ(t.params.get(n), w) << n; });
  EXPECT_TRUE(t.sites.empty());
}

class Inverse : public ::testing::TestWithParam<Method> {};

TEST_P(Inverse, PlanThenInverseRestoresWeights) {
  const Model<float>& m = trained();
  const TransformPlan plan = build_plan(m, wa(GetParam(), 4), ctx());
  const Model<float> there = apply_plan(m, plan, {.quantizers = false});
  const Model<float> back = apply_plan(there, invert(plan));
  m.params.visit([&](const std::string& n, const MatrixF& w) {
    EXPECT_LT((back.params.get(n) - w).cwiseAbs().maxCoeff(), 1e-5) << n;
  });
  EXPECT_TRUE(back.is_plain());
}

INSTANTIATE_TEST_SUITE_P(Methods, Inverse, ::testing::Values(Method::kSmoothQuant, Method::kQuaRot, Method::kDuQuant),
                         [](const auto& info) { return to_string(info.param); });

TEST(Plan, SixteenBitsKeepsEvalAccuracy) {
  const Model<float>& m = trained();
  std::vector<TaskSpec> tasks = default_tasks();
  for (auto& t : tasks) t.n_items = 40;
  auto score = [&](const Model<float>& model) {
    std::vector<double> out;
    for (const auto& t : tasks) {
      Rng r(0);
      out.push_back(run_task(model, t, r));
    }
    return out;
  };
  const auto fp = score(m);
  for (Method meth : {Method::kRtn, Method::kGptq, Method::kAwq, Method::kSmoothQuant, Method::kQuaRot,
                      Method::kDuQuant}) {
    MethodConfig c = is_weight_only(meth) ? MethodConfig::defaults(meth, {16, 16}) : wa(meth, 8);
    if (!is_weight_only(meth)) {
      c.weight_spec.bits = 16;
      c.act_spec->bits = 16;
    }
    // Clipping discards range at any width.
    c.weight_clip = c.act_clip = 1.0;
    EXPECT_EQ(score(quantize_model(m, c, ctx())), fp) << to_string(meth);
  }
}

TEST(Plan, SerializationIsDeterministic) {
  const Model<float>& m = trained();
  const std::string dir = (fs::temp_directory_path() / "dllmq_plans").string();
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (Method meth : {Method::kGptq, Method::kQuaRot, Method::kDuQuant}) {
    const MethodConfig c = is_weight_only(meth) ? MethodConfig::defaults(meth, {4, 16}) : wa(meth, 4);
    fs::create_directories(dir + "/a");
    fs::create_directories(dir + "/b");
    const std::string a = dir + "/a/" + to_string(meth), b = dir + "/b/" + to_string(meth);
    const TransformPlan p1 = build_plan(m, c, ctx());
    save(a, plan_to_container(p1));
    save(b, plan_to_container(build_plan(m, c, ctx())));
    EXPECT_EQ(read_file(blob_path(a)), read_file(blob_path(b)));
    EXPECT_EQ(read_file(manifest_path(a)), read_file(manifest_path(b)));

    const TransformPlan loaded = plan_from_container(load(a));
    const TokenBatch t = random_batch(4, 32, 5);
    EXPECT_EQ(forward(apply_plan(m, loaded), t), forward(apply_plan(m, p1), t)) << to_string(meth);
  }
}

TEST(Plan, SignatureMismatchRejected) {
  const TransformPlan plan = build_plan(trained(), MethodConfig::defaults(Method::kRtn, {4, 16}), {});
  ModelConfig other;
  other.n_layers = 3;
  Rng rng(1);
  try {
    apply_plan(init_model<float>(other, rng), plan);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "signature_mismatch");
  }
}

TEST(Plan, InvalidRotationRejected) {
  TransformPlan plan;
  PlanOp op;
  op.kind = PlanOp::Kind::kSiteRotation;
  op.site = "L0.attn.out-in";
  op.matrix = 2.0 * MatrixD::Identity(64, 64);
  plan.ops.push_back(op);
  try {
    apply_plan(trained(), plan);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "invalid_plan");
  }
}

TEST(Plan, HeadExcludedUnlessRequested) {
  MethodConfig c = MethodConfig::defaults(Method::kRtn, {4, 16});
  EXPECT_EQ(build_plan(trained(), c, {}).weights.count("head"), 0u);
  c.quantize_head = true;
  EXPECT_EQ(build_plan(trained(), c, {}).weights.count("head"), 1u);
}

}  // namespace
}  // namespace dllmq
