// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dllmq/dllm.hpp"

namespace dllmq {

std::string to_string(Remasking r) { return r == Remasking::kLowConfidence ? "low_confidence" : "random"; }

Remasking remasking_from_string(const std::string& s) {
  if (s == "low_confidence") return Remasking::kLowConfidence;
  if (s == "random") return Remasking::kRandom;
  fail("invalid_config", "unknown remasking strategy '" + s + "'");
}

void GenConfig::validate() const {
  require(gen_length >= 1, "invalid_gen_config", "gen_length must be positive");
  require(steps >= 1, "invalid_gen_config", "steps must be at least 1");
  require(block_length >= 1 && gen_length % block_length == 0, "invalid_gen_config",
          "block_length must divide gen_length");
  require(steps % num_blocks() == 0, "invalid_gen_config", "steps must be divisible by the number of blocks");
  require(cfg_scale >= 0.0, "invalid_gen_config", "cfg_scale must be non-negative");
  require(temperature >= 0.0, "invalid_gen_config", "temperature must be non-negative");
  require(top_p > 0.0 && top_p <= 1.0, "invalid_gen_config", "top_p must lie in (0,1]");
}

nlohmann::json GenConfig::to_json() const {
  return {{"gen_length", gen_length}, {"steps", steps},           {"block_length", block_length},
          {"cfg_scale", cfg_scale},   {"temperature", temperature}, {"top_p", top_p},
          {"remasking", to_string(remasking)}};
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
  GenConfig g;
  g.gen_length = j.at("gen_length").get<int>();
  g.steps = j.at("steps").get<int>();
  g.block_length = j.at("block_length").get<int>();
  g.cfg_scale = j.at("cfg_scale").get<double>();
  g.temperature = j.at("temperature").get<double>();
  g.top_p = j.at("top_p").get<double>();
  g.remasking = remasking_from_string(j.at("remasking").get<std::string>());
  g.validate();
  return g;
}

std::vector<int> transfer_schedule(int mask_count, int steps) {
  require(steps >= 1, "invalid_gen_config", "steps must be at least 1");
  std::vector<int> out(static_cast<std::size_t>(steps), mask_count / steps);
  for (int i = 0; i < mask_count % steps; ++i) ++out[static_cast<std::size_t>(i)];
  return out;
}

namespace {

int sample_token(const Eigen::Ref<const VectorD>& logits, double temperature, double top_p, Rng& rng) {
  if (temperature <= 0.0) {
    Eigen::Index best;
    logits.maxCoeff(&best);
    return static_cast<int>(best);
  }
  VectorD p = ((logits.array() - logits.maxCoeff()) / temperature).exp();
  p /= p.sum();
  std::vector<int> order(static_cast<std::size_t>(p.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p(a) > p(b); });
  // Nucleus: smallest prefix whose mass reaches top_p.
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += p(order[keep++]);
    if (mass >= top_p) break;
  }
  double u = rng.uniform() * mass;
  for (std::size_t i = 0; i < keep; ++i) {
    u -= p(order[i]);
    if (u < 0.0) return order[i];
  }
  return order[keep - 1];
}

}  // namespace

std::vector<std::vector<int>> generate_batch(const Model<float>& model, const std::vector<std::vector<int>>& prompts,
                                             const GenConfig& gen, std::vector<Rng>& rngs, GenTrace* trace) {
  gen.validate();
  require(!prompts.empty() && rngs.size() == prompts.size(), "invalid_gen_config", "one rng per prompt required");
  const auto& cfg = model.config;
  const int B = static_cast<int>(prompts.size());
  const int P = static_cast<int>(prompts[0].size());
  for (const auto& p : prompts) require(static_cast<int>(p.size()) == P, "invalid_gen_config", "prompts differ in length");
  const int L = P + gen.gen_length;
  require(L <= cfg.max_seq_len, "sequence_too_long", "prompt + gen_length exceeds max_seq_len");
  const int mask = cfg.mask_token_id;

  TokenBatch seq(B, L);
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < P; ++i) seq(b, i) = prompts[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
    for (int i = P; i < L; ++i) seq(b, i) = mask;
  }
  auto count_masked = [&](int b, int from, int to) {
    int n = 0;
    for (int i = from; i < to; ++i) n += seq(b, i) == mask ? 1 : 0;
    return n;
  };

  struct Candidate {
    int pos, token;
    double confidence;
  };
  const int per_block = gen.steps / gen.num_blocks();
  for (int blk = 0; blk < gen.num_blocks(); ++blk) {
    const int start = P + blk * gen.block_length;
    const int end = start + gen.block_length;
    std::vector<std::vector<int>> schedule;
    for (int b = 0; b < B; ++b) schedule.push_back(transfer_schedule(count_masked(b, start, end), per_block));
    if (trace) trace->block_masked.push_back({count_masked(0, start, end)});

    for (int step = 0; step < per_block; ++step) {
      MatrixD logits = forward(model, seq).cast<double>();
      if (trace) ++trace->forward_passes;
      if (gen.cfg_scale > 0.0) {
        TokenBatch uncond = seq;
        uncond.leftCols(P).setConstant(mask);
        const MatrixD un = forward(model, uncond).cast<double>();
        if (trace) ++trace->forward_passes;
        logits += gen.cfg_scale * (logits - un);
      }

      for (int b = 0; b < B; ++b) {
        Rng& rng = rngs[static_cast<std::size_t>(b)];
        std::vector<Candidate> cands;
        for (int i = start; i < end; ++i) {
          if (seq(b, i) != mask) continue;
          VectorD row = logits.row(static_cast<Eigen::Index>(b) * L + i).transpose();
          row(mask) = -std::numeric_limits<double>::infinity();
          const int tok = sample_token(row, gen.temperature, gen.top_p, rng);
          double conf;
          if (gen.remasking == Remasking::kLowConfidence) {
            const double mx = row.maxCoeff();
            conf = std::exp(row(tok) - mx) / (row.array() - mx).exp().sum();
          } else {
            conf = rng.uniform();
          }
          cands.push_back({i, tok, conf});
        }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate& x, const Candidate& y) { return x.confidence > y.confidence; });
        const auto take = std::min<std::size_t>(
            cands.size(), static_cast<std::size_t>(schedule[static_cast<std::size_t>(b)][static_cast<std::size_t>(step)]));
        for (std::size_t k = 0; k < take; ++k) seq(b, cands[k].pos) = cands[k].token;
      }

      if (trace) {
        trace->block_masked.back().push_back(count_masked(0, start, end));
        trace->total_masked.push_back(count_masked(0, P, L));
      }
    }
  }

  std::vector<std::vector<int>> out(static_cast<std::size_t>(B), std::vector<int>(static_cast<std::size_t>(L)));
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < L; ++i) out[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)] = seq(b, i);
  return out;
}

std::vector<int> generate(const Model<float>& model, const std::vector<int>& prompt, const GenConfig& gen, Rng& rng,
                          GenTrace* trace) {
  std::vector<Rng> rngs{rng};
  auto out = generate_batch(model, {prompt}, gen, rngs, trace);
  rng = rngs[0];
  return std::move(out[0]);
}

}  // namespace dllmq
