// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training and iterative-denoising generation for the toy diffusion LM.

#pragma once

#include <string>
#include <vector>

#include "dllmq/model.hpp"

namespace dllmq {

/// Plain-text corpus, one document per line. A TAB splits a document into
/// prompt and response; base training ignores the split.
struct Corpus {
  std::vector<std::string> documents;

  static Corpus parse(const std::string& text);
  static Corpus load(const std::string& path);
  std::string serialize() const;
};

struct TrainHyperParams {
  int steps = 1500;
  int batch_size = 32;
  double lr = 1e-3;
  int warmup = 50;
  double grad_clip = 1.0;
  int instruct_steps = 2000;
  double instruct_lr = 3e-3;
  // Stop early once the held-out loss falls to this value; 0 disables.
  double target_loss = 0.0;
  int eval_every = 100;
};

struct TrainLog {
  std::vector<double> train_loss;     // per step
  std::vector<double> heldout_loss;   // per evaluation
  int steps_run = 0;
};

/// Gradient-descent (Adam) training of the masked-diffusion loss from a
/// seeded initialization. Deterministic per seed.
Model<float> train_toy(const ModelConfig& cfg, const Corpus& corpus, const TrainHyperParams& hp, Rng& rng,
                       TrainLog* log = nullptr);

/// Continued training on prompt/response documents where only response
/// positions are masked. Returns a model whose variant is "instruct".
Model<float> train_instruct(const Model<float>& base, const Corpus& corpus, const TrainHyperParams& hp, Rng& rng,
                            TrainLog* log = nullptr);

/// Deterministic held-out loss (fixed masks and timesteps).
double heldout_loss(const Model<float>& model, const std::vector<std::vector<int>>& docs, std::uint64_t seed);

enum class Remasking { kLowConfidence, kRandom };

std::string to_string(Remasking r);
Remasking remasking_from_string(const std::string& s);

struct GenConfig {
  int gen_length = 8;
  int steps = 8;
  int block_length = 8;
  double cfg_scale = 0.0;
  double temperature = 0.0;
  double top_p = 1.0;
  Remasking remasking = Remasking::kLowConfidence;

  int num_blocks() const { return gen_length / block_length; }
  void validate() const;
  nlohmann::json to_json() const;
  static GenConfig from_json(const nlohmann::json& j);
};

struct GenTrace {
  // Per block: masked count inside the block before each step, then after
  // the last step.
  std::vector<std::vector<int>> block_masked;
  // Total masked count over the generated region after each step.
  std::vector<int> total_masked;
  int forward_passes = 0;
};

/// Tokens to unmask at each step for `mask_count` masks over `steps` steps:
/// equal shares, remainder to the earliest steps.
std::vector<int> transfer_schedule(int mask_count, int steps);

/// Appends gen_length masks to the prompt and denoises block by block with
/// the configured remasking strategy. Returns prompt + generated tokens.
std::vector<int> generate(const Model<float>& model, const std::vector<int>& prompt, const GenConfig& gen, Rng& rng,
                          GenTrace* trace = nullptr);

/// generate() over equal-length prompts in one batch; row b draws from
/// rngs[b]. The trace follows row 0.
std::vector<std::vector<int>> generate_batch(const Model<float>& model, const std::vector<std::vector<int>>& prompts,
                                             const GenConfig& gen, std::vector<Rng>& rngs, GenTrace* trace = nullptr);

}  // namespace dllmq
