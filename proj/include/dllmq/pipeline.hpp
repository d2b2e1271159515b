// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and the train / quantize / analyze / eval / generate /
// report commands behind the dllmq tool.
//
// A run directory is <root>/<config hash>-s<seed> and holds
//   config.resolved   canonical key = value text
//   checkpoints/      FP variants, quantized models, training log
//   plans/            calibration set and one transform plan per
//                     (variant, method, setting)
//   analysis/         outlier reports and heatmaps per variant
//   eval/             reports.json, table.md, table.csv
//   report.md
// Every artifact carries the config hash.

#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "dllmq/calib.hpp"
#include "dllmq/evalharness.hpp"
#include "dllmq/methods.hpp"

namespace dllmq {

class RunConfig {
 public:
  /// Every key at its default.
  RunConfig();

  /// "key = value" lines; '#' starts a comment. Throws "unknown_key",
  /// "parse_error" or "invalid_config".
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);

  /// Throws "unknown_key" or "invalid_config" (malformed value).
  void set(const std::string& key, const std::string& value);
  /// "key=value" form used by --set.
  void set_assignment(const std::string& assignment);

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  /// Sorted canonical "key = value" lines.
  std::string resolved() const;
  /// hex FNV-1a of resolved().
  std::string hash() const;
  std::uint64_t seed() const;

  ModelConfig model() const;
  TrainHyperParams train() const;
  GenConfig gen() const;
  std::vector<TaskSpec> tasks() const;
  /// Method defaults for the setting with the config's knobs applied.
  MethodConfig method(Method m, const BitSetting& bits) const;
  OutlierThresholds thresholds() const;

  /// Builds every typed view; throws on the first inconsistency.
  void validate() const;

  /// Keys with their defaults and one-line descriptions.
  static std::vector<std::pair<std::string, std::string>> describe();

 private:
  std::map<std::string, std::string> values_;
};

/// $DLLMQ_RUN_ROOT, else "runs".
std::string default_run_root();

/// <root>/<hash>-s<seed>
std::string run_dir(const RunConfig& cfg, const std::string& root);

/// Whether a method applies at a bit setting (weight-only methods only at
/// 16-bit activations and the reverse).
bool method_applies(Method m, const BitSetting& bits);

/// Cell name used for plan and quantized checkpoint files.
std::string cell_name(const std::string& variant, const std::string& method, const std::string& setting);

struct CommandOptions {
  std::string run_root;
  // Replaces checkpoints/<variant> as the FP model; its variant comes from
  // the checkpoint itself.
  std::string checkpoint;
  std::ostream* log = nullptr;
};

/// Trains the base model, then the instruct variant from it.
void cmd_train(const RunConfig& cfg, const CommandOptions& opts);
/// Plans and quantized checkpoints for every applicable cell.
void cmd_quantize(const RunConfig& cfg, const CommandOptions& opts);
/// Outlier reports and heatmaps on the calibration set.
void cmd_analyze(const RunConfig& cfg, const CommandOptions& opts);
/// FP baselines and every quantized cell on the configured tasks.
void cmd_eval(const RunConfig& cfg, const CommandOptions& opts);
/// Generated text (prompt excluded) from the first configured variant.
std::string cmd_generate(const RunConfig& cfg, const CommandOptions& opts, const std::string& prompt);
/// Markdown over one or more run directories. A single run also gets
/// report.md written into it.
std::string cmd_report(const std::vector<std::string>& run_dirs);

}  // namespace dllmq
