// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Activation statistics at linear-layer inputs and outlier classification.
//
// A channel is a normal outlier when its mean magnitude exceeds theta_normal
// times the median channel mean. A single entry is a massive outlier when its
// magnitude exceeds theta_massive_abs and theta_massive_rel times the median
// magnitude of the sampled grid.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dllmq/dllm.hpp"

namespace dllmq {

struct CalibSet {
  std::vector<std::vector<int>> sequences;
  std::string source;
  int sample_count = 0;
  int sequence_length = 0;

  /// Throws "invalid_calib" for ragged or out-of-vocabulary sequences.
  void validate(int vocab_size) const;
  TokenBatch batch() const;
};

/// `count` documents from `corpus` in seeded random order, each padded or
/// truncated to `length` tokens (TAB separators removed).
CalibSet make_calib_set(const Corpus& corpus, int count, int length, std::uint64_t seed,
                        const std::string& source = "corpus");

struct ActivationRecord {
  std::string site;
  VectorD absmax;
  VectorD absmean;
  MatrixD sample_grid;  // |activation| of the first tokens, capped
  std::int64_t tokens = 0;

  int channels() const { return static_cast<int>(absmax.size()); }
};

struct CaptureOptions {
  std::vector<std::string> sites;  // empty: every site
  std::uint64_t seed = 0;
  double mask_fraction = 0.5;
  int grid_cap = 512;
  // Keep the full [tokens x channels] inputs per site (Hessians, scale search).
  bool keep_inputs = false;
};

struct Capture {
  std::vector<ActivationRecord> records;  // forward order
  std::map<std::string, MatrixD> inputs;  // when keep_inputs

  const ActivationRecord& record(const std::string& site) const;
};

/// One forward pass over the calibration set with mask_fraction of each
/// sequence masked at seeded random positions. Statistics are taken after
/// any installed site ops and before activation quantizers.
Capture capture(const Model<float>& model, const CalibSet& calib, const CaptureOptions& opts = {});

/// Elementwise composition of records from disjoint token sets.
ActivationRecord merge(const ActivationRecord& a, const ActivationRecord& b, int grid_cap = 512);

struct OutlierThresholds {
  double normal = 5.0;
  double massive_rel = 1000.0;
  double massive_abs = 100.0;

  void validate() const;
};

struct MassiveOutlier {
  int token = 0;
  int channel = 0;
  double value = 0.0;
  double ratio = 0.0;
};

struct OutlierReport {
  std::string site;
  std::vector<std::pair<int, double>> normal;  // (channel, ratio), ascending channel
  std::vector<MassiveOutlier> massive;         // descending value
  double median_absmean = 0.0;
  double median_magnitude = 0.0;
  double max_magnitude = 0.0;
  // Fraction of grid tokens holding at least one massive entry.
  double token_spread = 0.0;
  bool degenerate = false;

  nlohmann::json to_json() const;
};

OutlierReport classify_outliers(const ActivationRecord& rec, const OutlierThresholds& th = {});

/// Median with the mean of the two middle values for even counts.
double median(std::vector<double> v);

/// "token,channel,magnitude" rows at 17 significant digits. Lines starting
/// with '#' before the header are comments.
std::string heatmap_csv(const ActivationRecord& rec, const std::string& comment = "");
void export_heatmap(const ActivationRecord& rec, const std::string& path, const std::string& comment = "");
MatrixD parse_heatmap(const std::string& csv);

}  // namespace dllmq
