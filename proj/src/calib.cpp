// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include "dllmq/calib.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "dllmq/modelio.hpp"

namespace dllmq {

void CalibSet::validate(int vocab_size) const {
  require(!sequences.empty(), "empty_calib", "calibration set is empty");
  for (const auto& s : sequences) {
    require(static_cast<int>(s.size()) == sequence_length, "invalid_calib", "calibration sequences are ragged");
    for (int t : s) require(t >= 0 && t < vocab_size, "invalid_calib", "calibration token outside vocabulary");
  }
  require(sample_count == static_cast<int>(sequences.size()), "invalid_calib", "sample_count does not match");
}

TokenBatch CalibSet::batch() const {
  TokenBatch b(static_cast<Eigen::Index>(sequences.size()), sequence_length);
  for (std::size_t i = 0; i < sequences.size(); ++i)
    for (int j = 0; j < sequence_length; ++j) b(static_cast<Eigen::Index>(i), j) = sequences[i][static_cast<std::size_t>(j)];
  return b;
}

CalibSet make_calib_set(const Corpus& corpus, int count, int length, std::uint64_t seed, const std::string& source) {
  require(count > 0 && length > 0, "invalid_calib", "calibration count and length must be positive");
  require(!corpus.documents.empty(), "empty_calib", "calibration corpus is empty");
  std::vector<std::size_t> order(corpus.documents.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  CalibSet c;
  c.source = source;
  c.sequence_length = length;
  for (int i = 0; i < count; ++i) {
    std::string text = corpus.documents[order[static_cast<std::size_t>(i) % order.size()]];
    text.erase(std::remove(text.begin(), text.end(), '\t'), text.end());
    std::vector<int> ids = Tokenizer::encode(text);
    ids.resize(static_cast<std::size_t>(length), Tokenizer::pad_id());
    c.sequences.push_back(std::move(ids));
  }
  c.sample_count = count;
  return c;
}

const ActivationRecord& Capture::record(const std::string& site) const {
  for (const auto& r : records)
    if (r.site == site) return r;
  fail("unknown_site", "no record for site '" + site + "'");
}

Capture capture(const Model<float>& model, const CalibSet& calib, const CaptureOptions& opts) {
  calib.validate(model.config.vocab_size);
  const auto known = all_sites(model.config);
  std::set<std::string> wanted;
  for (const auto& s : opts.sites) {
    require(std::find(known.begin(), known.end(), s) != known.end(), "unknown_site", "unknown site '" + s + "'");
    wanted.insert(s);
  }
  require(opts.mask_fraction >= 0.0 && opts.mask_fraction <= 1.0, "invalid_config", "mask_fraction outside [0,1]");

  TokenBatch input = calib.batch();
  if (opts.mask_fraction > 0.0) {
    Rng rng(opts.seed);
    input = make_masked_batch(input, opts.mask_fraction, model.config.mask_token_id, rng).input;
  }

  Capture out;
  std::map<std::string, VectorD> sums;
  SiteObserver<float> obs = [&](const std::string& site, const MatrixF& x) {
    if (!wanted.empty() && wanted.count(site) == 0) return;
    const MatrixD a = x.cast<double>().cwiseAbs();
    ActivationRecord rec;
    rec.site = site;
    rec.absmax = a.colwise().maxCoeff().transpose();
    sums[site] = a.colwise().sum().transpose();
    rec.tokens = a.rows();
    rec.sample_grid = a.topRows(std::min<Eigen::Index>(a.rows(), opts.grid_cap));
    rec.absmean = sums[site] / static_cast<double>(a.rows());
    if (opts.keep_inputs) out.inputs[site] = x.cast<double>();
    out.records.push_back(std::move(rec));
  };
  forward<float>(model, input, nullptr, &obs);
  return out;
}

ActivationRecord merge(const ActivationRecord& a, const ActivationRecord& b, int grid_cap) {
  require(a.site == b.site && a.channels() == b.channels(), "shape_mismatch", "merge: records differ in site or width");
  ActivationRecord r;
  r.site = a.site;
  r.tokens = a.tokens + b.tokens;
  r.absmax = a.absmax.cwiseMax(b.absmax);
  r.absmean = (a.absmean * static_cast<double>(a.tokens) + b.absmean * static_cast<double>(b.tokens)) /
              static_cast<double>(std::max<std::int64_t>(r.tokens, 1));
  const Eigen::Index take_b = std::clamp<Eigen::Index>(grid_cap - a.sample_grid.rows(), 0, b.sample_grid.rows());
  const Eigen::Index take_a = std::min<Eigen::Index>(a.sample_grid.rows(), grid_cap);
  r.sample_grid.resize(take_a + take_b, a.channels());
  r.sample_grid.topRows(take_a) = a.sample_grid.topRows(take_a);
  r.sample_grid.bottomRows(take_b) = b.sample_grid.topRows(take_b);
  return r;
}

void OutlierThresholds::validate() const {
  require(normal > 1.0 && massive_rel > 1.0, "invalid_config", "outlier ratio thresholds must exceed 1");
  require(massive_abs >= 0.0, "invalid_config", "massive_abs must be non-negative");
}

double median(std::vector<double> v) {
  require(!v.empty(), "empty_slice", "median of an empty set");
  const std::size_t n = v.size(), mid = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

OutlierReport classify_outliers(const ActivationRecord& rec, const OutlierThresholds& th) {
  th.validate();
  require(rec.absmean.size() == rec.absmax.size(), "shape_mismatch", "record vectors differ in extent");
  OutlierReport r;
  r.site = rec.site;
  if (rec.absmax.size() == 0 || rec.absmax.maxCoeff() <= 0.0) {
    r.degenerate = true;
    return r;
  }
  r.median_absmean = median(std::vector<double>(rec.absmean.data(), rec.absmean.data() + rec.absmean.size()));
  for (Eigen::Index c = 0; c < rec.absmean.size(); ++c)
    if (rec.absmean(c) > th.normal * r.median_absmean)
      r.normal.emplace_back(static_cast<int>(c),
                            r.median_absmean > 0.0 ? rec.absmean(c) / r.median_absmean
                                                   : std::numeric_limits<double>::infinity());

  const MatrixD& g = rec.sample_grid;
  if (g.size() > 0) {
    r.median_magnitude = median(std::vector<double>(g.data(), g.data() + g.size()));
    r.max_magnitude = g.maxCoeff();
    std::set<int> tokens;
    for (Eigen::Index t = 0; t < g.rows(); ++t)
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        const double v = std::abs(g(t, c));
        if (v > th.massive_abs && v > th.massive_rel * r.median_magnitude) {
          r.massive.push_back({static_cast<int>(t), static_cast<int>(c), v,
                               r.median_magnitude > 0.0 ? v / r.median_magnitude
                                                        : std::numeric_limits<double>::infinity()});
          tokens.insert(static_cast<int>(t));
        }
      }
    std::stable_sort(r.massive.begin(), r.massive.end(),
                     [](const MassiveOutlier& a, const MassiveOutlier& b) { return a.value > b.value; });
    r.token_spread = static_cast<double>(tokens.size()) / static_cast<double>(g.rows());
  }
  return r;
}

nlohmann::json OutlierReport::to_json() const {
  // Infinite ratios (zero median) serialize as null.
  auto finite = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  nlohmann::json n = nlohmann::json::array();
  for (const auto& [c, ratio] : normal) n.push_back({{"channel", c}, {"ratio", finite(ratio)}});
  nlohmann::json m = nlohmann::json::array();
  for (const auto& e : massive)
    m.push_back({{"token", e.token}, {"channel", e.channel}, {"value", e.value}, {"ratio", finite(e.ratio)}});
  return {{"site", site},
          {"normal_outlier_channels", n},
          {"massive_outliers", m},
          {"medians", {{"absmean", median_absmean}, {"magnitude", median_magnitude}}},
          {"max_magnitude", max_magnitude},
          {"token_spread", token_spread},
          {"degenerate", degenerate}};
}

std::string heatmap_csv(const ActivationRecord& rec, const std::string& comment) {
  require(rec.sample_grid.size() > 0, "empty_grid", "record '" + rec.site + "' has no sample grid");
  std::string out;
  if (!comment.empty()) out += "# " + comment + "\n";
  out += "token,channel,magnitude\n";
  char buf[96];
  for (Eigen::Index t = 0; t < rec.sample_grid.rows(); ++t)
    for (Eigen::Index c = 0; c < rec.sample_grid.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%lld,%lld,%.17g\n", static_cast<long long>(t), static_cast<long long>(c),
                    rec.sample_grid(t, c));
      out += buf;
    }
  return out;
}

void export_heatmap(const ActivationRecord& rec, const std::string& path, const std::string& comment) {
  write_file_atomic(path, heatmap_csv(rec, comment));
}

MatrixD parse_heatmap(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  bool header = false;
  std::vector<std::tuple<long long, long long, double>> rows;
  long long max_t = -1, max_c = -1;
  while (std::getline(in, line)) {
    if (line.empty() || (!header && line[0] == '#')) continue;
    if (!header) {
      require(line == "token,channel,magnitude", "parse_error", "heatmap: unexpected header '" + line + "'");
      header = true;
      continue;
    }
    long long t = 0, c = 0;
    double v = 0.0;
    require(std::sscanf(line.c_str(), "%lld,%lld,%lf", &t, &c, &v) == 3 && t >= 0 && c >= 0, "parse_error",
            "heatmap: malformed row '" + line + "'");
    rows.emplace_back(t, c, v);
    max_t = std::max(max_t, t);
    max_c = std::max(max_c, c);
  }
  require(header, "parse_error", "heatmap: missing header");
  MatrixD g = MatrixD::Zero(max_t + 1, max_c + 1);
  require(static_cast<long long>(rows.size()) == (max_t + 1) * (max_c + 1), "parse_error",
          "heatmap: grid is incomplete");
  for (const auto& [t, c, v] : rows) g(t, c) = v;
  return g;
}

}  // namespace dllmq
