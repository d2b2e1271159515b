// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "dllmq/dllm.hpp"

namespace dllmq {

Corpus Corpus::parse(const std::string& text) {
  Corpus c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    for (char ch : line)
      require(ch == '\t' || Tokenizer::known(ch), "unknown_character",
              std::string("corpus: character '") + ch + "' is outside the alphabet");
    c.documents.push_back(line);
  }
  return c;
}

Corpus Corpus::load(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "io_error", "cannot read corpus " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string Corpus::serialize() const {
  std::string out;
  for (const auto& d : documents) out += d + "\n";
  return out;
}

namespace {

struct Document {
  std::vector<int> ids;
  int prompt_len = 0;  // response starts here; 0 for plain documents
};

Document to_document(const std::string& line) {
  Document d;
  const auto tab = line.find('\t');
  if (tab == std::string::npos) {
    d.ids = Tokenizer::encode(line);
  } else {
    d.ids = Tokenizer::encode(line.substr(0, tab));
    d.prompt_len = static_cast<int>(d.ids.size());
    const auto resp = Tokenizer::encode(line.substr(tab + 1));
    d.ids.insert(d.ids.end(), resp.begin(), resp.end());
  }
  return d;
}

/// Documents bucketed by token length so each batch has a uniform length.
class Batcher {
 public:
  explicit Batcher(std::vector<Document> docs) : docs_(std::move(docs)) {
    for (std::size_t i = 0; i < docs_.size(); ++i) buckets_[docs_[i].ids.size()].push_back(i);
  }

  bool empty() const { return docs_.empty(); }

  void sample(int batch_size, Rng& rng, TokenBatch& tokens,
              Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& eligible) const {
    const auto& first = docs_[rng.below(docs_.size())];
    const auto& bucket = buckets_.at(first.ids.size());
    const auto L = static_cast<Eigen::Index>(first.ids.size());
    tokens.resize(batch_size, L);
    eligible.resize(batch_size, L);
    for (int b = 0; b < batch_size; ++b) {
      const auto& d = docs_[bucket[rng.below(bucket.size())]];
      for (Eigen::Index i = 0; i < L; ++i) {
        tokens(b, i) = d.ids[static_cast<std::size_t>(i)];
        eligible(b, i) = i >= d.prompt_len;
      }
    }
  }

 private:
  std::vector<Document> docs_;
  std::map<std::size_t, std::vector<std::size_t>> buckets_;
};

struct Adam {
  Params<float> m, v;
  int t = 0;
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.99, kEps = 1e-8;

  explicit Adam(const ModelConfig& cfg) : m(Params<float>::zeros_like(cfg)), v(Params<float>::zeros_like(cfg)) {}

  void step(Params<float>& params, Params<float>& grads, double lr, double clip) {
    double sq = 0.0;
    grads.visit([&](const std::string&, const MatrixF& g) { sq += g.cast<double>().squaredNorm(); });
    const double norm = std::sqrt(sq);
    const float gscale = (clip > 0.0 && norm > clip) ? static_cast<float>(clip / norm) : 1.0f;
    ++t;
    const float c1 = static_cast<float>(1.0 - std::pow(kBeta1, t));
    const float c2 = static_cast<float>(1.0 - std::pow(kBeta2, t));
    params.visit([&](const std::string& name, MatrixF& p) {
      MatrixF& g = grads.get(name);
      MatrixF& mm = m.get(name);
      MatrixF& vv = v.get(name);
      g *= gscale;
      mm = static_cast<float>(kBeta1) * mm + static_cast<float>(1 - kBeta1) * g;
      vv = static_cast<float>(kBeta2) * vv + static_cast<float>(1 - kBeta2) * g.cwiseProduct(g);
      p.array() -= static_cast<float>(lr) * (mm.array() / c1) / ((vv.array() / c2).sqrt() + static_cast<float>(kEps));
    });
  }
};

double schedule(int step, int total, int warmup, double lr) {
  if (step < warmup) return lr * (step + 1) / warmup;
  const double progress = total > warmup ? static_cast<double>(step - warmup) / (total - warmup) : 1.0;
  return lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

void check_finite(double loss, int step) {
  require(std::isfinite(loss), "diverged",
          "training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")");
}

Model<float> run_training(Model<float> model, const std::vector<Document>& train_docs,
                          const std::vector<std::vector<int>>& heldout, int steps, double lr,
                          const TrainHyperParams& hp, bool response_only, Rng& rng, TrainLog* log) {
  if (steps <= 0 || train_docs.empty()) return model;
  Batcher batcher(train_docs);
  Adam adam(model.config);
  TokenBatch tokens;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> eligible;
  for (int step = 0; step < steps; ++step) {
    batcher.sample(hp.batch_size, rng, tokens, eligible);
    require(tokens.cols() <= model.config.max_seq_len, "sequence_too_long", "corpus document exceeds max_seq_len");
    Params<float> grads;
    LossOptions opts;
    if (response_only) opts.eligible = &eligible;
    const double loss = mdm_loss(model, tokens, rng, opts, &grads);
    check_finite(loss, step);
    adam.step(model.params, grads, schedule(step, steps, hp.warmup, lr), hp.grad_clip);
    if (log) {
      log->train_loss.push_back(loss);
      log->steps_run = step + 1;
    }
    if (!heldout.empty() && hp.eval_every > 0 && (step + 1) % hp.eval_every == 0) {
      const double h = heldout_loss(model, heldout, 0x5eed);
      if (log) log->heldout_loss.push_back(h);
      if (hp.target_loss > 0.0 && h <= hp.target_loss) break;
    }
  }
  return model;
}

}  // namespace

double heldout_loss(const Model<float>& model, const std::vector<std::vector<int>>& docs, std::uint64_t seed) {
  std::map<std::size_t, std::vector<const std::vector<int>*>> by_len;
  for (const auto& d : docs) by_len[d.size()].push_back(&d);
  double total = 0.0;
  std::size_t n = 0;
  Rng rng(seed);
  for (const auto& [len, group] : by_len) {
    TokenBatch tokens(static_cast<Eigen::Index>(group.size()), static_cast<Eigen::Index>(len));
    for (std::size_t b = 0; b < group.size(); ++b)
      for (std::size_t i = 0; i < len; ++i)
        tokens(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(i)) = (*group[b])[i];
    total += mdm_loss(model, tokens, rng) * static_cast<double>(group.size());
    n += group.size();
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

Model<float> train_toy(const ModelConfig& cfg, const Corpus& corpus, const TrainHyperParams& hp, Rng& rng,
                       TrainLog* log) {
  cfg.validate();
  Rng init_rng = rng.fork(1);
  Model<float> model = init_model<float>(cfg, init_rng);
  model.config.variant = "base";
  std::vector<Document> train;
  std::vector<std::vector<int>> heldout;
  for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
    Document d = to_document(corpus.documents[i]);
    d.prompt_len = 0;
    if (corpus.documents.size() >= 20 && i % 20 == 19 && heldout.size() < 256)
      heldout.push_back(std::move(d.ids));
    else
      train.push_back(std::move(d));
  }
  Rng loop_rng = rng.fork(2);
  return run_training(std::move(model), train, heldout, hp.steps, hp.lr, hp, false, loop_rng, log);
}

Model<float> train_instruct(const Model<float>& base, const Corpus& corpus, const TrainHyperParams& hp, Rng& rng,
                            TrainLog* log) {
  std::vector<Document> train;
  for (const auto& line : corpus.documents)
    if (line.find('\t') != std::string::npos) train.push_back(to_document(line));
  require(!train.empty() || hp.instruct_steps == 0, "empty_corpus", "instruct training needs prompt/response lines");
  Rng loop_rng = rng.fork(3);
  Model<float> out = run_training(base, train, {}, hp.instruct_steps, hp.instruct_lr, hp, true, loop_rng, log);
  out.config.variant = "instruct";
  return out;
}

}  // namespace dllmq
