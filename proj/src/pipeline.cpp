// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include "dllmq/pipeline.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>

#include "dllmq/modelio.hpp"

namespace dllmq {

namespace fs = std::filesystem;

namespace {

enum class Kind { kInt, kDouble, kBool, kString, kList };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* value;
  const char* help;
};

// clang-format off
const KeySpec kKeys[] = {
  {"seed", Kind::kInt, "0", "run seed (initialization, training batches, method randomness)"},

  {"model.d_model", Kind::kInt, "64", "residual width"},
  {"model.n_layers", Kind::kInt, "2", "transformer blocks"},
  {"model.n_heads", Kind::kInt, "4", "attention heads"},
  {"model.ffn_hidden", Kind::kInt, "256", "feed-forward width"},
  {"model.max_seq_len", Kind::kInt, "64", "longest sequence"},

  {"train.corpus", Kind::kString, "", "corpus file, one document per line; empty draws from the task suite"},
  {"train.corpus_size", Kind::kInt, "20000", "documents drawn when train.corpus is empty"},
  {"train.corpus_seed", Kind::kInt, "77", "seed of the drawn corpus"},
  {"train.steps", Kind::kInt, "1500", "base training steps"},
  {"train.batch_size", Kind::kInt, "32", "documents per step"},
  {"train.lr", Kind::kDouble, "0.001", "base learning rate"},
  {"train.warmup", Kind::kInt, "50", "linear warmup steps"},
  {"train.grad_clip", Kind::kDouble, "1", "global gradient norm clip"},
  {"train.instruct_steps", Kind::kInt, "2000", "instruct tuning steps"},
  {"train.instruct_lr", Kind::kDouble, "0.003", "instruct learning rate"},

  {"quant.variants", Kind::kList, "base,instruct", "model variants to quantize, analyze and evaluate"},
  {"quant.methods", Kind::kList, "rtn,gptq,awq,smoothquant,quarot,duquant", "methods in the matrix"},
  {"quant.settings", Kind::kList, "W4A16,W3A16,W8A8,W4A4", "bit settings in the matrix"},
  {"quant.group_size", Kind::kInt, "128", "weight group size for weight-only methods"},
  {"quant.alpha", Kind::kDouble, "0.5", "smoothing migration strength"},
  {"quant.awq_grid", Kind::kInt, "20", "AWQ alpha grid intervals"},
  {"quant.damp", Kind::kDouble, "0.01", "GPTQ damping as a fraction of mean diag(H)"},
  {"quant.gptq_block", Kind::kInt, "128", "GPTQ lazy-update block"},
  {"quant.act_order", Kind::kBool, "false", "GPTQ column order by descending diag(H)"},
  {"quant.rotation_steps", Kind::kInt, "32", "DuQuant greedy rotation steps"},
  {"quant.block_size", Kind::kInt, "32", "DuQuant rotation block"},
  {"quant.act_clip", Kind::kDouble, "0.9", "DuQuant activation clip ratio"},
  {"quant.weight_clip", Kind::kDouble, "0.8", "DuQuant weight clip ratio"},
  {"quant.keep_query_fp", Kind::kBool, "true", "QuaRot keeps queries in full precision"},
  {"quant.quantize_head", Kind::kBool, "false", "quantize the output head too"},

  {"calib.samples", Kind::kInt, "128", "calibration sequences"},
  {"calib.length", Kind::kInt, "32", "calibration sequence length"},
  {"calib.seed", Kind::kInt, "7", "calibration sampling seed"},
  {"calib.corpus_size", Kind::kInt, "2000", "documents in the calibration pool"},
  {"calib.corpus_seed", Kind::kInt, "4242", "seed of the calibration pool"},
  {"calib.mask_fraction", Kind::kDouble, "0.5", "fraction of calibration tokens masked"},

  {"analyze.normal", Kind::kDouble, "5", "normal outlier: channel mean over the median"},
  {"analyze.massive_rel", Kind::kDouble, "1000", "massive outlier: entry over the median"},
  {"analyze.massive_abs", Kind::kDouble, "100", "massive outlier: absolute floor"},
  {"analyze.grid_cap", Kind::kInt, "512", "tokens kept in heatmap grids"},

  {"gen.length", Kind::kInt, "8", "generated tokens"},
  {"gen.steps", Kind::kInt, "8", "denoising steps"},
  {"gen.block_length", Kind::kInt, "8", "semi-autoregressive block"},
  {"gen.cfg_scale", Kind::kDouble, "0", "classifier-free guidance scale"},
  {"gen.temperature", Kind::kDouble, "0", "sampling temperature, 0 for argmax"},
  {"gen.top_p", Kind::kDouble, "1", "nucleus mass"},
  {"gen.remasking", Kind::kString, "low_confidence", "low_confidence or random"},

  {"eval.tasks", Kind::kList, "pattern-qa,arithmetic-chain,bracket-code", "tasks"},
  {"eval.n_items", Kind::kInt, "200", "items per task"},
  {"eval.seed", Kind::kInt, "0", "generation seed"},
  {"eval.few_shot.pattern-qa", Kind::kInt, "0", "shots"},
  {"eval.few_shot.arithmetic-chain", Kind::kInt, "0", "shots"},
  {"eval.few_shot.bracket-code", Kind::kInt, "1", "shots"},
};
// clang-format on

const KeySpec& key_spec(const std::string& key) {
  for (const auto& k : kKeys)
    if (key == k.key) return k;
  fail("unknown_key", "unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

std::optional<long long> parse_int(const std::string& s) {
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::string shortest(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

[[noreturn]] void bad_value(const KeySpec& k, const std::string& v, const char* what) {
  fail("invalid_config", std::string("key '") + k.key + "' expects " + what + ", got '" + v + "'");
}

// Canonical spelling of a value, so equal configs hash equally.
std::string canonical(const KeySpec& k, const std::string& raw) {
  const std::string v = trim(raw);
  auto bad = [&](const char* what) { bad_value(k, v, what); };
  switch (k.kind) {
    case Kind::kInt: {
      const auto i = parse_int(v);
      if (!i) bad("an integer");
      return std::to_string(*i);
    }
    case Kind::kDouble: {
      const auto d = parse_double(v);
      if (!d) bad("a number");
      return shortest(*d);
    }
    case Kind::kBool:
      if (v == "true" || v == "1") return "true";
      if (v == "false" || v == "0") return "false";
      bad_value(k, v, "true or false");
    case Kind::kString:
      if (v.find('\n') != std::string::npos) bad("a single line");
      return v;
    case Kind::kList: {
      std::string out;
      for (const auto& item : split(v, ',')) {
        if (item.empty()) continue;
        out += (out.empty() ? "" : ",") + item;
      }
      return out;
    }
  }
  return v;
}

std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

void log_line(const CommandOptions& opts, const std::string& msg) {
  if (opts.log) *opts.log << msg << std::endl;
}

struct Run {
  std::string dir;
  std::string hash;

  std::string path(const std::string& rel) const { return (fs::path(dir) / rel).string(); }
};

Run open_run(const RunConfig& cfg, const CommandOptions& opts) {
  cfg.validate();
  Run r{run_dir(cfg, opts.run_root.empty() ? default_run_root() : opts.run_root), cfg.hash()};
  for (const char* sub : {"checkpoints", "plans", "analysis", "eval"}) fs::create_directories(fs::path(r.dir) / sub);
  write_file_atomic(r.path("config.resolved"), "# config " + r.hash + "\n" + cfg.resolved());
  return r;
}

Corpus training_corpus(const RunConfig& cfg) {
  const std::string path = cfg.get("train.corpus");
  if (!path.empty()) return Corpus::load(path);
  return make_corpus(cfg.tasks(), cfg.get_int("train.corpus_size"),
                     static_cast<std::uint64_t>(cfg.get_int("train.corpus_seed")));
}

CalibSet calibration(const RunConfig& cfg) {
  const Corpus pool = make_corpus(cfg.tasks(), cfg.get_int("calib.corpus_size"),
                                  static_cast<std::uint64_t>(cfg.get_int("calib.corpus_seed")));
  return make_calib_set(pool, cfg.get_int("calib.samples"), cfg.get_int("calib.length"),
                        static_cast<std::uint64_t>(cfg.get_int("calib.seed")), "task-suite");
}

// FP models by variant, honoring an explicit checkpoint.
std::map<std::string, Model<float>> fp_models(const RunConfig& cfg, const Run& run, const CommandOptions& opts) {
  std::map<std::string, Model<float>> out;
  if (!opts.checkpoint.empty()) {
    Model<float> m = load_model(opts.checkpoint);
    const std::string v = m.config.variant;
    out.emplace(v, std::move(m));
    return out;
  }
  for (const auto& v : cfg.get_list("quant.variants")) {
    const std::string base = run.path("checkpoints/" + v);
    require(fs::exists(manifest_path(base)), "missing_artifact",
            "no checkpoint for variant '" + v + "' in " + run.dir + " (run train first)");
    out.emplace(v, load_model(base));
  }
  return out;
}

nlohmann::json provenance(const Run& run, const RunConfig& cfg) {
  return {{"config_hash", run.hash}, {"seed", cfg.seed()}};
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : kKeys) values_[k.key] = canonical(k, k.value);
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "parse_error", "line " + std::to_string(lineno) + ": expected key = value");
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) { return parse(read_file(path)); }

void RunConfig::set(const std::string& key, const std::string& value) {
  values_[key] = canonical(key_spec(key), value);
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos, "parse_error", "expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

const std::string& RunConfig::get(const std::string& key) const {
  key_spec(key);
  return values_.at(key);
}

int RunConfig::get_int(const std::string& key) const {
  const long long v = *parse_int(get(key));
  require(v >= std::numeric_limits<int>::min() && v <= std::numeric_limits<int>::max(), "invalid_config",
          "key '" + key + "' out of range");
  return static_cast<int>(v);
}

double RunConfig::get_double(const std::string& key) const { return *parse_double(get(key)); }
bool RunConfig::get_bool(const std::string& key) const { return get(key) == "true"; }
std::vector<std::string> RunConfig::get_list(const std::string& key) const {
  const std::string& v = get(key);
  return v.empty() ? std::vector<std::string>{} : split(v, ',');
}

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::string RunConfig::hash() const { return hex64(fnv1a64(resolved())); }

std::uint64_t RunConfig::seed() const {
  const long long s = *parse_int(get("seed"));
  require(s >= 0, "invalid_config", "seed must be non-negative");
  return static_cast<std::uint64_t>(s);
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.d_model = get_int("model.d_model");
  m.n_layers = get_int("model.n_layers");
  m.n_heads = get_int("model.n_heads");
  m.ffn_hidden = get_int("model.ffn_hidden");
  m.max_seq_len = get_int("model.max_seq_len");
  m.validate();
  return m;
}

TrainHyperParams RunConfig::train() const {
  TrainHyperParams hp;
  hp.steps = get_int("train.steps");
  hp.batch_size = get_int("train.batch_size");
  hp.lr = get_double("train.lr");
  hp.warmup = get_int("train.warmup");
  hp.grad_clip = get_double("train.grad_clip");
  hp.instruct_steps = get_int("train.instruct_steps");
  hp.instruct_lr = get_double("train.instruct_lr");
  hp.eval_every = 0;
  require(hp.steps >= 0 && hp.instruct_steps >= 0 && hp.batch_size >= 1 && hp.warmup >= 0, "invalid_config",
          "training step counts must be non-negative and batch_size positive");
  require(hp.lr > 0.0 && hp.instruct_lr > 0.0 && hp.grad_clip > 0.0, "invalid_config",
          "learning rates and grad_clip must be positive");
  return hp;
}

GenConfig RunConfig::gen() const {
  GenConfig g;
  g.gen_length = get_int("gen.length");
  g.steps = get_int("gen.steps");
  g.block_length = get_int("gen.block_length");
  g.cfg_scale = get_double("gen.cfg_scale");
  g.temperature = get_double("gen.temperature");
  g.top_p = get_double("gen.top_p");
  g.remasking = remasking_from_string(get("gen.remasking"));
  g.validate();
  return g;
}

std::vector<TaskSpec> RunConfig::tasks() const {
  std::vector<TaskSpec> out;
  for (const auto& name : get_list("eval.tasks")) {
    TaskSpec t = TaskSpec::defaults(task_from_string(name));
    t.n_items = get_int("eval.n_items");
    t.few_shot = get_int("eval.few_shot." + name);
    t.gen = gen();
    t.validate();
    out.push_back(t);
  }
  require(!out.empty(), "invalid_config", "eval.tasks is empty");
  return out;
}

MethodConfig RunConfig::method(Method m, const BitSetting& bits) const {
  MethodConfig c = MethodConfig::defaults(m, bits);
  if (is_weight_only(m)) c.weight_spec.group_size = get_int("quant.group_size");
  c.alpha = get_double("quant.alpha");
  c.awq_grid = get_int("quant.awq_grid");
  c.damp_frac = get_double("quant.damp");
  c.gptq_block = get_int("quant.gptq_block");
  c.act_order = get_bool("quant.act_order");
  c.rotation_steps = get_int("quant.rotation_steps");
  c.block_size = get_int("quant.block_size");
  c.act_clip = get_double("quant.act_clip");
  c.weight_clip = get_double("quant.weight_clip");
  c.keep_query_fp = get_bool("quant.keep_query_fp");
  c.quantize_head = get_bool("quant.quantize_head");
  c.seed = seed();
  c.validate();
  return c;
}

OutlierThresholds RunConfig::thresholds() const {
  OutlierThresholds t;
  t.normal = get_double("analyze.normal");
  t.massive_rel = get_double("analyze.massive_rel");
  t.massive_abs = get_double("analyze.massive_abs");
  t.validate();
  return t;
}

void RunConfig::validate() const {
  seed();
  model();
  train();
  tasks();
  thresholds();
  require(get_int("analyze.grid_cap") >= 1, "invalid_config", "analyze.grid_cap must be positive");
  require(get_int("calib.samples") >= 1 && get_int("calib.length") >= 1 && get_int("calib.corpus_size") >= 1,
          "invalid_config", "calibration sizes must be positive");
  require(get_int("calib.length") <= get_int("model.max_seq_len"), "invalid_config",
          "calib.length exceeds model.max_seq_len");
  require(!get_list("quant.variants").empty(), "invalid_config", "quant.variants is empty");
  for (const auto& v : get_list("quant.variants"))
    require(v == "base" || v == "instruct", "invalid_config", "unknown variant '" + v + "'");
  for (const auto& m : get_list("quant.methods")) {
    const Method meth = method_from_string(m);
    for (const auto& s : get_list("quant.settings")) {
      const BitSetting bits = BitSetting::parse(s);
      if (method_applies(meth, bits)) method(meth, bits);
    }
  }
  for (const auto& s : get_list("quant.settings")) BitSetting::parse(s);
}

std::vector<std::pair<std::string, std::string>> RunConfig::describe() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : kKeys) out.emplace_back(std::string(k.key) + " = " + k.value, k.help);
  return out;
}

std::string default_run_root() {
  const char* env = std::getenv("DLLMQ_RUN_ROOT");
  return env && *env ? std::string(env) : std::string("runs");
}

std::string run_dir(const RunConfig& cfg, const std::string& root) {
  return (fs::path(root) / (cfg.hash() + "-s" + std::to_string(cfg.seed()))).string();
}

bool method_applies(Method m, const BitSetting& bits) { return is_weight_only(m) == (bits.act_bits == 16); }

std::string cell_name(const std::string& variant, const std::string& method, const std::string& setting) {
  return variant + "-" + method + "-" + setting;
}

void cmd_train(const RunConfig& cfg, const CommandOptions& opts) {
  const Run run = open_run(cfg, opts);
  const Corpus corpus = training_corpus(cfg);
  const TrainHyperParams hp = cfg.train();
  Rng rng(cfg.seed());
  TrainLog base_log, instruct_log;
  log_line(opts, "train: base, " + std::to_string(hp.steps) + " steps on " + std::to_string(corpus.documents.size()) +
                     " documents");
  const Model<float> base = train_toy(cfg.model(), corpus, hp, rng, &base_log);
  save_model(run.path("checkpoints/base"), base, provenance(run, cfg));
  log_line(opts, "train: instruct, " + std::to_string(hp.instruct_steps) + " steps");
  const Model<float> instruct = train_instruct(base, corpus, hp, rng, &instruct_log);
  save_model(run.path("checkpoints/instruct"), instruct, provenance(run, cfg));

  std::string csv = "# config " + run.hash + "\nphase,step,loss\n";
  char buf[96];
  for (const auto& [phase, log] : {std::pair{"base", &base_log}, std::pair{"instruct", &instruct_log}})
    for (std::size_t i = 0; i < log->train_loss.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%zu,%.17g\n", phase, i + 1, log->train_loss[i]);
      csv += buf;
    }
  write_file_atomic(run.path("checkpoints/train_log.csv"), csv);
  log_line(opts, "train: wrote " + run.path("checkpoints"));
}

void cmd_quantize(const RunConfig& cfg, const CommandOptions& opts) {
  const Run run = open_run(cfg, opts);
  const auto models = fp_models(cfg, run, opts);
  const CalibSet calib = calibration(cfg);
  const CalibContext ctx{&calib, cfg.seed(), cfg.get_double("calib.mask_fraction")};
  save_calib(run.path("plans/calib"), calib, {{"config_hash", run.hash}});
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [variant, model] : models)
    for (const auto& s : cfg.get_list("quant.settings"))
      for (const auto& m : cfg.get_list("quant.methods")) {
        const Method meth = method_from_string(m);
        const BitSetting bits = BitSetting::parse(s);
        if (!method_applies(meth, bits)) continue;
        const std::string cell = cell_name(variant, m, s);
        log_line(opts, "quantize: " + cell);
        TransformPlan plan;
        const Model<float> q = quantize_model(model, cfg.method(meth, bits), ctx, &plan);
        Container pc = plan_to_container(plan);
        pc.metadata["config_hash"] = run.hash;
        save(run.path("plans/" + cell), pc);
        save_model(run.path("checkpoints/" + cell), q, provenance(run, cfg));
        index.push_back({{"cell", cell}, {"variant", variant}, {"method", m}, {"setting", s}, {"stats", plan.stats}});
      }
  write_file_atomic(run.path("plans/index.json"), json_text({{"config_hash", run.hash}, {"plans", index}}));
}

void cmd_analyze(const RunConfig& cfg, const CommandOptions& opts) {
  const Run run = open_run(cfg, opts);
  const auto models = fp_models(cfg, run, opts);
  const CalibSet calib = calibration(cfg);
  const OutlierThresholds th = cfg.thresholds();
  CaptureOptions co;
  co.seed = cfg.seed();
  co.mask_fraction = cfg.get_double("calib.mask_fraction");
  co.grid_cap = cfg.get_int("analyze.grid_cap");
  for (const auto& [variant, model] : models) {
    log_line(opts, "analyze: " + variant);
    const Capture cap = capture(model, calib, co);
    const fs::path dir = fs::path(run.dir) / "analysis" / variant;
    fs::create_directories(dir / "heatmaps");
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& rec : cap.records) {
      sites.push_back(classify_outliers(rec, th).to_json());
      export_heatmap(rec, (dir / "heatmaps" / (rec.site + ".csv")).string(),
                     "config " + run.hash + " variant " + variant + " site " + rec.site);
    }
    const nlohmann::json doc{{"config_hash", run.hash},
                             {"variant", variant},
                             {"thresholds", {{"normal", th.normal}, {"massive_rel", th.massive_rel}, {"massive_abs", th.massive_abs}}},
                             {"calibration", {{"samples", calib.sample_count}, {"length", calib.sequence_length}}},
                             {"sites", sites}};
    write_file_atomic((dir / "outliers.json").string(), json_text(doc));
  }
}

void cmd_eval(const RunConfig& cfg, const CommandOptions& opts) {
  const Run run = open_run(cfg, opts);
  const auto models = fp_models(cfg, run, opts);
  std::vector<std::string> variants;
  for (const auto& [v, _] : models) variants.push_back(v);
  const QuantizeFn load_cell = [&](const std::string& v, const std::string& m,
                                   const std::string& s) -> std::optional<Model<float>> {
    if (!method_applies(method_from_string(m), BitSetting::parse(s))) return std::nullopt;
    const std::string base = run.path("checkpoints/" + cell_name(v, m, s));
    require(fs::exists(manifest_path(base)), "missing_artifact",
            "no quantized checkpoint '" + cell_name(v, m, s) + "' (run quantize first)");
    log_line(opts, "eval: " + cell_name(v, m, s));
    return load_model(base);
  };
  log_line(opts, "eval: FP baselines");
  const MatrixResult res = run_matrix(models, variants, cfg.get_list("quant.methods"), cfg.get_list("quant.settings"),
                                      cfg.tasks(), load_cell, static_cast<std::uint64_t>(cfg.get_int("eval.seed")));
  std::vector<EvalReport> all = res.baselines;
  all.insert(all.end(), res.reports.begin(), res.reports.end());
  nlohmann::json doc = reports_to_json(all);
  doc["config_hash"] = run.hash;
  write_file_atomic(run.path("eval/reports.json"), json_text(doc));
  write_file_atomic(run.path("eval/table.md"), "<!-- config " + run.hash + " -->\n" + res.markdown);
  write_file_atomic(run.path("eval/table.csv"), "# config " + run.hash + "\n" + res.csv);
}

std::string cmd_generate(const RunConfig& cfg, const CommandOptions& opts, const std::string& prompt) {
  Model<float> model;
  if (!opts.checkpoint.empty()) {
    model = load_model(opts.checkpoint);
  } else {
    cfg.validate();
    const std::string dir = run_dir(cfg, opts.run_root.empty() ? default_run_root() : opts.run_root);
    const std::string base = (fs::path(dir) / "checkpoints" / cfg.get_list("quant.variants").front()).string();
    require(fs::exists(manifest_path(base)), "missing_artifact", "no checkpoint at " + base + " (run train first)");
    model = load_model(base);
  }
  const auto ids = Tokenizer::encode(prompt);
  Rng rng(cfg.seed());
  const auto out = generate(model, ids, cfg.gen(), rng);
  return Tokenizer::decode(std::vector<int>(out.begin() + static_cast<std::ptrdiff_t>(ids.size()), out.end()));
}

namespace {

struct RunArtifacts {
  std::string dir, name, hash;
  std::vector<EvalReport> reports;
  std::map<std::string, nlohmann::json> analysis;  // variant -> outliers.json
};

RunArtifacts read_run(const std::string& dir) {
  RunArtifacts a;
  a.dir = dir;
  a.name = fs::path(dir).lexically_normal().filename().string();
  if (a.name.empty()) a.name = fs::path(dir).lexically_normal().parent_path().filename().string();
  const std::string cfg_path = (fs::path(dir) / "config.resolved").string();
  require(fs::exists(cfg_path), "missing_artifact", "'" + dir + "' is not a run directory");
  a.hash = RunConfig::load(cfg_path).hash();
  const std::string reports = (fs::path(dir) / "eval" / "reports.json").string();
  require(fs::exists(reports), "missing_artifact", "no eval/reports.json in '" + dir + "' (run eval first)");
  const nlohmann::json doc = nlohmann::json::parse(read_file(reports));
  require(doc.value("config_hash", "") == a.hash, "config_mismatch",
          "reports in '" + dir + "' were produced under another config");
  a.reports = reports_from_json(doc);
  const fs::path an = fs::path(dir) / "analysis";
  if (fs::exists(an)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(an))
      if (fs::exists(e.path() / "outliers.json")) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files)
      a.analysis[f.filename().string()] = nlohmann::json::parse(read_file((f / "outliers.json").string()));
  }
  return a;
}

std::string fmt(double v, const char* f = "%.1f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::string cmd_report(const std::vector<std::string>& run_dirs) {
  require(!run_dirs.empty(), "invalid_config", "report needs at least one run directory");
  std::vector<RunArtifacts> runs;
  for (const auto& d : run_dirs) runs.push_back(read_run(d));
  const bool many = runs.size() > 1;

  std::vector<EvalReport> baselines, reports;
  for (const auto& r : runs)
    for (EvalReport e : r.reports) {
      if (many) e.variant += "@" + r.name;
      (e.method == "fp" ? baselines : reports).push_back(e);
    }

  std::ostringstream os;
  os << "# dllmq report\n\n";
  os << "| Run | Config |\n|---|---|\n";
  for (const auto& r : runs) os << "| " << r.name << " | " << r.hash << " |\n";
  os << "\n## Accuracy\n\n" << render_markdown(baselines, reports);

  os << "\n## Severity\n\nDrop per task against the FP baseline: negligible below 1%, moderate from 1% to 4%, "
        "significant above 4%.\n\n";
  os << "| Model | Setting | Method | negligible | moderate | significant | n/a |\n|---|---|---|---|---|---|---|\n";
  std::vector<std::array<std::string, 3>> keys;
  std::map<std::array<std::string, 3>, std::array<int, 4>> counts;
  for (const auto& e : reports) {
    const std::array<std::string, 3> k{e.variant, e.setting, e.method};
    if (!counts.count(k)) keys.push_back(k);
    ++counts[k][static_cast<std::size_t>(e.severity)];
  }
  for (const auto& k : keys) {
    const auto& c = counts[k];
    os << "| " << k[0] << " | " << k[1] << " | " << k[2] << " | " << c[0] << " | " << c[1] << " | " << c[2] << " | "
       << c[3] << " |\n";
  }
  if (keys.empty()) os << "| - | - | - | 0 | 0 | 0 | 0 |\n";

  bool header = false;
  for (const auto& r : runs)
    for (const auto& [variant, doc] : r.analysis) {
      if (!header) {
        os << "\n## Activation outliers\n\n| Model | Site | Normal channels | Massive entries | Max | Median |\n"
              "|---|---|---|---|---|---|\n";
        header = true;
      }
      for (const auto& s : doc.at("sites"))
        os << "| " << variant << (many ? "@" + r.name : "") << " | " << s.at("site").get<std::string>() << " | "
           << s.at("normal_outlier_channels").size() << " | " << s.at("massive_outliers").size() << " | "
           << fmt(s.at("max_magnitude").get<double>(), "%.3g") << " | "
           << fmt(s.at("medians").at("magnitude").get<double>(), "%.3g") << " |\n";
    }

  const std::string text = os.str();
  if (!many) write_file_atomic((fs::path(runs[0].dir) / "report.md").string(), text);
  return text;
}

}  // namespace dllmq
