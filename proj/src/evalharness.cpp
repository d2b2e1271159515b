// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include "dllmq/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dllmq/error.hpp"

namespace dllmq {

std::string to_string(TaskName t) {
  switch (t) {
    case TaskName::kPatternQa: return "pattern-qa";
    case TaskName::kArithmeticChain: return "arithmetic-chain";
    case TaskName::kBracketCode: return "bracket-code";
  }
  return "?";
}

TaskName task_from_string(const std::string& s) {
  for (auto t : all_tasks())
    if (to_string(t) == s) return t;
  fail("invalid_config", "unknown task '" + s + "'");
}

std::vector<TaskName> all_tasks() { return {TaskName::kPatternQa, TaskName::kArithmeticChain, TaskName::kBracketCode}; }

namespace {

constexpr int kModulus = 5;

char cipher(char c) { return static_cast<char>('a' + (7 * (c - 'a') + 3) % 26); }

std::string pad_answer(std::string s) {
  s.resize(kAnswerChars, '.');
  return s;
}

char closer(char open) { return open == '(' ? ')' : open == '[' ? ']' : '}'; }

bool is_open(char c) { return c == '(' || c == '[' || c == '{'; }
bool is_close(char c) { return c == ')' || c == ']' || c == '}'; }

}  // namespace

TaskItem make_item(TaskName task, Rng& rng) {
  TaskItem item;
  switch (task) {
    case TaskName::kPatternQa: {
      std::string word, mapped;
      for (int i = 0; i < 5; ++i) {
        word += static_cast<char>('a' + rng.below(26));
        mapped += cipher(word.back());
      }
      item.prompt = "qa:" + word;
      item.reference = pad_answer(mapped);
      break;
    }
    case TaskName::kArithmeticChain: {
      int d[3];
      for (auto& x : d) x = static_cast<int>(rng.below(kModulus));
      item.prompt = "m:" + std::to_string(d[0]) + "+" + std::to_string(d[1]) + "+" + std::to_string(d[2]) + "=";
      const int first = (d[0] + d[1]) % kModulus;
      const int second = (first + d[2]) % kModulus;
      item.reference = pad_answer(std::to_string(first) + ">" + std::to_string(second));
      break;
    }
    case TaskName::kBracketCode: {
      static const char kOpen[] = {'(', '[', '{'};
      std::string stem, stack;
      for (int i = 0; i < 6; ++i) {
        if (!stack.empty() && rng.below(2) == 0) {
          stem += closer(stack.back());
          stack.pop_back();
        } else {
          stem += kOpen[rng.below(3)];
          stack += stem.back();
        }
      }
      std::string close;
      for (auto it = stack.rbegin(); it != stack.rend(); ++it) close += closer(*it);
      item.prompt = "b:" + stem;
      item.reference = pad_answer(close);
      break;
    }
  }
  return item;
}

bool check_answer(TaskName task, const TaskItem& item, const std::string& answer) {
  if (answer.size() != static_cast<std::size_t>(kAnswerChars)) return false;
  if (task != TaskName::kBracketCode) return answer == item.reference;
  auto end = answer.find_last_not_of('.');
  const std::string body = end == std::string::npos ? std::string() : answer.substr(0, end + 1);
  std::string stack;
  for (char c : item.prompt.substr(2) + body) {
    if (is_open(c)) {
      stack += c;
    } else if (is_close(c)) {
      if (stack.empty() || closer(stack.back()) != c) return false;
      stack.pop_back();
    } else {
      return false;
    }
  }
  return stack.empty();
}

void TaskSpec::validate() const {
  require(n_items >= 1, "invalid_task", "n_items must be positive");
  require(few_shot >= 0, "invalid_task", "few_shot must be non-negative");
  gen.validate();
  require(gen.gen_length == kAnswerChars, "invalid_task",
          "gen_length must equal the answer width " + std::to_string(kAnswerChars));
}

nlohmann::json TaskSpec::to_json() const {
  return {{"name", to_string(name)}, {"n_items", n_items},         {"few_shot", few_shot},
          {"gen", gen.to_json()},    {"item_seed", item_seed}};
}

TaskSpec TaskSpec::from_json(const nlohmann::json& j) {
  TaskSpec t;
  t.name = task_from_string(j.at("name").get<std::string>());
  t.n_items = j.at("n_items").get<int>();
  t.few_shot = j.at("few_shot").get<int>();
  t.gen = GenConfig::from_json(j.at("gen"));
  t.item_seed = j.at("item_seed").get<std::uint64_t>();
  t.validate();
  return t;
}

TaskSpec TaskSpec::defaults(TaskName name) {
  TaskSpec t;
  t.name = name;
  t.few_shot = name == TaskName::kBracketCode ? 1 : 0;
  t.item_seed = 1000 + static_cast<std::uint64_t>(name);
  return t;
}

std::vector<TaskItem> make_items(const TaskSpec& spec) {
  spec.validate();
  Rng rng(spec.item_seed);
  std::vector<TaskItem> items;
  items.reserve(static_cast<std::size_t>(spec.n_items));
  for (int i = 0; i < spec.n_items; ++i) items.push_back(make_item(spec.name, rng));
  return items;
}

std::string build_prompt(const TaskSpec& spec, const std::vector<TaskItem>& items, int index) {
  Rng shots = Rng(spec.item_seed).fork(0x5407ULL + static_cast<std::uint64_t>(index));
  std::string out;
  for (int k = 0; k < spec.few_shot; ++k) {
    const TaskItem ex = make_item(spec.name, shots);
    out += ex.prompt + ex.reference;
  }
  return out + items.at(static_cast<std::size_t>(index)).prompt;
}

double run_task(const Responder& respond, const TaskSpec& spec, std::vector<Transcript>* transcripts) {
  const auto items = make_items(spec);
  int passed = 0;
  if (transcripts) transcripts->clear();
  for (int i = 0; i < spec.n_items; ++i) {
    Transcript t;
    t.index = i;
    t.prompt = build_prompt(spec, items, i);
    t.answer = respond(i, t.prompt);
    t.passed = check_answer(spec.name, items[static_cast<std::size_t>(i)], t.answer);
    passed += t.passed ? 1 : 0;
    if (transcripts) transcripts->push_back(std::move(t));
  }
  return 100.0 * passed / spec.n_items;
}

double run_task(const Model<float>& model, const TaskSpec& spec, Rng& rng, std::vector<Transcript>* transcripts) {
  spec.validate();
  // Prompts of one task share a length, so items denoise together in chunks.
  constexpr int kChunk = 64;
  const auto items = make_items(spec);
  std::vector<std::string> answers(items.size());
  for (int first = 0; first < spec.n_items; first += kChunk) {
    const int last = std::min(spec.n_items, first + kChunk);
    std::vector<std::vector<int>> prompts;
    std::vector<Rng> rngs;
    for (int i = first; i < last; ++i) {
      prompts.push_back(Tokenizer::encode(build_prompt(spec, items, i)));
      rngs.push_back(rng.fork(static_cast<std::uint64_t>(i)));
    }
    const auto out = generate_batch(model, prompts, spec.gen, rngs);
    const auto p = static_cast<std::ptrdiff_t>(prompts[0].size());
    for (int i = first; i < last; ++i) {
      const auto& seq = out[static_cast<std::size_t>(i - first)];
      answers[static_cast<std::size_t>(i)] = Tokenizer::decode(std::vector<int>(seq.begin() + p, seq.end()));
    }
  }
  const Responder respond = [&](int index, const std::string&) { return answers[static_cast<std::size_t>(index)]; };
  return run_task(respond, spec, transcripts);
}

Corpus make_corpus(const std::vector<TaskSpec>& tasks, int n_documents, std::uint64_t seed) {
  require(!tasks.empty(), "invalid_config", "corpus needs at least one task");
  require(n_documents >= 0, "invalid_config", "corpus size must be non-negative");
  Rng rng(seed);
  Corpus c;
  c.documents.reserve(static_cast<std::size_t>(n_documents));
  for (int n = 0; n < n_documents; ++n) {
    const TaskSpec& task = tasks[rng.below(tasks.size())];
    const auto shots = rng.below(static_cast<std::uint64_t>(task.few_shot) + 1);
    std::string doc;
    for (std::uint64_t k = 0; k < shots; ++k) {
      const TaskItem ex = make_item(task.name, rng);
      doc += ex.prompt + ex.reference;
    }
    const TaskItem item = make_item(task.name, rng);
    c.documents.push_back(doc + item.prompt + "\t" + item.reference);
  }
  return c;
}

std::string to_string(Severity s) {
  switch (s) {
    case Severity::kNegligible: return "negligible";
    case Severity::kModerate: return "moderate";
    case Severity::kSignificant: return "significant";
    case Severity::kNotApplicable: return "not-applicable";
  }
  return "?";
}

Severity severity_from_string(const std::string& s) {
  for (auto v : {Severity::kNegligible, Severity::kModerate, Severity::kSignificant, Severity::kNotApplicable})
    if (to_string(v) == s) return v;
  fail("invalid_report", "unknown severity '" + s + "'");
}

Drop classify_drop(double fp, double q) {
  Drop d;
  if (fp == 0.0) return d;
  const double pct = std::round((fp - q) / fp * 100.0 * 1e9) / 1e9;
  d.pct = pct;
  d.severity = pct < 1.0 ? Severity::kNegligible : pct <= 4.0 ? Severity::kModerate : Severity::kSignificant;
  return d;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j{{"variant", variant}, {"method", method},           {"setting", setting},
                   {"task", task},       {"seed", seed},               {"accuracy", accuracy},
                   {"fp_accuracy", fp_accuracy}, {"severity", to_string(severity)}};
  j["drop_pct"] = drop_pct ? nlohmann::json(*drop_pct) : nlohmann::json(nullptr);
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.variant = j.at("variant").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.setting = j.at("setting").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.fp_accuracy = j.at("fp_accuracy").get<double>();
  if (!j.at("drop_pct").is_null()) r.drop_pct = j.at("drop_pct").get<double>();
  r.severity = severity_from_string(j.at("severity").get<std::string>());
  const Drop check = classify_drop(r.fp_accuracy, r.accuracy);
  require(check.severity == r.severity, "invalid_report", "severity inconsistent with stored accuracies");
  return r;
}

nlohmann::json reports_to_json(const std::vector<EvalReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  return {{"schema_version", EvalReport::kSchemaVersion}, {"reports", arr}};
}

std::vector<EvalReport> reports_from_json(const nlohmann::json& j) {
  require(j.at("schema_version").get<int>() == EvalReport::kSchemaVersion, "version_mismatch",
          "unsupported report schema version " + j.at("schema_version").dump());
  std::vector<EvalReport> out;
  for (const auto& r : j.at("reports")) out.push_back(EvalReport::from_json(r));
  return out;
}

namespace {

EvalReport make_report(const std::string& variant, const std::string& method, const std::string& setting,
                       const TaskSpec& task, std::uint64_t seed, double acc, double fp_acc) {
  EvalReport r;
  r.variant = variant;
  r.method = method;
  r.setting = setting;
  r.task = to_string(task.name);
  r.seed = seed;
  r.accuracy = acc;
  r.fp_accuracy = fp_acc;
  const Drop d = classify_drop(fp_acc, acc);
  r.drop_pct = d.pct;
  r.severity = d.severity;
  return r;
}

double score(const Model<float>& model, const TaskSpec& task, std::uint64_t seed) {
  Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(task.name));
  return run_task(model, task, rng);
}

}  // namespace

MatrixResult run_matrix(const std::map<std::string, Model<float>>& fp_models, const std::vector<std::string>& variants,
                        const std::vector<std::string>& methods, const std::vector<std::string>& settings,
                        const std::vector<TaskSpec>& tasks, const QuantizeFn& quantize, std::uint64_t seed) {
  for (const auto& t : tasks) t.validate();
  MatrixResult res;
  std::map<std::pair<std::string, std::string>, double> fp_acc;
  for (const auto& v : variants) {
    const auto it = fp_models.find(v);
    require(it != fp_models.end(), "missing_baseline", "no FP baseline for variant '" + v + "'");
    for (const auto& t : tasks) {
      const double acc = score(it->second, t, seed);
      fp_acc[{v, to_string(t.name)}] = acc;
      res.baselines.push_back(make_report(v, "fp", "FP", t, seed, acc, acc));
    }
  }
  for (const auto& v : variants)
    for (const auto& s : settings)
      for (const auto& m : methods) {
        const std::optional<Model<float>> q = quantize(v, m, s);
        if (!q) continue;
        for (const auto& t : tasks)
          res.reports.push_back(make_report(v, m, s, t, seed, score(*q, t, seed), fp_acc.at({v, to_string(t.name)})));
      }
  res.markdown = render_markdown(res.baselines, res.reports);
  res.csv = render_csv(res.baselines, res.reports);
  return res;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s(buf);
  if (s == "-0.0") s = "0.0";
  return s;
}

double round1(double v) { return std::round(v * 10.0) / 10.0; }

struct Row {
  std::string variant, setting, method;
  std::map<std::string, double> acc;
};

std::vector<Row> collect_rows(const std::vector<EvalReport>& reports, std::vector<std::string>& task_order) {
  std::vector<Row> rows;
  for (const auto& r : reports) {
    if (std::find(task_order.begin(), task_order.end(), r.task) == task_order.end()) task_order.push_back(r.task);
    auto it = std::find_if(rows.begin(), rows.end(), [&](const Row& x) {
      return x.variant == r.variant && x.setting == r.setting && x.method == r.method;
    });
    if (it == rows.end()) {
      rows.push_back({r.variant, r.setting, r.method, {}});
      it = rows.end() - 1;
    }
    it->acc[r.task] = r.accuracy;
  }
  return rows;
}

double row_avg(const Row& r) {
  double s = 0.0;
  for (const auto& [_, a] : r.acc) s += a;
  return r.acc.empty() ? 0.0 : s / static_cast<double>(r.acc.size());
}

}  // namespace

std::string render_markdown(const std::vector<EvalReport>& baselines, const std::vector<EvalReport>& reports) {
  std::vector<EvalReport> all = baselines;
  all.insert(all.end(), reports.begin(), reports.end());
  std::vector<std::string> tasks;
  const auto rows = collect_rows(all, tasks);
  std::map<std::string, double> fp_avg;
  for (const auto& r : rows)
    if (r.method == "fp") fp_avg[r.variant] = round1(row_avg(r));

  std::ostringstream os;
  os << "| Model | Setting | Method |";
  for (const auto& t : tasks) os << ' ' << t << " |";
  os << " Avg | Drop |\n|---|---|---|";
  for (std::size_t i = 0; i < tasks.size(); ++i) os << "---|";
  os << "---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.variant << " | " << r.setting << " | " << (r.method == "fp" ? "-" : r.method) << " |";
    for (const auto& t : tasks) {
      const auto it = r.acc.find(t);
      os << ' ' << (it == r.acc.end() ? std::string("-") : fixed(it->second, 1)) << " |";
    }
    const double avg = round1(row_avg(r));
    os << ' ' << fixed(avg, 1) << " |";
    const auto fp = fp_avg.find(r.variant);
    const Drop d = fp == fp_avg.end() ? Drop{} : classify_drop(fp->second, avg);
    os << ' ' << (d.pct ? fixed(*d.pct, 1) + "%" : std::string("n/a")) << " |\n";
  }
  return os.str();
}

std::string render_csv(const std::vector<EvalReport>& baselines, const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "variant,setting,method,task,seed,accuracy,fp_accuracy,drop_pct,severity\n";
  auto emit = [&](const EvalReport& r) {
    os << r.variant << ',' << r.setting << ',' << r.method << ',' << r.task << ',' << r.seed << ','
       << fixed(r.accuracy, 4) << ',' << fixed(r.fp_accuracy, 4) << ',' << (r.drop_pct ? fixed(*r.drop_pct, 4) : "")
       << ',' << to_string(r.severity) << '\n';
  };
  for (const auto& r : baselines) emit(r);
  for (const auto& r : reports) emit(r);
  return os.str();
}

}  // namespace dllmq
