// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic task suite, exact-match scoring, drop severity and the
// variant x setting x method x task comparison matrix.
//
// Every task item is one 16-character unit: an 8-character prompt followed
// by an 8-character answer right-padded with '.'. Few-shot conditioning
// prepends complete units.

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dllmq/dllm.hpp"

namespace dllmq {

inline constexpr int kPromptChars = 8;
inline constexpr int kAnswerChars = 8;
inline constexpr int kUnitChars = kPromptChars + kAnswerChars;

enum class TaskName { kPatternQa, kArithmeticChain, kBracketCode };

std::string to_string(TaskName t);
TaskName task_from_string(const std::string& s);
std::vector<TaskName> all_tasks();

struct TaskItem {
  std::string prompt;     // kPromptChars
  std::string reference;  // kAnswerChars, one accepted answer
};

/// Draws one item of the given task.
TaskItem make_item(TaskName task, Rng& rng);

/// Exact-match check, except bracket-code which accepts any answer that
/// closes the stem into a balanced string (trailing '.' padding only).
bool check_answer(TaskName task, const TaskItem& item, const std::string& answer);

struct TaskSpec {
  TaskName name = TaskName::kPatternQa;
  int n_items = 200;
  int few_shot = 0;
  GenConfig gen;
  std::uint64_t item_seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TaskSpec from_json(const nlohmann::json& j);
  /// Defaults per task: 1-shot bracket-code, 0-shot otherwise; 8 tokens in
  /// 8 steps, one block.
  static TaskSpec defaults(TaskName name);
};

/// Items of a task, fixed by item_seed.
std::vector<TaskItem> make_items(const TaskSpec& spec);

/// Few-shot units for item `index` followed by the item prompt. The shots
/// come from a stream seeded by (item_seed, index).
std::string build_prompt(const TaskSpec& spec, const std::vector<TaskItem>& items, int index);

struct Transcript {
  int index = 0;
  std::string prompt;
  std::string answer;
  bool passed = false;
};

/// Produces the answer text for a prompt. Models, oracles and test doubles
/// all plug in here.
using Responder = std::function<std::string(int index, const std::string& prompt)>;

/// Percentage of items whose answer passes the checker.
double run_task(const Responder& respond, const TaskSpec& spec, std::vector<Transcript>* transcripts = nullptr);

/// Generation-backed run: item i samples with rng.fork(i).
double run_task(const Model<float>& model, const TaskSpec& spec, Rng& rng,
                std::vector<Transcript>* transcripts = nullptr);

/// Training documents drawn uniformly from the listed tasks (repeat a task
/// to weight it), each with 0..few_shot leading shots. A TAB separates the
/// final prompt from its answer.
Corpus make_corpus(const std::vector<TaskSpec>& tasks, int n_documents, std::uint64_t seed);

enum class Severity { kNegligible, kModerate, kSignificant, kNotApplicable };

std::string to_string(Severity s);
Severity severity_from_string(const std::string& s);

struct Drop {
  std::optional<double> pct;  // empty when fp == 0
  Severity severity = Severity::kNotApplicable;
};

/// Relative drop (fp - q) / fp * 100 with negligible < 1 <= moderate <= 4 <
/// significant. The percentage is rounded to 1e-9 before classification so
/// the boundaries are hit exactly.
Drop classify_drop(double fp, double q);

struct EvalReport {
  static constexpr int kSchemaVersion = 1;

  std::string variant;
  std::string method;   // "fp" for baselines
  std::string setting;  // e.g. "W4A16"; "FP" for baselines
  std::string task;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double fp_accuracy = 0.0;
  std::optional<double> drop_pct;
  Severity severity = Severity::kNotApplicable;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

nlohmann::json reports_to_json(const std::vector<EvalReport>& reports);
std::vector<EvalReport> reports_from_json(const nlohmann::json& j);

struct MatrixResult {
  std::vector<EvalReport> baselines;
  std::vector<EvalReport> reports;
  std::string markdown;
  std::string csv;
};

/// Builds the quantized model for (variant, method, setting), or nullopt for
/// a combination outside the matrix (a weight-only method at an activation
/// setting, say).
using QuantizeFn = std::function<std::optional<Model<float>>(const std::string& variant, const std::string& method,
                                                             const std::string& setting)>;

/// Evaluates FP baselines first, then every (variant, method, setting, task)
/// cell once. Throws "missing_baseline" if a variant has no FP model.
MatrixResult run_matrix(const std::map<std::string, Model<float>>& fp_models, const std::vector<std::string>& variants,
                        const std::vector<std::string>& methods, const std::vector<std::string>& settings,
                        const std::vector<TaskSpec>& tasks, const QuantizeFn& quantize, std::uint64_t seed);

/// Markdown table with one row per (variant, setting, method): per-task
/// accuracy, Avg, and Drop of Avg against the variant's FP row. Avg is
/// rounded to one decimal before Drop is computed.
std::string render_markdown(const std::vector<EvalReport>& baselines, const std::vector<EvalReport>& reports);
std::string render_csv(const std::vector<EvalReport>& baselines, const std::vector<EvalReport>& reports);

}  // namespace dllmq
