// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// dllmq [--run-root DIR] <command> [--config FILE] [--set key=value ...]

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "dllmq/pipeline.hpp"

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, Common& c, bool checkpoint) {
  cmd->add_option("-c,--config", c.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", c.overrides, "override one key (key=value), repeatable");
  if (checkpoint) cmd->add_option("--checkpoint", c.checkpoint, "FP checkpoint base path instead of the run's own");
}

dllmq::RunConfig resolve(const Common& c) {
  dllmq::RunConfig cfg = c.config_path.empty() ? dllmq::RunConfig() : dllmq::RunConfig::load(c.config_path);
  for (const auto& o : c.overrides) cfg.set_assignment(o);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization experiments on a toy masked-diffusion language model"};
  app.require_subcommand(1);
  std::string run_root = dllmq::default_run_root();
  app.add_option("--run-root", run_root, "directory holding run directories (default $DLLMQ_RUN_ROOT or ./runs)");
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "no progress on stderr");

  Common train, quant, analyze, eval, gen, report, show;
  auto* c_train = app.add_subcommand("train", "train the base and instruct checkpoints");
  add_common(c_train, train, false);
  auto* c_quant = app.add_subcommand("quantize", "build plans and quantized checkpoints for the matrix");
  add_common(c_quant, quant, true);
  auto* c_analyze = app.add_subcommand("analyze", "outlier reports and heatmaps on the calibration set");
  add_common(c_analyze, analyze, true);
  auto* c_eval = app.add_subcommand("eval", "evaluate FP baselines and every quantized cell");
  add_common(c_eval, eval, true);
  auto* c_gen = app.add_subcommand("generate", "denoise an answer for a prompt and print it");
  add_common(c_gen, gen, true);
  std::string prompt;
  c_gen->add_option("-p,--prompt", prompt, "prompt text")->required();
  auto* c_report = app.add_subcommand("report", "markdown report over run directories");
  add_common(c_report, report, false);
  std::vector<std::string> report_dirs;
  c_report->add_option("runs", report_dirs, "run directories (default: the configured run)");
  auto* c_show = app.add_subcommand("config", "print the resolved config and its run directory");
  add_common(c_show, show, false);
  bool list_keys = false;
  c_show->add_flag("--keys", list_keys, "list every key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  dllmq::CommandOptions opts;
  opts.run_root = run_root;
  opts.log = quiet ? nullptr : &std::cerr;
  try {
    if (*c_train) {
      dllmq::cmd_train(resolve(train), opts);
    } else if (*c_quant) {
      opts.checkpoint = quant.checkpoint;
      dllmq::cmd_quantize(resolve(quant), opts);
    } else if (*c_analyze) {
      opts.checkpoint = analyze.checkpoint;
      dllmq::cmd_analyze(resolve(analyze), opts);
    } else if (*c_eval) {
      opts.checkpoint = eval.checkpoint;
      dllmq::cmd_eval(resolve(eval), opts);
    } else if (*c_gen) {
      opts.checkpoint = gen.checkpoint;
      std::cout << dllmq::cmd_generate(resolve(gen), opts, prompt) << "\n";
    } else if (*c_report) {
      if (report_dirs.empty()) {
        const dllmq::RunConfig cfg = resolve(report);
        cfg.validate();
        report_dirs.push_back(dllmq::run_dir(cfg, run_root));
      }
      std::cout << dllmq::cmd_report(report_dirs);
    } else if (*c_show) {
      if (list_keys) {
        for (const auto& [kv, help] : dllmq::RunConfig::describe()) std::cout << kv << "  # " << help << "\n";
        return 0;
      }
      const dllmq::RunConfig cfg = resolve(show);
      cfg.validate();
      std::cout << "# config " << cfg.hash() << "\n# run " << dllmq::run_dir(cfg, run_root) << "\n" << cfg.resolved();
    }
  } catch (const dllmq::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: io_error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: parse_error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
