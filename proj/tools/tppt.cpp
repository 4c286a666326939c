// SPDX-License-Identifier: Apache-2.0
// Command-line experiment runner.
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tppt/cli/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Prompt-tuning continual learning experiments on synthetic data"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run an experiment described by a JSON config");
  std::string config_path;
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds;
  std::string out_dir, mode;
  bool quiet = false;
  run->add_option("config", config_path, "JSON config file (omit to use the built-in defaults)");
  run->add_option("--set", overrides, "Override a config key, e.g. --set lr=0.05 --set synth.n_classes=10");
  run->add_option("--seeds", seeds, "Seeds to run (replaces the config's list)");
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--mode", mode, "tppt-v | tppt-vt | ce-only | zero-shot | joint");
  run->add_flag("-q,--quiet", quiet, "Suppress progress output");

  auto* show = app.add_subcommand("defaults", "Print the default config as JSON");

  CLI11_PARSE(app, argc, argv);

  using namespace tppt::cli;
  if (show->parsed()) {
    std::cout << to_json(ExperimentConfig{}).dump(2) << "\n";
    return kOk;
  }

  return guarded([&] {
    json doc = config_path.empty() ? json::object() : read_json_file(config_path);
    std::vector<std::string> all = overrides;
    if (!mode.empty()) all.push_back("mode=\"" + mode + "\"");
    if (!out_dir.empty()) all.push_back("output_dir=" + json(out_dir).dump());
    if (!seeds.empty()) all.push_back("seeds=" + json(seeds).dump());
    doc = apply_overrides(std::move(doc), all);
    const ExperimentConfig cfg = config_from_json(doc);
    const auto results = run_experiment(cfg, quiet ? nullptr : &std::cerr);
    for (const auto& r : results) {
      std::cout << "seed " << r.seed << ": average_accuracy=" << r.log.average_accuracy
                << " final_accuracy=" << r.log.final_accuracy
                << " average_forgetting=" << r.log.forgetting_measure.average << "\n";
    }
    std::cout << "artifacts written to " << cfg.output_dir << "\n";
  });
}
