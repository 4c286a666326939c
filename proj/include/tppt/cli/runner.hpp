// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "tppt/cli/experiment_config.hpp"
#include "tppt/continual/checkpoint.hpp"
#include "tppt/continual/learner.hpp"
#include "tppt/evaluation/metrics_log.hpp"

namespace tppt::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kNumericalError = 3, kPretrainingError = 4, kIoError = 5 };

struct SeedResult {
  std::uint64_t seed = 0;
  eval::MetricsLog log;
  double zero_shot_after_pretraining = 0.0;
};

/// The dataset of one run; each run seed draws its own data.
inline synth::SynthDataset dataset_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  synth::SynthConfig sc = cfg.synth;
  sc.seed = cfg.synth.seed + seed;
  return synth::generate(sc);
}

/// Pretrains (or loads) the encoder for `seed`, runs the stream and writes
/// metrics, CSVs and the checkpoint into `dir`.
inline SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir,
                           std::ostream* progress = nullptr) {
  const auto ds = dataset_for(cfg, seed);
  SeedResult result;
  result.seed = seed;
  enc::DualEncoder encoder;
  if (!cfg.pretrained_encoder.empty()) {
    if (!std::filesystem::exists(cfg.pretrained_encoder)) {
      throw ConfigError("pretrained_encoder", "file '" + cfg.pretrained_encoder + "' does not exist");
    }
    encoder = ckpt::load_encoder(cfg.pretrained_encoder);
    if (!(encoder.config() == cfg.resolved_encoder(ds))) {
      throw ConfigError("pretrained_encoder", "stored encoder shape does not match the configured encoder and dataset");
    }
    result.zero_shot_after_pretraining = std::nan("");
  } else {
    enc::PretrainReport report;
    encoder = enc::pretrain_dual_encoder(ds, cfg.resolved_encoder(ds), cfg.pretrain, seed, &report);
    result.zero_shot_after_pretraining = report.zero_shot_accuracy;
    if (progress) *progress << "seed " << seed << ": pretrained encoder, zero-shot accuracy " << report.zero_shot_accuracy << "\n";
  }

  std::optional<prompts::PromptPool> final_pool;
  result.log = cl::run_stream(ds, encoder, cfg.train, seed, [&](const cl::ContinualLearner& learner, std::size_t stage) {
    if (progress) *progress << "seed " << seed << ": stage " << stage + 1 << "/" << learner.stream().size() << " done\n";
    if (stage + 1 == learner.stream().size()) final_pool = learner.pool();
  });
  json echo = to_json(cfg);
  echo["seeds"] = json::array({seed});
  result.log.config = echo;

  std::filesystem::create_directories(dir);
  eval::write_metrics(result.log, dir);
  const bool has_pool = final_pool && !final_pool->visual().blocks().empty();
  ckpt::save_checkpoint((dir / "checkpoint.bin").string(), encoder, has_pool ? &*final_pool : nullptr);
  return result;
}

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

/// Population standard deviation (zero for a single seed).
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  for (double x : v) out.std += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(out.std / static_cast<double>(v.size()));
  return out;
}

/// One row per metric: name, mean, std over seeds. Undefined per-seed values are skipped.
inline std::string aggregate_csv(const std::vector<SeedResult>& results) {
  std::vector<double> avg, last, forget, drift, diversity;
  for (const auto& r : results) {
    avg.push_back(r.log.average_accuracy);
    last.push_back(r.log.final_accuracy);
    forget.push_back(r.log.forgetting_measure.average);
    if (!r.log.drift.empty() && r.log.drift.back()) drift.push_back(*r.log.drift.back());
    if (!r.log.diversity.empty() && r.log.diversity.back()) diversity.push_back(*r.log.diversity.back());
  }
  std::string out = "metric,mean,std,seeds\n";
  const auto row = [&](const char* name, const std::vector<double>& v) {
    const auto ms = mean_std(v);
    out += std::string(name) + "," + (v.empty() ? "" : eval::format_double(ms.mean)) + "," +
           (v.empty() ? "" : eval::format_double(ms.std)) + "," + std::to_string(v.size()) + "\n";
  };
  row("average_accuracy", avg);
  row("final_accuracy", last);
  row("average_forgetting", forget);
  row("final_drift", drift);
  row("final_diversity", diversity);
  return out;
}

/// Runs every seed of the experiment sequentially. Output layout:
/// <out>/seed_<k>/{metrics.json, *.csv, checkpoint.bin} and <out>/aggregate.csv.
inline std::vector<SeedResult> run_experiment(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const std::filesystem::path out(cfg.output_dir);
  std::filesystem::create_directories(out);
  std::vector<SeedResult> results;
  for (auto seed : cfg.seeds) results.push_back(run_seed(cfg, seed, out / ("seed_" + std::to_string(seed)), progress));
  eval::write_text(out / "aggregate.csv", aggregate_csv(results));
  eval::write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  return results;
}

/// Maps the library's failure types to process exit codes, printing a diagnostic.
template <class F>
int guarded(F&& body, std::ostream& err = std::cerr) {
  try {
    body();
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumericalError;
  } catch (const PretrainingError& e) {
    err << "pretraining failure: " << e.what() << "\n";
    return kPretrainingError;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIoError;
  }
}

}  // namespace tppt::cli
