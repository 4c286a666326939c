// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tppt/errors.hpp"
#include "tppt/evaluation/metrics.hpp"

namespace tppt::eval {

/// Everything one continual run reports. Derived fields are recomputable from
/// `matrix` and `task_sizes` via finalize().
struct MetricsLog {
  AccuracyMatrix matrix;
  std::vector<std::size_t> task_sizes;  // test examples per task, in task order
  std::vector<double> stage_accuracy;   // A_t
  std::vector<double> average_so_far;   // running mean of A_1..A_t
  double average_accuracy = 0.0;        // A-bar
  double final_accuracy = 0.0;          // A_T
  Forgetting forgetting_measure;
  std::vector<std::optional<double>> drift;      // undefined at stage 1
  std::vector<std::optional<double>> diversity;  // undefined with fewer than two classes
  std::vector<double> loss_curve;                // mean training loss per epoch, all tasks in order
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string mode;

  void finalize() {
    stage_accuracy = stage_accuracies(matrix, task_sizes);
    average_so_far.clear();
    double s = 0.0;
    for (std::size_t t = 0; t < stage_accuracy.size(); ++t) {
      s += stage_accuracy[t];
      average_so_far.push_back(s / static_cast<double>(t + 1));
    }
    const Summary sum = summarize(stage_accuracy);
    average_accuracy = sum.average;
    final_accuracy = sum.last;
    forgetting_measure = forgetting(matrix);
  }

  /// Throws ContractError naming the first derived field that disagrees with the matrix.
  void check_consistency() const {
    MetricsLog fresh;
    fresh.matrix = matrix;
    fresh.task_sizes = task_sizes;
    fresh.finalize();
    const auto fail = [](const std::string& what) { throw ContractError("metrics log inconsistent: " + what); };
    if (fresh.stage_accuracy != stage_accuracy) fail("stage_accuracy");
    if (fresh.average_so_far != average_so_far) fail("average_so_far");
    if (fresh.average_accuracy != average_accuracy) fail("average_accuracy");
    if (fresh.final_accuracy != final_accuracy) fail("final_accuracy");
    if (fresh.forgetting_measure.per_stage != forgetting_measure.per_stage) fail("forgetting.per_stage");
    if (fresh.forgetting_measure.average != forgetting_measure.average) fail("forgetting.average");
    if (drift.size() != matrix.stages() || diversity.size() != matrix.stages()) fail("per-stage vector length");
  }
};

namespace detail {
inline nlohmann::json optional_array(const std::vector<std::optional<double>>& v) {
  auto out = nlohmann::json::array();
  for (const auto& x : v) out.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
  return out;
}
inline std::vector<std::optional<double>> optional_vector(const nlohmann::json& j) {
  std::vector<std::optional<double>> out;
  for (const auto& x : j) out.push_back(x.is_null() ? std::nullopt : std::optional<double>(x.get<double>()));
  return out;
}
}  // namespace detail

inline nlohmann::json to_json(const MetricsLog& log) {
  nlohmann::json j;
  j["mode"] = log.mode;
  j["seed"] = log.seed;
  j["config"] = log.config;
  j["accuracy_matrix"] = log.matrix.rows;
  j["task_test_sizes"] = log.task_sizes;
  j["stage_accuracy"] = log.stage_accuracy;
  j["average_accuracy_so_far"] = log.average_so_far;
  j["average_accuracy"] = log.average_accuracy;
  j["final_accuracy"] = log.final_accuracy;
  j["forgetting"] = {{"per_stage", log.forgetting_measure.per_stage}, {"average", log.forgetting_measure.average}};
  j["drift"] = detail::optional_array(log.drift);
  j["diversity"] = detail::optional_array(log.diversity);
  j["loss_curve"] = log.loss_curve;
  j["metadata"] = {{"class_means", "mean of unit-normalized visual embeddings, re-normalized to unit length"},
                   {"drift", "euclidean distance between unit class means of consecutive stages"},
                   {"diversity", "mean euclidean distance over unordered pairs of unit class means"}};
  return j;
}

inline MetricsLog metrics_from_json(const nlohmann::json& j) {
  try {
    MetricsLog log;
    log.mode = j.at("mode").get<std::string>();
    log.seed = j.at("seed").get<std::uint64_t>();
    log.config = j.at("config");
    log.matrix.rows = j.at("accuracy_matrix").get<std::vector<std::vector<double>>>();
    log.task_sizes = j.at("task_test_sizes").get<std::vector<std::size_t>>();
    log.stage_accuracy = j.at("stage_accuracy").get<std::vector<double>>();
    log.average_so_far = j.at("average_accuracy_so_far").get<std::vector<double>>();
    log.average_accuracy = j.at("average_accuracy").get<double>();
    log.final_accuracy = j.at("final_accuracy").get<double>();
    log.forgetting_measure.per_stage = j.at("forgetting").at("per_stage").get<std::vector<double>>();
    log.forgetting_measure.average = j.at("forgetting").at("average").get<double>();
    log.drift = detail::optional_vector(j.at("drift"));
    log.diversity = detail::optional_vector(j.at("diversity"));
    log.loss_curve = j.at("loss_curve").get<std::vector<double>>();
    return log;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed metrics document: ") + e.what());
  }
}

/// Text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string accuracy_matrix_csv(const MetricsLog& log) {
  const std::size_t n = log.matrix.stages();
  std::string out = "stage";
  for (std::size_t k = 0; k < n; ++k) out += ",task_" + std::to_string(k + 1);
  out += '\n';
  for (std::size_t t = 0; t < n; ++t) {
    out += std::to_string(t + 1);
    for (std::size_t k = 0; k < n; ++k) out += "," + (k <= t ? format_double(log.matrix.rows[t][k]) : std::string());
    out += '\n';
  }
  return out;
}

inline std::string stage_metrics_csv(const MetricsLog& log) {
  const auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  std::string out = "stage,stage_accuracy,average_accuracy_so_far,drift,diversity\n";
  for (std::size_t t = 0; t < log.stage_accuracy.size(); ++t) {
    out += std::to_string(t + 1) + "," + format_double(log.stage_accuracy[t]) + "," +
           format_double(log.average_so_far[t]) + "," + opt(log.drift[t]) + "," + opt(log.diversity[t]) + "\n";
  }
  return out;
}

inline std::string summary_csv(const MetricsLog& log) {
  return "average_accuracy,final_accuracy,average_forgetting\n" + format_double(log.average_accuracy) + "," +
         format_double(log.final_accuracy) + "," + format_double(log.forgetting_measure.average) + "\n";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

/// metrics.json plus the three CSV tables.
inline void write_metrics(const MetricsLog& log, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.json", to_json(log).dump(2) + "\n");
  write_text(dir / "accuracy_matrix.csv", accuracy_matrix_csv(log));
  write_text(dir / "stage_metrics.csv", stage_metrics_csv(log));
  write_text(dir / "summary.csv", summary_csv(log));
}

inline MetricsLog read_metrics(const std::filesystem::path& json_path) {
  std::ifstream is(json_path);
  if (!is) throw IoError("cannot open " + json_path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(json_path.string() + ": " + e.what());
  }
  return metrics_from_json(j);
}

}  // namespace tppt::eval
