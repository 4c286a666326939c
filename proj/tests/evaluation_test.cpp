// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tppt/evaluation/metrics_log.hpp"
#include "tppt/rng.hpp"

namespace eval = tppt::eval;

namespace {

eval::AccuracyMatrix matrix_of(std::vector<std::vector<double>> rows) {
  eval::AccuracyMatrix m;
  for (auto& r : rows) m.add_row(std::move(r));
  return m;
}

eval::AccuracyMatrix random_matrix(tppt::Rng& rng, std::size_t stages) {
  eval::AccuracyMatrix m;
  for (std::size_t t = 0; t < stages; ++t) {
    std::vector<double> row(t + 1);
    for (double& v : row) v = rng.uniform(0.0, 1.0);
    m.add_row(std::move(row));
  }
  return m;
}

eval::ClassMeans random_means(tppt::Rng& rng, const std::vector<int>& classes, std::size_t dim) {
  eval::ClassMeans out;
  for (int c : classes) out[c] = oracle::unit(rng.normal_vector(dim, 1.0));
  return out;
}

eval::MetricsLog sample_log() {
  eval::MetricsLog log;
  log.matrix = matrix_of({{0.9}, {0.8, 0.9}, {0.7, 0.8, 0.9}});
  log.task_sizes = {20, 30, 50};
  log.drift = {std::nullopt, 0.25, 0.125};
  log.diversity = {std::nullopt, 0.5, 0.75};
  log.loss_curve = {2.0, 1.5, 1.25};
  log.seed = 4;
  log.mode = "tppt-v";
  log.finalize();
  return log;
}

}  // namespace

TEST(Forgetting, WorkedExample) {
  const auto f = eval::forgetting(matrix_of({{0.9}, {0.8, 0.9}, {0.7, 0.8, 0.9}}));
  ASSERT_EQ(f.per_stage.size(), 3u);
  EXPECT_EQ(f.per_stage[0], 0.0);
  EXPECT_NEAR(f.per_stage[1], 0.1, 1e-15);
  EXPECT_NEAR(f.per_stage[2], 0.15, 1e-15);
  EXPECT_NEAR(f.average, 0.25 / 3.0, 1e-15);
}

TEST(Forgetting, ImprovementIsNegative) {
  const auto f = eval::forgetting(matrix_of({{0.5}, {0.7, 0.9}}));
  EXPECT_NEAR(f.per_stage[1], -0.2, 1e-15);
}

TEST(Forgetting, MatchesOracle) {
  tppt::Rng rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = random_matrix(rng, rng.integer(1, 12));
    const auto f = eval::forgetting(m);
    const auto want = oracle::forgetting(m.rows);
    for (std::size_t t = 0; t < f.per_stage.size(); ++t) ASSERT_NEAR(f.per_stage[t], want[t], 1e-10);
    ASSERT_NEAR(f.average, want.back(), 1e-10);
  }
}

TEST(AccuracyMatrix, RejectsRaggedRows) {
  eval::AccuracyMatrix m;
  EXPECT_THROW(m.add_row({0.1, 0.2}), tppt::ContractError);
  EXPECT_THROW(m.validate(), tppt::ContractError);
  m.rows = {{0.1}, {0.2}};
  EXPECT_THROW(m.validate(), tppt::ContractError);
}

TEST(OverallAccuracy, WeightsByTestSize) {
  const std::vector<double> row{1.0, 0.0};
  const std::vector<std::size_t> sizes{10, 30};
  EXPECT_DOUBLE_EQ(eval::overall_accuracy(row, sizes), 0.25);
  const std::vector<std::size_t> none{0, 0};
  EXPECT_THROW(eval::overall_accuracy(row, none), tppt::ContractError);
}

TEST(ClassMeans, NormalisedPerClassMeans) {
  const std::vector<double> emb{1.0, 0.0, 0.0, 1.0, 3.0, 4.0};
  const std::vector<int> labels{5, 5, 2};
  const auto m = eval::class_means(emb, labels, 2);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_NEAR(m.at(5)[0], std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(m.at(2)[1], 0.8, 1e-15);
  const std::vector<double> cancel{1.0, 0.0, -1.0, 0.0};
  const std::vector<int> same{1, 1};
  EXPECT_THROW(eval::class_means(cancel, same, 2), tppt::ContractError);
}

TEST(Drift, MatchesOracleOverEarlierClasses) {
  tppt::Rng rng(29);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t dim = rng.integer(2, 6), old_n = rng.integer(1, 6), new_n = rng.integer(0, 4);
    std::vector<int> old_classes, all;
    for (std::size_t k = 0; k < old_n + new_n; ++k) (k < old_n ? old_classes : all).push_back(static_cast<int>(k) * 2);
    all.insert(all.begin(), old_classes.begin(), old_classes.end());
    const auto prev = random_means(rng, old_classes, dim);
    const auto now = random_means(rng, all, dim);
    oracle::Mat a, b;
    for (int c : old_classes) {
      a.push_back(now.at(c));
      b.push_back(prev.at(c));
    }
    ASSERT_NEAR(eval::representation_drift(now, prev), oracle::drift(a, b), 1e-10);
  }
}

TEST(Drift, MissingClassIsAnError) {
  eval::ClassMeans prev{{1, {1.0, 0.0}}}, now{{2, {1.0, 0.0}}};
  EXPECT_THROW(eval::representation_drift(now, prev), tppt::ContractError);
  EXPECT_THROW(eval::representation_drift(now, {}), tppt::ContractError);
}

TEST(Diversity, MatchesOracle) {
  tppt::Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = rng.integer(2, 9), dim = rng.integer(2, 6);
    std::vector<int> classes;
    for (std::size_t k = 0; k < n; ++k) classes.push_back(static_cast<int>(k * 3 + 1));
    const auto means = random_means(rng, classes, dim);
    oracle::Mat rows;
    for (const auto& [_, v] : means) rows.push_back(v);
    ASSERT_NEAR(eval::pairwise_diversity(means), oracle::diversity(rows), 1e-10);
  }
}

TEST(Diversity, ClosedForms) {
  eval::ClassMeans orth{{0, {1.0, 0.0}}, {1, {0.0, 1.0}}};
  EXPECT_NEAR(eval::pairwise_diversity(orth), std::sqrt(2.0), 1e-15);
  eval::ClassMeans one{{0, {1.0, 0.0}}};
  EXPECT_THROW(eval::pairwise_diversity(one), tppt::ContractError);
}

TEST(MetricsLog, FinalizeDerivesSummaries) {
  const auto log = sample_log();
  ASSERT_EQ(log.stage_accuracy.size(), 3u);
  EXPECT_DOUBLE_EQ(log.stage_accuracy[1], (0.8 * 20 + 0.9 * 30) / 50.0);
  EXPECT_DOUBLE_EQ(log.final_accuracy, (0.7 * 20 + 0.8 * 30 + 0.9 * 50) / 100.0);
  EXPECT_DOUBLE_EQ(log.average_so_far.back(), log.average_accuracy);
  EXPECT_NO_THROW(log.check_consistency());
}

TEST(MetricsLog, ConsistencyCheckCatchesTampering) {
  auto log = sample_log();
  log.final_accuracy += 1e-9;
  EXPECT_THROW(log.check_consistency(), tppt::ContractError);
  log = sample_log();
  log.forgetting_measure.per_stage[2] = 0.0;
  EXPECT_THROW(log.check_consistency(), tppt::ContractError);
}

TEST(MetricsLog, JsonRoundTripIsExact) {
  tppt::Rng rng(37);
  for (int trial = 0; trial < 50; ++trial) {
    eval::MetricsLog log;
    log.matrix = random_matrix(rng, rng.integer(1, 10));
    for (std::size_t t = 0; t < log.matrix.stages(); ++t) {
      log.task_sizes.push_back(rng.integer(1, 40));
      log.drift.push_back(t == 0 ? std::nullopt : std::optional<double>(rng.uniform(0, 1)));
      log.diversity.push_back(rng.uniform(0, 2));
    }
    log.finalize();
    const auto back = eval::metrics_from_json(nlohmann::json::parse(eval::to_json(log).dump()));
    EXPECT_EQ(back.matrix.rows, log.matrix.rows);
    EXPECT_EQ(back.drift, log.drift);
    EXPECT_EQ(back.diversity, log.diversity);
    EXPECT_EQ(back.final_accuracy, log.final_accuracy);
    EXPECT_NO_THROW(back.check_consistency());
  }
}

TEST(MetricsLog, WritesTablesThatReadBack) {
  const auto dir = std::filesystem::temp_directory_path() / "tppt_eval_test";
  std::filesystem::remove_all(dir);
  const auto log = sample_log();
  eval::write_metrics(log, dir);
  for (const char* f : {"metrics.json", "accuracy_matrix.csv", "stage_metrics.csv", "summary.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const auto back = eval::read_metrics(dir / "metrics.json");
  EXPECT_EQ(back.stage_accuracy, log.stage_accuracy);
  EXPECT_EQ(back.loss_curve, log.loss_curve);
  EXPECT_EQ(back.mode, "tppt-v");

  std::ifstream is(dir / "accuracy_matrix.csv");
  std::stringstream ss;
  ss << is.rdbuf();
  EXPECT_EQ(ss.str(), "stage,task_1,task_2,task_3\n1,0.90000000000000002,,\n2,0.80000000000000004,0.90000000000000002,\n"
                      "3,0.69999999999999996,0.80000000000000004,0.90000000000000002\n");
  std::filesystem::remove_all(dir);
}

TEST(MetricsLog, ReadErrors) {
  EXPECT_THROW(eval::read_metrics("/nonexistent/metrics.json"), tppt::IoError);
  const auto path = std::filesystem::temp_directory_path() / "tppt_bad_metrics.json";
  eval::write_text(path, "{not json");
  EXPECT_THROW(eval::read_metrics(path), tppt::IoError);
  std::filesystem::remove(path);
}

TEST(FormatDouble, RoundTrips) {
  tppt::Rng rng(41);
  for (int k = 0; k < 100; ++k) {
    const double v = rng.normal(10.0);
    EXPECT_EQ(std::stod(eval::format_double(v)), v);
  }
}
