// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "tppt/errors.hpp"

namespace tppt::eval {

/// Lower-triangular accuracies: rows[t][tau] is accuracy on task tau after stage t (0-based).
struct AccuracyMatrix {
  std::vector<std::vector<double>> rows;

  std::size_t stages() const { return rows.size(); }

  void validate() const {
    if (rows.empty()) throw ContractError("accuracy matrix is empty");
    for (std::size_t t = 0; t < rows.size(); ++t) {
      if (rows[t].size() != t + 1) {
        throw ContractError("accuracy matrix row " + std::to_string(t + 1) + " has " + std::to_string(rows[t].size()) +
                            " entries, expected " + std::to_string(t + 1));
      }
    }
  }

  void add_row(std::vector<double> row) {
    if (row.size() != rows.size() + 1) throw ContractError("accuracy row length must equal its stage number");
    rows.push_back(std::move(row));
  }
};

/// Test-size-weighted accuracy over all seen tasks for one matrix row.
inline double overall_accuracy(std::span<const double> row, std::span<const std::size_t> task_sizes) {
  if (row.empty() || task_sizes.size() < row.size()) throw ContractError("overall_accuracy: missing task sizes");
  double correct = 0.0, total = 0.0;
  for (std::size_t k = 0; k < row.size(); ++k) {
    correct += row[k] * static_cast<double>(task_sizes[k]);
    total += static_cast<double>(task_sizes[k]);
  }
  if (total == 0.0) throw ContractError("overall_accuracy: no test examples");
  return correct / total;
}

struct Summary {
  double average = 0.0;  // mean of per-stage overall accuracies
  double last = 0.0;     // overall accuracy after the final stage
};

inline Summary summarize(std::span<const double> stage_accuracies) {
  if (stage_accuracies.empty()) throw ContractError("summarize: no stages");
  double s = 0.0;
  for (double a : stage_accuracies) s += a;
  return {s / static_cast<double>(stage_accuracies.size()), stage_accuracies.back()};
}

inline std::vector<double> stage_accuracies(const AccuracyMatrix& m, std::span<const std::size_t> task_sizes) {
  m.validate();
  std::vector<double> out;
  for (const auto& row : m.rows) out.push_back(overall_accuracy(row, task_sizes));
  return out;
}

inline Summary summarize(const AccuracyMatrix& m, std::span<const std::size_t> task_sizes) {
  const auto acc = stage_accuracies(m, task_sizes);
  return summarize(acc);
}

struct Forgetting {
  std::vector<double> per_stage;  // F_1 = 0 by convention
  double average = 0.0;
};

/// F_t = mean over tasks tau < t of max over earlier stages t' in [tau, t) of A[t'][tau] - A[t][tau].
/// Not clamped: improvement yields negative values.
inline Forgetting forgetting(const AccuracyMatrix& m) {
  m.validate();
  Forgetting f;
  f.per_stage.push_back(0.0);
  for (std::size_t t = 1; t < m.stages(); ++t) {
    double acc = 0.0;
    for (std::size_t task = 0; task < t; ++task) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t prev = task; prev < t; ++prev) best = std::max(best, m.rows[prev][task] - m.rows[t][task]);
      acc += best;
    }
    f.per_stage.push_back(acc / static_cast<double>(t));
  }
  double s = 0.0;
  for (double v : f.per_stage) s += v;
  f.average = s / static_cast<double>(f.per_stage.size());
  return f;
}

/// Per-class unit-normalized mean embedding.
using ClassMeans = std::map<int, std::vector<double>>;

namespace detail {
inline double distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("class means have different dimensions");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}
}  // namespace detail

/// embeddings: row-major [N, D].
inline ClassMeans class_means(std::span<const double> embeddings, std::span<const int> labels, std::size_t dim) {
  if (embeddings.size() != labels.size() * dim) throw ContractError("class_means: embedding/label count mismatch");
  ClassMeans sums;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& acc = sums[labels[i]];
    acc.resize(dim, 0.0);
    for (std::size_t j = 0; j < dim; ++j) acc[j] += embeddings[i * dim + j];
  }
  for (auto& [c, v] : sums) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n == 0.0) throw ContractError("class " + std::to_string(c) + " has a zero mean embedding");
    for (double& x : v) x /= n;
  }
  return sums;
}

/// Mean over classes of the earlier snapshot of ||mu_now - mu_prev||.
inline double representation_drift(const ClassMeans& now, const ClassMeans& prev) {
  if (prev.empty()) throw ContractError("representation_drift: earlier snapshot is empty");
  double s = 0.0;
  for (const auto& [c, mu] : prev) {
    const auto it = now.find(c);
    if (it == now.end()) throw ContractError("representation_drift: class " + std::to_string(c) + " missing from later snapshot");
    s += detail::distance(it->second, mu);
  }
  return s / static_cast<double>(prev.size());
}

/// Mean over unordered class pairs of ||mu_m - mu_n||.
inline double pairwise_diversity(const ClassMeans& means) {
  if (means.size() < 2) throw ContractError("pairwise_diversity needs at least two classes");
  std::vector<const std::vector<double>*> rows;
  for (const auto& [_, mu] : means) rows.push_back(&mu);
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      s += detail::distance(*rows[i], *rows[j]);
      ++pairs;
    }
  return s / static_cast<double>(pairs);
}

}  // namespace tppt::eval
