// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "tppt/errors.hpp"

namespace tppt::cl {

/// Greedy herding: each step adds the candidate that brings the running mean of
/// the chosen features closest to the class mean. Ties go to the lowest index.
inline std::vector<std::size_t> select_exemplars(std::span<const std::vector<double>> features, std::size_t k) {
  if (k == 0) throw ContractError("exemplars per class must be at least 1");
  if (features.empty()) throw ContractError("cannot select exemplars from an empty class");
  const std::size_t n = features.size(), d = features[0].size();
  for (const auto& f : features)
    if (f.size() != d) throw ContractError("exemplar features have inconsistent dimensions");

  std::vector<double> mu(d, 0.0);
  for (const auto& f : features)
    for (std::size_t j = 0; j < d; ++j) mu[j] += f[j];
  for (double& v : mu) v /= static_cast<double>(n);

  std::vector<std::size_t> chosen;
  std::vector<bool> used(n, false);
  std::vector<double> running(d, 0.0);
  const std::size_t target = std::min(k, n);
  while (chosen.size() < target) {
    const double count = static_cast<double>(chosen.size() + 1);
    std::size_t best = n;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = mu[j] - (running[j] + features[i][j]) / count;
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = i;
      }
    }
    used[best] = true;
    chosen.push_back(best);
    for (std::size_t j = 0; j < d; ++j) running[j] += features[best][j];
  }
  return chosen;
}

/// Stored training-example indices per seen class, at most k each.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t per_class = 20) : per_class_(per_class) {
    if (per_class == 0) throw ContractError("exemplars per class must be at least 1");
  }

  std::size_t per_class() const { return per_class_; }

  void add_class(int class_id, std::vector<std::size_t> examples) {
    if (exemplars_.count(class_id)) throw ContractError("class " + std::to_string(class_id) + " already buffered");
    if (examples.size() > per_class_) throw ContractError("too many exemplars for class " + std::to_string(class_id));
    exemplars_.emplace(class_id, std::move(examples));
  }

  bool contains(int class_id) const { return exemplars_.count(class_id) != 0; }
  std::size_t count(int class_id) const {
    const auto it = exemplars_.find(class_id);
    return it == exemplars_.end() ? 0 : it->second.size();
  }
  bool empty() const { return exemplars_.empty(); }
  const std::map<int, std::vector<std::size_t>>& contents() const { return exemplars_; }

  /// All stored indices ordered by class id, then selection order.
  std::vector<std::size_t> all_examples() const {
    std::vector<std::size_t> out;
    for (const auto& [_, v] : exemplars_) out.insert(out.end(), v.begin(), v.end());
    return out;
  }

 private:
  std::size_t per_class_;
  std::map<int, std::vector<std::size_t>> exemplars_;
};

}  // namespace tppt::cl
