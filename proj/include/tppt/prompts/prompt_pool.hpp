// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "tppt/autodiff/ops.hpp"
#include "tppt/errors.hpp"
#include "tppt/rng.hpp"

namespace tppt::prompts {

using ad::Tensor;

inline constexpr double kInitScale = 0.02;
// Visual components start near the encoder's token scale: with unit affinities
// the sum of ten components has roughly unit RMS.
inline constexpr double kComponentScale = 0.3;
inline constexpr double kHeadBiasInit = 1.0;

/// Components and affinity-head columns contributed by one task.
struct TaskBlock {
  int task_id = 0;
  std::size_t count = 0;
  std::vector<Tensor> components;  // per layer [count, L*D]
  std::vector<Tensor> head_weight;  // per layer [Q, count]
  std::vector<Tensor> head_bias;    // per layer [count]

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < components.size(); ++l) {
      out.push_back(components[l]);
      out.push_back(head_weight[l]);
      out.push_back(head_bias[l]);
    }
    return out;
  }

  void set_trainable(bool on) {
    for (auto& t : parameters()) {
      t.set_requires_grad(on);
      t.zero_grad();
    }
  }
};

struct InstancePrompts {
  std::vector<Tensor> prompts;     // per layer [N, L, D]
  std::vector<Tensor> affinities;  // per layer [N, M]
};

/// Incremental per-layer visual prompt components. For input query q the layer-l
/// prompt is sum_m alpha_l[m] * P_l[m] with alpha_l = q W_l + b_l (raw affinities).
/// Components and head columns of earlier tasks are frozen once a new task is added.
class VisualPromptPool {
 public:
  VisualPromptPool() = default;
  VisualPromptPool(std::size_t depth, std::size_t length, std::size_t model_dim, std::size_t query_dim)
      : depth_(depth), length_(length), model_dim_(model_dim), query_dim_(query_dim) {
    if (depth == 0 || length == 0 || model_dim == 0 || query_dim == 0) {
      throw ContractError("visual prompt pool dimensions must be positive");
    }
  }

  std::size_t depth() const { return depth_; }
  std::size_t length() const { return length_; }
  std::size_t model_dim() const { return model_dim_; }
  std::size_t query_dim() const { return query_dim_; }

  /// Total components per layer (M).
  std::size_t size() const {
    std::size_t m = 0;
    for (const auto& b : blocks_) m += b.count;
    return m;
  }

  const std::vector<TaskBlock>& blocks() const { return blocks_; }
  std::vector<TaskBlock>& blocks() { return blocks_; }

  void expand(int task_id, std::size_t count, Rng& rng) {
    if (count == 0) throw ContractError("prompts_per_task must be positive");
    for (auto& b : blocks_) b.set_trainable(false);
    TaskBlock block;
    block.task_id = task_id;
    block.count = count;
    const std::size_t width = length_ * model_dim_;
    for (std::size_t l = 0; l < depth_; ++l) {
      block.components.push_back(Tensor::parameter({count, width}, rng.normal_vector(count * width, kComponentScale)));
      block.head_weight.push_back(Tensor::parameter({query_dim_, count}, rng.normal_vector(query_dim_ * count, kInitScale)));
      block.head_bias.push_back(Tensor::parameter({count}, std::vector<double>(count, kHeadBiasInit)));
    }
    blocks_.push_back(std::move(block));
  }

  /// queries: [N, Q] frozen query features.
  InstancePrompts instance_prompts(const Tensor& queries) const {
    if (blocks_.empty()) throw ContractError("visual prompt pool is empty");
    if (queries.rank() != 2 || queries.dim(1) != query_dim_) {
      throw ShapeError("query shape " + ad::to_string(queries.shape()) + " does not match query dim " +
                       std::to_string(query_dim_));
    }
    const std::size_t n = queries.dim(0);
    InstancePrompts out;
    for (std::size_t l = 0; l < depth_; ++l) {
      std::vector<Tensor> weights, biases, comps;
      for (const auto& b : blocks_) {
        weights.push_back(b.head_weight[l]);
        biases.push_back(b.head_bias[l]);
        comps.push_back(b.components[l]);
      }
      const Tensor w = blocks_.size() == 1 ? weights[0] : ad::concat(weights, 1);
      const Tensor bias = blocks_.size() == 1 ? biases[0] : ad::concat(biases, 0);
      const Tensor p = blocks_.size() == 1 ? comps[0] : ad::concat(comps, 0);
      Tensor alpha = ad::add(ad::matmul(queries, w), bias);
      out.prompts.push_back(ad::reshape(ad::matmul(alpha, p), {n, length_, model_dim_}));
      out.affinities.push_back(std::move(alpha));
    }
    return out;
  }

  /// Only the newest task's block is trainable.
  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> out;
    for (const auto& b : blocks_)
      for (auto& t : b.parameters())
        if (t.requires_grad()) out.push_back(t);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& b : blocks_)
      for (auto& t : b.parameters()) out.push_back(t);
    return out;
  }

 private:
  std::size_t depth_ = 0, length_ = 0, model_dim_ = 0, query_dim_ = 0;
  std::vector<TaskBlock> blocks_;
};

/// One deep textual prompt [d_t, L_t, D] per seen class. All stay trainable.
class TextualPromptSet {
 public:
  TextualPromptSet() = default;
  TextualPromptSet(std::size_t depth, std::size_t length, std::size_t model_dim)
      : depth_(depth), length_(length), model_dim_(model_dim) {
    if (depth == 0 || length == 0 || model_dim == 0) throw ContractError("textual prompt dimensions must be positive");
  }

  std::size_t depth() const { return depth_; }
  std::size_t length() const { return length_; }
  std::size_t model_dim() const { return model_dim_; }
  std::size_t size() const { return prompts_.size(); }
  bool contains(int class_id) const { return prompts_.count(class_id) != 0; }

  void add_class(int class_id, Rng& rng) {
    if (contains(class_id)) throw ContractError("duplicate textual prompt for class " + std::to_string(class_id));
    const std::size_t n = depth_ * length_ * model_dim_;
    prompts_.emplace(class_id, Tensor::parameter({depth_, length_, model_dim_}, rng.normal_vector(n, kInitScale)));
  }

  /// Restores a stored prompt (checkpoint loading).
  void insert(int class_id, Tensor prompt) {
    if (contains(class_id)) throw ContractError("duplicate textual prompt for class " + std::to_string(class_id));
    if (prompt.shape() != ad::Shape{depth_, length_, model_dim_}) {
      throw ShapeError("textual prompt must be " + ad::to_string({depth_, length_, model_dim_}));
    }
    prompts_.emplace(class_id, std::move(prompt));
  }

  const Tensor& at(int class_id) const {
    const auto it = prompts_.find(class_id);
    if (it == prompts_.end()) throw ContractError("no textual prompt for class " + std::to_string(class_id));
    return it->second;
  }

  /// Per-layer prompts [C, L, D] for the given classes, in order.
  std::vector<Tensor> layer_prompts(std::span<const int> classes) const {
    std::vector<Tensor> rows;
    for (int c : classes) rows.push_back(ad::reshape(at(c), {1, depth_, length_, model_dim_}));
    const Tensor stacked = rows.size() == 1 ? rows[0] : ad::concat(rows, 0);
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < depth_; ++l)
      out.push_back(ad::reshape(ad::slice(stacked, 1, l, 1), {classes.size(), length_, model_dim_}));
    return out;
  }

  std::vector<int> classes() const {
    std::vector<int> out;
    for (const auto& [c, _] : prompts_) out.push_back(c);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& [_, t] : prompts_) out.push_back(t);
    return out;
  }

 private:
  std::size_t depth_ = 0, length_ = 0, model_dim_ = 0;
  std::map<int, Tensor> prompts_;
};

/// Visual pool plus (for the multi-modal variant) per-class textual prompts.
class PromptPool {
 public:
  PromptPool() = default;
  PromptPool(VisualPromptPool visual, std::optional<TextualPromptSet> textual)
      : visual_(std::move(visual)), textual_(std::move(textual)) {}
  PromptPool(VisualPromptPool visual, std::optional<TextualPromptSet> textual, std::vector<int> task_ids,
             std::vector<int> seen_classes)
      : visual_(std::move(visual)),
        textual_(std::move(textual)),
        task_ids_(std::move(task_ids)),
        seen_classes_(std::move(seen_classes)) {}

  const VisualPromptPool& visual() const { return visual_; }
  VisualPromptPool& visual() { return visual_; }
  const std::optional<TextualPromptSet>& textual() const { return textual_; }
  const std::vector<int>& task_ids() const { return task_ids_; }
  const std::vector<int>& seen_classes() const { return seen_classes_; }

  /// Appends `prompts_per_task` components per layer, widens the affinity heads,
  /// allocates a textual prompt per new class and freezes earlier visual blocks.
  void expand_for_task(int task_id, std::span<const int> new_classes, std::size_t prompts_per_task,
                       std::uint64_t seed) {
    if (std::find(task_ids_.begin(), task_ids_.end(), task_id) != task_ids_.end()) {
      throw ContractError("duplicate task id " + std::to_string(task_id));
    }
    if (!task_ids_.empty() && task_id < task_ids_.back()) throw ContractError("task ids must increase");
    for (std::size_t i = 0; i < new_classes.size(); ++i) {
      const int c = new_classes[i];
      const bool seen = std::find(seen_classes_.begin(), seen_classes_.end(), c) != seen_classes_.end();
      const bool repeated = std::find(new_classes.begin(), new_classes.begin() + static_cast<std::ptrdiff_t>(i), c) !=
                            new_classes.begin() + static_cast<std::ptrdiff_t>(i);
      if (seen || repeated) throw ContractError("duplicate class id " + std::to_string(c));
    }
    Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(task_id) + 1000);
    visual_.expand(task_id, prompts_per_task, rng);
    if (textual_) {
      for (int c : new_classes) textual_->add_class(c, rng);
    }
    task_ids_.push_back(task_id);
    seen_classes_.insert(seen_classes_.end(), new_classes.begin(), new_classes.end());
  }

  std::vector<Tensor> trainable_parameters() const {
    auto out = visual_.trainable_parameters();
    if (textual_)
      for (auto& t : textual_->parameters()) out.push_back(t);
    return out;
  }

 private:
  VisualPromptPool visual_;
  std::optional<TextualPromptSet> textual_;
  std::vector<int> task_ids_;
  std::vector<int> seen_classes_;
};

}  // namespace tppt::prompts
