// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tppt/autodiff/optim.hpp"
#include "tppt/continual/replay_buffer.hpp"
#include "tppt/continual/task_stream.hpp"
#include "tppt/encoders/pretrain.hpp"
#include "tppt/evaluation/metrics_log.hpp"
#include "tppt/objectives/losses.hpp"
#include "tppt/prompts/prompt_pool.hpp"

namespace tppt::cl {

using ad::Tensor;

enum class RunMode { tppt_v, tppt_vt, ce_only, zero_shot, joint };

inline std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::tppt_v: return "tppt-v";
    case RunMode::tppt_vt: return "tppt-vt";
    case RunMode::ce_only: return "ce-only";
    case RunMode::zero_shot: return "zero-shot";
    case RunMode::joint: return "joint";
  }
  return "?";
}

inline std::optional<RunMode> parse_mode(const std::string& s) {
  for (RunMode m : {RunMode::tppt_v, RunMode::tppt_vt, RunMode::ce_only, RunMode::zero_shot, RunMode::joint})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

struct TrainConfig {
  RunMode mode = RunMode::tppt_v;
  std::size_t batch_size = 64;
  std::size_t epochs = 5;
  double lr = 0.1;
  double momentum = 0.9;
  std::size_t prompt_length_v = 4;
  std::size_t prompt_length_t = 4;
  std::size_t prompt_depth_v = 12;  // clamped to the encoder depth
  std::size_t prompt_depth_t = 12;
  std::size_t prompts_per_task = 10;
  std::size_t exemplars_per_class = 20;
  double alpha = 1.0;
  double tau = 0.07;
  std::size_t num_tasks = 10;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
    if (epochs == 0) throw ConfigError("epochs", "must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "must be a positive finite number");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must lie in [0, 1)");
    if (prompt_length_v == 0) throw ConfigError("prompt_length_v", "must be positive");
    if (prompt_length_t == 0) throw ConfigError("prompt_length_t", "must be positive");
    if (prompt_depth_v == 0) throw ConfigError("prompt_depth_v", "must be positive");
    if (prompt_depth_t == 0) throw ConfigError("prompt_depth_t", "must be positive");
    if (prompts_per_task == 0) throw ConfigError("prompts_per_task", "must be positive");
    if (exemplars_per_class == 0) throw ConfigError("exemplars_per_class", "must be positive");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha", "must be a non-negative finite number");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau", "must be a positive finite number");
    if (num_tasks == 0) throw ConfigError("num_tasks", "must be positive");
  }

  /// Joint training is a single task over all classes.
  std::size_t effective_tasks() const { return mode == RunMode::joint ? 1 : num_tasks; }
};

struct StageResult {
  std::vector<double> task_accuracy;  // one entry per seen task
  eval::ClassMeans class_means;
  std::size_t predicted_classes = 0;
};

/// Class-incremental prompt tuning over a task stream with a frozen dual encoder.
/// Drive it with train_next_task() / evaluate() or use run_stream().
class ContinualLearner {
 public:
  ContinualLearner(const synth::SynthDataset& ds, const enc::DualEncoder& encoder, TaskStream stream,
                   const TrainConfig& cfg, std::uint64_t seed)
      : ds_(ds), enc_(encoder), stream_(std::move(stream)), cfg_(cfg), seed_(seed), buffer_(cfg.exemplars_per_class) {
    cfg.validate();
    if (!encoder.frozen()) throw ContractError("continual learning requires a frozen encoder");
    const auto& ec = encoder.config();
    const std::size_t dv = std::min(cfg.prompt_depth_v, ec.depth);
    prompts::VisualPromptPool visual(dv, cfg.prompt_length_v, ec.model_dim, ec.embed_dim);
    std::optional<prompts::TextualPromptSet> textual;
    if (cfg.mode == RunMode::tppt_vt) {
      textual = prompts::TextualPromptSet(std::min(cfg.prompt_depth_t, ec.depth), cfg.prompt_length_t, ec.model_dim);
    }
    pool_ = prompts::PromptPool(std::move(visual), std::move(textual));
    train_queries_ = encode_split(ds_.train);
    test_queries_ = encode_split(ds_.test);
  }

  const TrainConfig& config() const { return cfg_; }
  const TaskStream& stream() const { return stream_; }
  const prompts::PromptPool& pool() const { return pool_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  std::size_t tasks_trained() const { return next_task_; }
  const std::vector<int>& seen_classes() const { return seen_classes_; }
  /// Mean training loss per epoch, appended across tasks.
  const std::vector<double>& loss_curve() const { return loss_curve_; }

  bool uses_prompts() const { return cfg_.mode != RunMode::zero_shot; }
  obj::Mode objective() const {
    switch (cfg_.mode) {
      case RunMode::tppt_vt: return obj::Mode::tppt_vt;
      case RunMode::ce_only: return obj::Mode::ce_only;
      default: return obj::Mode::tppt_v;
    }
  }

  /// Frozen unprompted image features q(x) for training examples.
  std::span<const double> train_query(std::size_t index) const {
    const std::size_t e = enc_.config().embed_dim;
    return std::span<const double>(train_queries_).subspan(index * e, e);
  }

  void train_next_task() {
    if (next_task_ >= stream_.size()) throw ContractError("all tasks of the stream are already trained");
    const Task& task = stream_.tasks[next_task_];
    seen_classes_.insert(seen_classes_.end(), task.classes.begin(), task.classes.end());
    if (uses_prompts()) {
      pool_.expand_for_task(task.id, task.classes, cfg_.prompts_per_task, seed_);
      fit_task(task);
      remember(task);
    }
    ++next_task_;
  }

  /// Accuracy on each seen task's test set plus class means of the test embeddings.
  StageResult evaluate() const {
    if (next_task_ == 0) throw ContractError("evaluate() before any task was trained");
    StageResult out;
    const obj::PrototypeSet protos = prototypes(false);
    out.predicted_classes = protos.size();
    const std::size_t e = enc_.config().embed_dim;
    std::vector<double> all_z;
    std::vector<int> all_labels;
    for (std::size_t k = 0; k < next_task_; ++k) {
      const auto& idx = stream_.tasks[k].test;
      std::size_t correct = 0;
      constexpr std::size_t chunk = 256;
      for (std::size_t start = 0; start < idx.size(); start += chunk) {
        const std::span<const std::size_t> part(idx.data() + start, std::min(chunk, idx.size() - start));
        const Tensor z = embed(ds_.test, test_queries_, part);
        const Tensor logits = obj::similarity_logits(z, protos.embeddings, cfg_.tau);
        const auto v = logits.data();
        const std::size_t c = protos.size();
        for (std::size_t i = 0; i < part.size(); ++i) {
          const auto row = v.subspan(i * c, c);
          const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
          const int label = ds_.test[part[i]].label;
          if (protos.class_ids[best] == label) ++correct;
          all_labels.push_back(label);
        }
        const auto zd = z.data();
        all_z.insert(all_z.end(), zd.begin(), zd.end());
      }
      out.task_accuracy.push_back(idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(idx.size()));
    }
    out.class_means = eval::class_means(all_z, all_labels, e);
    return out;
  }

 private:
  std::vector<double> encode_split(const std::vector<synth::Example>& split) const {
    std::vector<double> out;
    constexpr std::size_t chunk = 256;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < split.size(); start += chunk) {
      idx.resize(std::min(chunk, split.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      const Tensor z = enc_.encode_images(synth::image_batch(split, idx, ds_.config));
      out.insert(out.end(), z.data().begin(), z.data().end());
    }
    return out;
  }

  /// Prompted (or, in zero-shot mode, plain) image embeddings for a batch: [N, E].
  Tensor embed(const std::vector<synth::Example>& split, const std::vector<double>& queries,
               std::span<const std::size_t> idx) const {
    const std::size_t e = enc_.config().embed_dim;
    std::vector<double> q;
    q.reserve(idx.size() * e);
    for (auto i : idx) q.insert(q.end(), queries.begin() + static_cast<std::ptrdiff_t>(i * e),
                                queries.begin() + static_cast<std::ptrdiff_t>((i + 1) * e));
    if (!uses_prompts()) return Tensor::constant({idx.size(), e}, std::move(q));
    const Tensor qt = Tensor::constant({idx.size(), e}, std::move(q));
    const auto inst = pool_.visual().instance_prompts(qt);
    return enc_.encode_images(synth::image_batch(split, idx, ds_.config), inst.prompts);
  }

  /// Prototypes over all seen classes. Template prototypes are constants; the
  /// prompted text prototypes of TPPT-VT carry gradients when `trainable`.
  obj::PrototypeSet prototypes(bool trainable) const {
    obj::PrototypeSet out;
    out.class_ids = seen_classes_;
    if (cfg_.mode == RunMode::tppt_vt) {
      std::vector<std::vector<std::size_t>> texts;
      for (int c : seen_classes_) texts.push_back(ds_.class_text(c));
      const auto layers = pool_.textual()->layer_prompts(seen_classes_);
      Tensor w = enc_.encode_texts(texts, layers);
      out.embeddings = trainable ? w : w.detach();
      out.prompted = true;
    } else {
      out.embeddings = enc::template_prototypes(enc_, ds_, seen_classes_);
    }
    return out;
  }

  void fit_task(const Task& task) {
    std::vector<std::size_t> pool_idx = task.train;
    const auto replay = buffer_.all_examples();
    pool_idx.insert(pool_idx.end(), replay.begin(), replay.end());
    if (pool_idx.empty()) throw ContractError("task " + std::to_string(task.id) + " has no training data");
    const std::size_t batches = (pool_idx.size() + cfg_.batch_size - 1) / cfg_.batch_size;

    auto params = pool_.trainable_parameters();
    ad::OptimizerState opt(cfg_.momentum, cfg_.lr, cfg_.epochs * batches);
    Rng rng = Rng(seed_).fork(5000 + static_cast<std::uint64_t>(task.id));
    const obj::PrototypeSet fixed = cfg_.mode == RunMode::tppt_vt ? obj::PrototypeSet{} : prototypes(false);
    const obj::Mode objective_mode = objective();

    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      rng.shuffle(pool_idx);
      double epoch_loss = 0.0;
      for (std::size_t b = 0; b < batches; ++b) {
        const std::size_t start = b * cfg_.batch_size;
        const std::span<const std::size_t> part(pool_idx.data() + start,
                                                std::min(cfg_.batch_size, pool_idx.size() - start));
        const obj::PrototypeSet protos = cfg_.mode == RunMode::tppt_vt ? prototypes(true) : fixed;
        std::vector<int> labels;
        for (auto i : part) labels.push_back(ds_.train[i].label);
        const auto rows = protos.rows_for(labels);
        const Tensor z = embed(ds_.train, train_queries_, part);
        const auto loss = obj::composite_loss(objective_mode, z, rows, protos, cfg_.alpha, cfg_.tau);
        const double value = loss.total_value();
        if (!std::isfinite(value)) {
          throw NumericalError("non-finite loss on task " + std::to_string(task.id) + ", epoch " +
                               std::to_string(epoch + 1) + ", batch " + std::to_string(b + 1) +
                               " (ce=" + std::to_string(loss.ce_value()) + ", tpcl=" + std::to_string(loss.tpcl_value()) +
                               ", div=" + std::to_string(loss.div_value()) + ")");
        }
        epoch_loss += value;
        loss.total.backward();
        ad::sgd_step(params, opt);
      }
      loss_curve_.push_back(epoch_loss / static_cast<double>(batches));
    }
  }

  void remember(const Task& task) {
    for (int c : task.classes) {
      std::vector<std::size_t> members;
      for (auto i : task.train)
        if (ds_.train[i].label == c) members.push_back(i);
      std::vector<std::vector<double>> feats;
      for (auto i : members) {
        const auto q = train_query(i);
        feats.emplace_back(q.begin(), q.end());
      }
      const auto chosen = select_exemplars(feats, cfg_.exemplars_per_class);
      std::vector<std::size_t> stored;
      for (auto k : chosen) stored.push_back(members[k]);
      buffer_.add_class(c, std::move(stored));
    }
  }

  const synth::SynthDataset& ds_;
  const enc::DualEncoder& enc_;
  TaskStream stream_;
  TrainConfig cfg_;
  std::uint64_t seed_;
  prompts::PromptPool pool_;
  ReplayBuffer buffer_;
  std::vector<double> train_queries_, test_queries_;
  std::vector<int> seen_classes_;
  std::vector<double> loss_curve_;
  std::size_t next_task_ = 0;
};

/// Called after each stage is trained and evaluated, with the 0-based stage index.
using StageObserver = std::function<void(const ContinualLearner&, std::size_t)>;

/// Trains every task in order and records the accuracy matrix, drift and diversity.
inline eval::MetricsLog run_stream(const synth::SynthDataset& ds, const enc::DualEncoder& encoder,
                                   const TrainConfig& cfg, std::uint64_t seed,
                                   const StageObserver& observer = {}) {
  ContinualLearner learner(ds, encoder, split_tasks(ds, cfg.effective_tasks(), seed), cfg, seed);
  eval::MetricsLog log;
  log.seed = seed;
  log.mode = to_string(cfg.mode);
  for (const auto& t : learner.stream().tasks) log.task_sizes.push_back(t.test.size());
  std::optional<eval::ClassMeans> previous;
  for (std::size_t t = 0; t < learner.stream().size(); ++t) {
    learner.train_next_task();
    StageResult stage = learner.evaluate();
    log.matrix.add_row(stage.task_accuracy);
    log.drift.push_back(previous ? std::optional<double>(eval::representation_drift(stage.class_means, *previous))
                                 : std::nullopt);
    log.diversity.push_back(stage.class_means.size() >= 2
                                ? std::optional<double>(eval::pairwise_diversity(stage.class_means))
                                : std::nullopt);
    previous = std::move(stage.class_means);
    if (observer) observer(learner, t);
  }
  log.loss_curve = learner.loss_curve();
  log.finalize();
  return log;
}

}  // namespace tppt::cl
