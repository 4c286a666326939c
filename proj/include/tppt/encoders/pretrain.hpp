// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "tppt/autodiff/optim.hpp"
#include "tppt/encoders/dual_encoder.hpp"
#include "tppt/objectives/losses.hpp"
#include "tppt/synthdata/synth.hpp"

namespace tppt::enc {

struct PretrainConfig {
  std::size_t epochs = 10;
  double lr = 3e-3;  // Adam
};

struct PretrainReport {
  double zero_shot_accuracy = 0.0;
  double chance = 0.0;
  std::size_t steps = 0;
  std::vector<double> loss_curve;  // one mean loss per epoch
};

/// Encoder config whose token shapes match the dataset.
inline EncoderConfig fit_to_dataset(EncoderConfig cfg, const synth::SynthDataset& ds) {
  cfg.image_tokens = ds.config.image_tokens;
  cfg.patch_dim = ds.config.token_dim;
  cfg.text_length = ds.text_length();
  cfg.vocab_size = ds.vocab_size();
  return cfg;
}

/// Template prototypes (unprompted text embeddings) for the given classes: [C, E].
inline Tensor template_prototypes(const DualEncoder& enc, const synth::SynthDataset& ds, std::span<const int> classes) {
  std::vector<std::vector<std::size_t>> texts;
  for (int c : classes) texts.push_back(ds.class_text(c));
  return enc.encode_texts(texts).detach();
}

/// Argmax of the frozen-encoder class probabilities over `classes`, scored on
/// the given examples (which must all belong to `classes`).
inline double zero_shot_accuracy(const DualEncoder& enc, const synth::SynthDataset& ds,
                                 const std::vector<synth::Example>& split, std::span<const std::size_t> indices,
                                 std::span<const int> classes) {
  if (indices.empty()) return 0.0;
  const Tensor protos = template_prototypes(enc, ds, classes);
  std::size_t correct = 0;
  constexpr std::size_t chunk = 256;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
    const Tensor z = enc.encode_images(synth::image_batch(split, part, ds.config));
    const Tensor logits = obj::similarity_logits(z, protos, enc.tau());
    const auto v = logits.data();
    const std::size_t c = classes.size();
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto row = v.subspan(i * c, c);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (classes[best] == split[part[i]].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

/// Contrastive pretraining of both towers on (image, class-template) pairs from
/// the dataset's pretraining corpus, then freezing. Each step pairs one pretraining
/// image per class with that class's text, so every row of the batch has a unique positive. Throws PretrainingError when
/// held-out zero-shot accuracy does not beat chance (multi-class datasets only).
inline DualEncoder pretrain_dual_encoder(const synth::SynthDataset& ds, const EncoderConfig& base_cfg,
                                         const PretrainConfig& pcfg, std::uint64_t seed,
                                         PretrainReport* report = nullptr) {
  const EncoderConfig cfg = fit_to_dataset(base_cfg, ds);
  DualEncoder enc(cfg, seed);
  const std::size_t n_classes = ds.num_classes();
  const auto& corpus = ds.pretrain;
  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < corpus.size(); ++i) by_class[static_cast<std::size_t>(corpus[i].label)].push_back(i);
  std::size_t steps_per_epoch = corpus.size();
  for (const auto& members : by_class) {
    if (members.empty()) throw ContractError("pretraining dataset lacks examples for some class");
    steps_per_epoch = std::min(steps_per_epoch, members.size());
  }
  std::vector<int> classes(n_classes);
  std::iota(classes.begin(), classes.end(), 0);
  std::vector<std::vector<std::size_t>> texts;
  for (int c : classes) texts.push_back(ds.class_text(c));

  auto params = enc.parameters();
  ad::AdamState opt;
  opt.base_lr = pcfg.lr;
  opt.total_steps = std::max<std::size_t>(1, pcfg.epochs * steps_per_epoch);
  Rng rng = Rng(seed).fork(21);
  PretrainReport rep;
  for (std::size_t epoch = 0; epoch < pcfg.epochs; ++epoch) {
    for (auto& members : by_class) rng.shuffle(members);
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<std::size_t> batch;
      for (const auto& members : by_class) batch.push_back(members[s]);
      const Tensor z = enc.encode_images(synth::image_batch(corpus, batch, ds.config));
      const Tensor w = enc.encode_texts(texts);
      const Tensor loss = obj::symmetric_info_nce(z, w, cfg.tau);
      if (!std::isfinite(loss.item())) throw NumericalError("non-finite pretraining loss");
      epoch_loss += loss.item();
      loss.backward();
      ad::adam_step(params, opt);
      ++rep.steps;
    }
    rep.loss_curve.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    if (report) *report = rep;
  }
  enc.freeze();

  std::vector<std::size_t> held_out(ds.test.size());
  std::iota(held_out.begin(), held_out.end(), std::size_t{0});
  rep.zero_shot_accuracy = zero_shot_accuracy(enc, ds, ds.test, held_out, classes);
  rep.chance = 1.0 / static_cast<double>(n_classes);
  if (report) *report = rep;
  if (n_classes > 1 && rep.zero_shot_accuracy <= rep.chance) {
    throw PretrainingError("zero-shot accuracy " + std::to_string(rep.zero_shot_accuracy) +
                           " does not exceed chance " + std::to_string(rep.chance));
  }
  return enc;
}

}  // namespace tppt::enc
