// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <type_traits>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "tppt/autodiff/tensor.hpp"
#include "tppt/errors.hpp"
#include "tppt/rng.hpp"

namespace tppt::synth {

struct SynthConfig {
  std::size_t n_classes = 20;
  std::size_t train_per_class = 50;
  std::size_t test_per_class = 20;
  std::size_t pretrain_per_class = 50;  // backbone pretraining corpus, disjoint from train/test
  std::size_t image_tokens = 6;
  std::size_t token_dim = 2;
  std::size_t template_length = 3;  // shared prefix ids before the class id
  double sigma_between = 1.0;
  double sigma_within = 0.8;
  double domain_shift = 0.5;  // scale of the fixed offset applied to train/test but not pretraining images
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 2) throw ConfigError("synth.n_classes", "must be at least 2");
    if (train_per_class == 0) throw ConfigError("synth.train_per_class", "must be positive");
    if (pretrain_per_class == 0) throw ConfigError("synth.pretrain_per_class", "must be positive");
    if (image_tokens == 0 || token_dim == 0) throw ConfigError("synth.image_tokens", "token grid must be non-empty");
    if (template_length == 0) throw ConfigError("synth.template_length", "must be positive");
    if (!(sigma_within > 0.0)) throw ConfigError("synth.sigma_within", "must be positive");
    if (!(sigma_between > sigma_within)) throw ConfigError("synth.sigma_between", "must exceed sigma_within");
    if (!(domain_shift >= 0.0)) throw ConfigError("synth.domain_shift", "must be non-negative");
  }
};

struct Example {
  std::vector<double> image;      // image_tokens x token_dim, row-major
  std::vector<std::size_t> text;  // template ids followed by the class id
  int label = 0;
};

struct SynthDataset {
  SynthConfig config;
  std::vector<std::vector<double>> centroids;  // per class, image_tokens x token_dim
  std::vector<Example> train;
  std::vector<Example> test;
  std::vector<Example> pretrain;

  std::size_t num_classes() const { return centroids.size(); }
  std::size_t vocab_size() const { return config.template_length + num_classes(); }
  std::size_t text_length() const { return config.template_length + 1; }

  /// The class's hand-template token sequence (shared prefix + class token).
  std::vector<std::size_t> class_text(int label) const {
    std::vector<std::size_t> t(config.template_length);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = i;
    t.push_back(config.template_length + static_cast<std::size_t>(label));
    return t;
  }
};

/// Deterministic in `cfg.seed`.
inline SynthDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t n_classes = cfg.n_classes;
  SynthDataset ds;
  ds.config = cfg;
  const std::size_t dim = cfg.image_tokens * cfg.token_dim;
  Rng centroid_rng(cfg.seed);
  for (std::size_t c = 0; c < n_classes; ++c) ds.centroids.push_back(centroid_rng.normal_vector(dim, cfg.sigma_between));

  const std::vector<double> offset =
      cfg.domain_shift > 0.0 ? centroid_rng.fork(4).normal_vector(dim, cfg.domain_shift) : std::vector<double>(dim, 0.0);
  bool shifted = true;
  const auto sample = [&](Rng& rng, int label) {
    Example ex;
    ex.label = label;
    ex.image = ds.centroids[static_cast<std::size_t>(label)];
    for (std::size_t k = 0; k < dim; ++k) ex.image[k] += rng.normal(cfg.sigma_within) + (shifted ? offset[k] : 0.0);
    ex.text = ds.class_text(label);
    return ex;
  };
  // Separate streams keep the train split stable when test_per_class changes.
  Rng train_rng = centroid_rng.fork(1), test_rng = centroid_rng.fork(2), pretrain_rng = centroid_rng.fork(3);
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t i = 0; i < cfg.train_per_class; ++i) ds.train.push_back(sample(train_rng, static_cast<int>(c)));
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t i = 0; i < cfg.test_per_class; ++i) ds.test.push_back(sample(test_rng, static_cast<int>(c)));
  shifted = false;
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t i = 0; i < cfg.pretrain_per_class; ++i)
      ds.pretrain.push_back(sample(pretrain_rng, static_cast<int>(c)));
  return ds;
}

/// Stacks the selected examples' token grids into an [N, T, P] constant.
inline ad::Tensor image_batch(const std::vector<Example>& split, std::span<const std::size_t> indices,
                              const SynthConfig& cfg) {
  std::vector<double> data;
  data.reserve(indices.size() * cfg.image_tokens * cfg.token_dim);
  for (auto i : indices) {
    const auto& img = split.at(i).image;
    data.insert(data.end(), img.begin(), img.end());
  }
  return ad::Tensor::constant({indices.size(), cfg.image_tokens, cfg.token_dim}, std::move(data));
}

// ---- binary dump -----------------------------------------------------------

inline constexpr char kDatasetMagic[8] = {'T', 'P', 'P', 'T', 'D', 'A', 'T', 'A'};
inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("dataset file truncated");
  return v;
}

}  // namespace detail

/// Self-describing dump: magic, version, config header, then examples.
/// Values are written in host byte order, which must be little-endian.
inline void save_dataset(const SynthDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kDatasetMagic, sizeof kDatasetMagic);
  detail::put<std::uint32_t>(os, kDatasetVersion);
  const auto& c = ds.config;
  for (std::uint64_t v : {std::uint64_t(ds.num_classes()), std::uint64_t(c.train_per_class), std::uint64_t(c.test_per_class),
                          std::uint64_t(c.pretrain_per_class),
                          std::uint64_t(c.image_tokens), std::uint64_t(c.token_dim), std::uint64_t(c.template_length), c.seed})
    detail::put(os, v);
  detail::put(os, c.sigma_between);
  detail::put(os, c.sigma_within);
  detail::put(os, c.domain_shift);
  for (const auto& cen : ds.centroids)
    for (double v : cen) detail::put(os, v);
  for (const auto* split : {&ds.train, &ds.test, &ds.pretrain}) {
    detail::put<std::uint64_t>(os, split->size());
    for (const auto& ex : *split) {
      detail::put<std::int32_t>(os, ex.label);
      for (double v : ex.image) detail::put(os, v);
      for (auto id : ex.text) detail::put<std::uint64_t>(os, id);
    }
  }
  if (!os) throw IoError("write failed: " + path);
}

inline SynthDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kDatasetMagic, sizeof magic) != 0) throw IoError(path + ": not a dataset file");
  if (detail::get<std::uint32_t>(is) != kDatasetVersion) throw IoError(path + ": unsupported dataset version");
  SynthDataset ds;
  auto& c = ds.config;
  c.n_classes = detail::get<std::uint64_t>(is);
  c.train_per_class = detail::get<std::uint64_t>(is);
  c.test_per_class = detail::get<std::uint64_t>(is);
  c.pretrain_per_class = detail::get<std::uint64_t>(is);
  c.image_tokens = detail::get<std::uint64_t>(is);
  c.token_dim = detail::get<std::uint64_t>(is);
  c.template_length = detail::get<std::uint64_t>(is);
  c.seed = detail::get<std::uint64_t>(is);
  c.sigma_between = detail::get<double>(is);
  c.sigma_within = detail::get<double>(is);
  c.domain_shift = detail::get<double>(is);
  const std::size_t dim = c.image_tokens * c.token_dim;
  ds.centroids.assign(c.n_classes, std::vector<double>(dim));
  for (auto& cen : ds.centroids)
    for (double& v : cen) v = detail::get<double>(is);
  for (auto* split : {&ds.train, &ds.test, &ds.pretrain}) {
    const auto n = detail::get<std::uint64_t>(is);
    split->resize(n);
    for (auto& ex : *split) {
      ex.label = detail::get<std::int32_t>(is);
      ex.image.resize(dim);
      for (double& v : ex.image) v = detail::get<double>(is);
      ex.text.resize(c.template_length + 1);
      for (auto& id : ex.text) id = detail::get<std::uint64_t>(is);
    }
  }
  return ds;
}

}  // namespace tppt::synth
