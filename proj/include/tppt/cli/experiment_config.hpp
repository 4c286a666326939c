// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tppt/continual/learner.hpp"
#include "tppt/encoders/pretrain.hpp"
#include "tppt/errors.hpp"
#include "tppt/synthdata/synth.hpp"

namespace tppt::cli {

using nlohmann::json;

/// Fully resolved experiment description. Token shapes of the encoder follow
/// the dataset; tau is shared by the encoder and the objectives.
struct ExperimentConfig {
  synth::SynthConfig synth;
  enc::EncoderConfig encoder;
  enc::PretrainConfig pretrain;
  cl::TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string output_dir = "runs/default";
  std::string pretrained_encoder;  // empty: pretrain per seed

  enc::EncoderConfig resolved_encoder(const synth::SynthDataset& ds) const {
    enc::EncoderConfig c = enc::fit_to_dataset(encoder, ds);
    c.tau = train.tau;
    return c;
  }

  void validate() const {
    synth.validate();
    train.validate();
    enc::EncoderConfig probe = encoder;
    probe.tau = train.tau;
    probe.validate();
    if (pretrain.epochs == 0) throw ConfigError("pretrain.epochs", "must be positive");
    if (!(pretrain.lr > 0.0)) throw ConfigError("pretrain.lr", "must be positive");
    if (seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
    if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
    if (synth.n_classes % train.effective_tasks() != 0) {
      throw ConfigError("num_tasks", "must divide synth.n_classes (" + std::to_string(synth.n_classes) + ")");
    }
  }
};

inline json to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  return json{
      {"mode", cl::to_string(t.mode)},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir},
      {"pretrained_encoder", c.pretrained_encoder},
      {"num_tasks", t.num_tasks},
      {"batch_size", t.batch_size},
      {"epochs", t.epochs},
      {"lr", t.lr},
      {"momentum", t.momentum},
      {"prompt_length_v", t.prompt_length_v},
      {"prompt_length_t", t.prompt_length_t},
      {"prompt_depth_v", t.prompt_depth_v},
      {"prompt_depth_t", t.prompt_depth_t},
      {"prompts_per_task", t.prompts_per_task},
      {"exemplars_per_class", t.exemplars_per_class},
      {"alpha", t.alpha},
      {"tau", t.tau},
      {"synth",
       {{"n_classes", c.synth.n_classes},
        {"train_per_class", c.synth.train_per_class},
        {"test_per_class", c.synth.test_per_class},
        {"pretrain_per_class", c.synth.pretrain_per_class},
        {"image_tokens", c.synth.image_tokens},
        {"token_dim", c.synth.token_dim},
        {"template_length", c.synth.template_length},
        {"sigma_between", c.synth.sigma_between},
        {"sigma_within", c.synth.sigma_within},
        {"domain_shift", c.synth.domain_shift},
        {"seed", c.synth.seed}}},
      {"encoder",
       {{"depth", c.encoder.depth},
        {"model_dim", c.encoder.model_dim},
        {"heads", c.encoder.heads},
        {"mlp_dim", c.encoder.mlp_dim},
        {"embed_dim", c.encoder.embed_dim}}},
      {"pretrain", {{"epochs", c.pretrain.epochs}, {"lr", c.pretrain.lr}}},
  };
}

namespace detail {

inline bool non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Checks that every key of `given` exists in `schema` with a compatible JSON type.
inline void check_keys(const json& given, const json& schema, const std::string& prefix) {
  if (!given.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "must be a JSON object");
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string name = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError(name, "unknown configuration key");
    const json& want = schema.at(it.key());
    const json& got = it.value();
    if (want.is_object()) {
      check_keys(got, want, name);
    } else if (want.is_number()) {
      if (!got.is_number()) throw ConfigError(name, "expected a number");
      if (want.is_number_unsigned() && !non_negative_integer(got)) {
        throw ConfigError(name, "expected a non-negative integer");
      }
    } else if (want.is_string() && !got.is_string()) {
      throw ConfigError(name, "expected a string");
    } else if (want.is_array()) {
      if (!got.is_array()) throw ConfigError(name, "expected an array");
      for (const auto& x : got)
        if (!non_negative_integer(x)) throw ConfigError(name, "entries must be non-negative integers");
    }
  }
}

template <class T>
T read(const json& j, const char* key, const std::string& name) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(name, "has the wrong type");
  }
}

}  // namespace detail

/// Parses a config document. Missing keys keep their defaults; unknown keys are errors.
inline ExperimentConfig config_from_json(const json& given) {
  const ExperimentConfig defaults;
  json merged = to_json(defaults);
  detail::check_keys(given, merged, "");
  merged.merge_patch(given);

  ExperimentConfig c;
  const std::string mode = detail::read<std::string>(merged, "mode", "mode");
  const auto parsed = cl::parse_mode(mode);
  if (!parsed) throw ConfigError("mode", "unknown mode '" + mode + "' (expected tppt-v, tppt-vt, ce-only, zero-shot or joint)");
  auto& t = c.train;
  t.mode = *parsed;
  c.seeds = detail::read<std::vector<std::uint64_t>>(merged, "seeds", "seeds");
  c.output_dir = detail::read<std::string>(merged, "output_dir", "output_dir");
  c.pretrained_encoder = detail::read<std::string>(merged, "pretrained_encoder", "pretrained_encoder");
  t.num_tasks = detail::read<std::size_t>(merged, "num_tasks", "num_tasks");
  t.batch_size = detail::read<std::size_t>(merged, "batch_size", "batch_size");
  t.epochs = detail::read<std::size_t>(merged, "epochs", "epochs");
  t.lr = detail::read<double>(merged, "lr", "lr");
  t.momentum = detail::read<double>(merged, "momentum", "momentum");
  t.prompt_length_v = detail::read<std::size_t>(merged, "prompt_length_v", "prompt_length_v");
  t.prompt_length_t = detail::read<std::size_t>(merged, "prompt_length_t", "prompt_length_t");
  t.prompt_depth_v = detail::read<std::size_t>(merged, "prompt_depth_v", "prompt_depth_v");
  t.prompt_depth_t = detail::read<std::size_t>(merged, "prompt_depth_t", "prompt_depth_t");
  t.prompts_per_task = detail::read<std::size_t>(merged, "prompts_per_task", "prompts_per_task");
  t.exemplars_per_class = detail::read<std::size_t>(merged, "exemplars_per_class", "exemplars_per_class");
  t.alpha = detail::read<double>(merged, "alpha", "alpha");
  t.tau = detail::read<double>(merged, "tau", "tau");

  const json& s = merged.at("synth");
  c.synth.n_classes = detail::read<std::size_t>(s, "n_classes", "synth.n_classes");
  c.synth.train_per_class = detail::read<std::size_t>(s, "train_per_class", "synth.train_per_class");
  c.synth.test_per_class = detail::read<std::size_t>(s, "test_per_class", "synth.test_per_class");
  c.synth.pretrain_per_class = detail::read<std::size_t>(s, "pretrain_per_class", "synth.pretrain_per_class");
  c.synth.image_tokens = detail::read<std::size_t>(s, "image_tokens", "synth.image_tokens");
  c.synth.token_dim = detail::read<std::size_t>(s, "token_dim", "synth.token_dim");
  c.synth.template_length = detail::read<std::size_t>(s, "template_length", "synth.template_length");
  c.synth.sigma_between = detail::read<double>(s, "sigma_between", "synth.sigma_between");
  c.synth.sigma_within = detail::read<double>(s, "sigma_within", "synth.sigma_within");
  c.synth.domain_shift = detail::read<double>(s, "domain_shift", "synth.domain_shift");
  c.synth.seed = detail::read<std::uint64_t>(s, "seed", "synth.seed");

  const json& e = merged.at("encoder");
  c.encoder.depth = detail::read<std::size_t>(e, "depth", "encoder.depth");
  c.encoder.model_dim = detail::read<std::size_t>(e, "model_dim", "encoder.model_dim");
  c.encoder.heads = detail::read<std::size_t>(e, "heads", "encoder.heads");
  c.encoder.mlp_dim = detail::read<std::size_t>(e, "mlp_dim", "encoder.mlp_dim");
  c.encoder.embed_dim = detail::read<std::size_t>(e, "embed_dim", "encoder.embed_dim");

  const json& p = merged.at("pretrain");
  c.pretrain.epochs = detail::read<std::size_t>(p, "epochs", "pretrain.epochs");
  c.pretrain.lr = detail::read<double>(p, "lr", "pretrain.lr");

  c.validate();
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config", "cannot open '" + path + "'");
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("malformed JSON: ") + e.what());
  }
}

/// Applies `key=value` overrides (dotted keys reach nested sections). Values
/// parse as JSON when possible and fall back to plain strings.
inline json apply_overrides(json doc, const std::vector<std::string>& overrides) {
  const json schema = to_json(ExperimentConfig{});
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(item, "override must look like key=value");
    const std::string key = item.substr(0, eq), text = item.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    json::json_pointer ptr;
    const json* node = &schema;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(part)) throw ConfigError(key, "unknown configuration key");
      node = &node->at(part);
      ptr /= part;
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    if (node->is_object()) throw ConfigError(key, "cannot override a whole section");
    doc[ptr] = std::move(value);
  }
  return doc;
}

}  // namespace tppt::cli
