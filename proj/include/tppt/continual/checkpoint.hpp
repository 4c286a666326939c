// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "tppt/encoders/dual_encoder.hpp"
#include "tppt/errors.hpp"
#include "tppt/prompts/prompt_pool.hpp"

namespace tppt::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kMagic[8] = {'T', 'P', 'P', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr char kEncoderTag[4] = {'E', 'N', 'C', '\0'};
inline constexpr char kPoolTag[4] = {'P', 'O', 'O', 'L'};

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
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

inline void put_tensor(std::ostream& os, const ad::Tensor& t) {
  put<std::uint64_t>(os, t.rank());
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  for (double v : t.data()) put(os, v);
}

inline ad::Tensor get_tensor(std::istream& is, bool trainable) {
  const auto rank = get<std::uint64_t>(is);
  if (rank > 8) throw IoError("checkpoint tensor has implausible rank");
  ad::Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>(is);
  std::vector<double> data(ad::numel(shape));
  for (double& v : data) v = get<double>(is);
  return ad::Tensor::make(std::move(shape), std::move(data), trainable);
}

/// Overwrites `dst` in place, keeping its identity.
inline void load_into(std::istream& is, ad::Tensor& dst) {
  const ad::Tensor src = get_tensor(is, false);
  if (src.shape() != dst.shape()) {
    throw IoError("checkpoint tensor shape " + ad::to_string(src.shape()) + " does not match " +
                  ad::to_string(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.data_mut().begin());
}

inline std::string encoder_section(const enc::DualEncoder& encoder) {
  std::ostringstream os(std::ios::binary);
  const auto& c = encoder.config();
  for (std::uint64_t v : {c.depth, c.model_dim, c.heads, c.mlp_dim, c.embed_dim, c.image_tokens, c.patch_dim,
                          c.text_length, c.vocab_size})
    put(os, v);
  put(os, c.tau);
  const auto params = encoder.parameters();
  put<std::uint64_t>(os, params.size());
  for (const auto& p : params) put_tensor(os, p);
  return os.str();
}

inline std::string pool_section(const prompts::PromptPool& pool) {
  std::ostringstream os(std::ios::binary);
  const auto& v = pool.visual();
  for (std::uint64_t x : {v.depth(), v.length(), v.model_dim(), v.query_dim()}) put(os, x);
  // Task boundaries: one block per task, in training order.
  put<std::uint64_t>(os, v.blocks().size());
  for (const auto& b : v.blocks()) {
    put<std::int64_t>(os, b.task_id);
    put<std::uint64_t>(os, b.count);
    for (std::size_t l = 0; l < v.depth(); ++l) {
      put_tensor(os, b.components[l]);
      put_tensor(os, b.head_weight[l]);
      put_tensor(os, b.head_bias[l]);
    }
  }
  put<std::uint64_t>(os, pool.seen_classes().size());
  for (int c : pool.seen_classes()) put<std::int64_t>(os, c);
  put<std::uint8_t>(os, pool.textual() ? 1 : 0);
  if (pool.textual()) {
    const auto& t = *pool.textual();
    for (std::uint64_t x : {t.depth(), t.length(), t.model_dim()}) put(os, x);
    const auto classes = t.classes();
    put<std::uint64_t>(os, classes.size());
    for (int c : classes) {
      put<std::int64_t>(os, c);
      put_tensor(os, t.at(c));
    }
  }
  return os.str();
}

inline void put_section(std::ostream& os, const char (&tag)[4], const std::string& payload) {
  os.write(tag, 4);
  put<std::uint64_t>(os, payload.size());
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

/// Reads the container and returns the payload of the section named `tag`, if any.
inline std::optional<std::string> find_section(const std::string& path, const char (&tag)[4]) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) throw IoError(path + ": not a checkpoint file");
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto sections = get<std::uint32_t>(is);
  for (std::uint32_t s = 0; s < sections; ++s) {
    char name[4];
    is.read(name, 4);
    const auto size = get<std::uint64_t>(is);
    if (!is) throw IoError(path + ": checkpoint truncated");
    std::string payload(size, '\0');
    is.read(payload.data(), static_cast<std::streamsize>(size));
    if (!is) throw IoError(path + ": checkpoint truncated");
    if (std::memcmp(name, tag, 4) == 0) return payload;
  }
  return std::nullopt;
}

}  // namespace detail

/// Writes the encoder and, when given, the prompt pool into one container file.
inline void save_checkpoint(const std::string& path, const enc::DualEncoder& encoder,
                            const prompts::PromptPool* pool = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kMagic, sizeof kMagic);
  detail::put(os, kVersion);
  detail::put<std::uint32_t>(os, pool ? 2 : 1);
  detail::put_section(os, kEncoderTag, detail::encoder_section(encoder));
  if (pool) detail::put_section(os, kPoolTag, detail::pool_section(*pool));
  if (!os) throw IoError("write failed: " + path);
}

/// Restores a frozen encoder from the ENC section.
inline enc::DualEncoder load_encoder(const std::string& path) {
  const auto payload = detail::find_section(path, kEncoderTag);
  if (!payload) throw IoError(path + ": no encoder section");
  std::istringstream is(*payload, std::ios::binary);
  enc::EncoderConfig c;
  c.depth = detail::get<std::uint64_t>(is);
  c.model_dim = detail::get<std::uint64_t>(is);
  c.heads = detail::get<std::uint64_t>(is);
  c.mlp_dim = detail::get<std::uint64_t>(is);
  c.embed_dim = detail::get<std::uint64_t>(is);
  c.image_tokens = detail::get<std::uint64_t>(is);
  c.patch_dim = detail::get<std::uint64_t>(is);
  c.text_length = detail::get<std::uint64_t>(is);
  c.vocab_size = detail::get<std::uint64_t>(is);
  c.tau = detail::get<double>(is);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IoError(path + ": invalid encoder header (" + e.what() + ")");
  }
  enc::DualEncoder encoder(c, 0);
  auto params = encoder.parameters();
  if (detail::get<std::uint64_t>(is) != params.size()) throw IoError(path + ": encoder parameter count mismatch");
  for (auto& p : params) detail::load_into(is, p);
  encoder.freeze();
  return encoder;
}

/// Restores the prompt pool from the POOL section. Only the newest block stays trainable.
inline prompts::PromptPool load_pool(const std::string& path) {
  const auto payload = detail::find_section(path, kPoolTag);
  if (!payload) throw IoError(path + ": no prompt pool section");
  std::istringstream is(*payload, std::ios::binary);
  const auto depth = detail::get<std::uint64_t>(is), length = detail::get<std::uint64_t>(is);
  const auto dim = detail::get<std::uint64_t>(is), query = detail::get<std::uint64_t>(is);
  prompts::VisualPromptPool visual(depth, length, dim, query);
  const auto n_blocks = detail::get<std::uint64_t>(is);
  std::vector<int> task_ids;
  for (std::uint64_t k = 0; k < n_blocks; ++k) {
    prompts::TaskBlock b;
    b.task_id = static_cast<int>(detail::get<std::int64_t>(is));
    b.count = detail::get<std::uint64_t>(is);
    const bool newest = k + 1 == n_blocks;
    for (std::size_t l = 0; l < depth; ++l) {
      b.components.push_back(detail::get_tensor(is, newest));
      b.head_weight.push_back(detail::get_tensor(is, newest));
      b.head_bias.push_back(detail::get_tensor(is, newest));
    }
    task_ids.push_back(b.task_id);
    visual.blocks().push_back(std::move(b));
  }
  std::vector<int> seen(detail::get<std::uint64_t>(is));
  for (int& c : seen) c = static_cast<int>(detail::get<std::int64_t>(is));
  std::optional<prompts::TextualPromptSet> textual;
  if (detail::get<std::uint8_t>(is)) {
    const auto td = detail::get<std::uint64_t>(is), tl = detail::get<std::uint64_t>(is);
    const auto tdim = detail::get<std::uint64_t>(is);
    textual = prompts::TextualPromptSet(td, tl, tdim);
    const auto n = detail::get<std::uint64_t>(is);
    for (std::uint64_t k = 0; k < n; ++k) {
      const int c = static_cast<int>(detail::get<std::int64_t>(is));
      textual->insert(c, detail::get_tensor(is, true));
    }
  }
  return prompts::PromptPool(std::move(visual), std::move(textual), std::move(task_ids), std::move(seen));
}

}  // namespace tppt::ckpt
