// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tppt/autodiff/ops.hpp"
#include "tppt/errors.hpp"
#include "tppt/rng.hpp"

namespace tppt::enc {

using ad::Shape;
using ad::Tensor;

struct EncoderConfig {
  std::size_t depth = 4;
  std::size_t model_dim = 32;
  std::size_t heads = 4;
  std::size_t mlp_dim = 64;
  std::size_t embed_dim = 32;  // output embedding width
  std::size_t image_tokens = 6;
  std::size_t patch_dim = 2;
  std::size_t text_length = 4;
  std::size_t vocab_size = 23;
  double tau = 0.07;

  std::size_t head_dim() const { return model_dim / heads; }

  void validate() const {
    if (depth < 1) throw ConfigError("encoder.depth", "must be at least 1");
    if (heads == 0 || model_dim % heads != 0) throw ConfigError("encoder.heads", "must divide model_dim");
    if (mlp_dim == 0 || embed_dim == 0) throw ConfigError("encoder.mlp_dim", "widths must be positive");
    if (image_tokens == 0 || patch_dim == 0) throw ConfigError("encoder.image_tokens", "image token grid must be non-empty");
    if (text_length == 0 || vocab_size == 0) throw ConfigError("encoder.text_length", "text shape must be non-empty");
    if (!(tau > 0.0)) throw ConfigError("encoder.tau", "must be positive");
  }

  bool operator==(const EncoderConfig&) const = default;
};

// Keys carry no bias: it would shift every attention logit of a query equally
// and so never reach the output.
struct Block {
  Tensor ln1_g, ln1_b, w_qkv, b_qv, w_out, b_out;
  Tensor ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;

  std::vector<Tensor> parameters() const {
    return {ln1_g, ln1_b, w_qkv, b_qv, w_out, b_out, ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2};
  }
  std::vector<Tensor*> slots() {
    return {&ln1_g, &ln1_b, &w_qkv, &b_qv, &w_out, &b_out, &ln2_g, &ln2_b, &w_fc1, &b_fc1, &w_fc2, &b_fc2};
  }
};

namespace detail {

inline Tensor ones(std::size_t n) { return Tensor::parameter({n}, std::vector<double>(n, 1.0)); }
inline Tensor zeros(std::size_t n) { return Tensor::parameter({n}, std::vector<double>(n, 0.0)); }
inline Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  const auto n = ad::numel(shape);
  return Tensor::parameter(std::move(shape), rng.normal_vector(n, stddev));
}
inline Tensor linear_weight(Rng& rng, std::size_t in, std::size_t out) {
  return gaussian(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
}

}  // namespace detail

/// Pre-LN transformer trunk with first-token read-out and deep prompt slots.
class Transformer {
 public:
  Transformer() = default;
  Transformer(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    const std::size_t d = cfg.model_dim;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      Block b;
      b.ln1_g = detail::ones(d);
      b.ln1_b = detail::zeros(d);
      b.w_qkv = detail::linear_weight(rng, d, 3 * d);
      b.b_qv = detail::zeros(2 * d);
      b.w_out = detail::linear_weight(rng, d, d);
      b.b_out = detail::zeros(d);
      b.ln2_g = detail::ones(d);
      b.ln2_b = detail::zeros(d);
      b.w_fc1 = detail::linear_weight(rng, d, cfg.mlp_dim);
      b.b_fc1 = detail::zeros(cfg.mlp_dim);
      b.w_fc2 = detail::linear_weight(rng, cfg.mlp_dim, d);
      b.b_fc2 = detail::zeros(d);
      blocks_.push_back(std::move(b));
    }
    ln_post_g_ = detail::ones(d);
    ln_post_b_ = detail::zeros(d);
    proj_ = detail::linear_weight(rng, d, cfg.embed_dim);
  }

  /// tokens: [N, S, D] with the read-out token at position 0. `prompts[l]` is
  /// [N, L, D] (or [L, D], shared) and replaces positions 1..L before block l.
  /// Returns L2-normalized read-out embeddings [N, E].
  Tensor forward(const Tensor& tokens, std::span<const Tensor> prompts) const {
    if (prompts.size() > blocks_.size()) {
      throw ContractError("prompt depth " + std::to_string(prompts.size()) + " exceeds encoder depth " +
                          std::to_string(blocks_.size()));
    }
    const std::size_t n = tokens.dim(0), d = cfg_.model_dim;
    if (tokens.rank() != 3 || tokens.dim(2) != d) throw ShapeError("transformer input must be [N,S,D], got " + ad::to_string(tokens.shape()));
    std::size_t plen = 0;
    if (!prompts.empty()) plen = prompts[0].dim(-2);
    Tensor x = tokens;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      if (l < prompts.size()) {
        const Tensor p = batched_prompt(prompts[l], n, plen);
        const std::size_t s = x.dim(1);
        const std::size_t skip = l == 0 ? 1 : 1 + plen;  // layer 0 inserts, later layers replace
        x = ad::concat({ad::slice(x, 1, 0, 1), p, ad::slice(x, 1, skip, s - skip)}, 1);
      }
      x = block_forward(blocks_[l], x);
    }
    Tensor readout = ad::reshape(ad::slice(x, 1, 0, 1), {n, d});
    readout = ad::layer_norm(readout, ln_post_g_, ln_post_b_);
    return ad::l2_normalize(ad::matmul(readout, proj_));
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& b : blocks_)
      for (auto& t : b.parameters()) out.push_back(t);
    out.push_back(ln_post_g_);
    out.push_back(ln_post_b_);
    out.push_back(proj_);
    return out;
  }
  std::vector<Tensor*> slots() {
    std::vector<Tensor*> out;
    for (auto& b : blocks_)
      for (auto* t : b.slots()) out.push_back(t);
    out.insert(out.end(), {&ln_post_g_, &ln_post_b_, &proj_});
    return out;
  }

 private:
  Tensor batched_prompt(const Tensor& p, std::size_t n, std::size_t plen) const {
    const std::size_t d = cfg_.model_dim;
    if (p.rank() == 2 && p.dim(0) == plen && p.dim(1) == d) {
      return ad::reshape(ad::index_select(ad::reshape(p, {1, plen * d}), std::vector<std::size_t>(n, 0)), {n, plen, d});
    }
    if (p.rank() == 3 && p.dim(0) == n && p.dim(1) == plen && p.dim(2) == d) return p;
    throw ShapeError("prompt shape " + ad::to_string(p.shape()) + " incompatible with [" + std::to_string(n) + "," +
                     std::to_string(plen) + "," + std::to_string(d) + "]");
  }

  Tensor block_forward(const Block& b, const Tensor& x) const {
    const std::size_t n = x.dim(0), s = x.dim(1), d = cfg_.model_dim, h = cfg_.heads, hd = cfg_.head_dim();
    Tensor a = ad::layer_norm(x, b.ln1_g, b.ln1_b);
    const Tensor bias = ad::concat({ad::slice(b.b_qv, 0, 0, d), Tensor::zeros({d}), ad::slice(b.b_qv, 0, d, d)}, 0);
    Tensor qkv = ad::add(ad::matmul(a, b.w_qkv), bias);                        // [N,S,3D]
    qkv = ad::permute(ad::reshape(qkv, {n, s, 3, h, hd}), {2, 0, 3, 1, 4});  // [3,N,H,S,hd]
    const auto part = [&](std::size_t i) { return ad::reshape(ad::slice(qkv, 0, i, 1), {n, h, s, hd}); };
    Tensor q = part(0), k = part(1), v = part(2);
    Tensor att = ad::softmax(ad::scale(ad::bmm(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(hd))));
    Tensor ctx = ad::reshape(ad::permute(ad::bmm(att, v), {0, 2, 1, 3}), {n, s, d});
    Tensor y = ad::add(x, ad::add(ad::matmul(ctx, b.w_out), b.b_out));
    Tensor m = ad::layer_norm(y, b.ln2_g, b.ln2_b);
    m = ad::gelu(ad::add(ad::matmul(m, b.w_fc1), b.b_fc1));
    return ad::add(y, ad::add(ad::matmul(m, b.w_fc2), b.b_fc2));
  }

  EncoderConfig cfg_;
  std::vector<Block> blocks_;
  Tensor ln_post_g_, ln_post_b_, proj_;
};

/// Continuous token "images": linear patch embedding, a class token and positions.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    patch_w_ = detail::linear_weight(rng, cfg.patch_dim, cfg.model_dim);
    patch_b_ = detail::zeros(cfg.model_dim);
    cls_ = detail::gaussian(rng, {1, cfg.model_dim}, 1.0 / std::sqrt(static_cast<double>(cfg.model_dim)));
    pos_ = detail::gaussian(rng, {1 + cfg.image_tokens, cfg.model_dim}, 0.02);
    trunk_ = Transformer(cfg, rng);
  }

  /// images: [N, T, P]
  Tensor encode(const Tensor& images, std::span<const Tensor> prompts) const {
    if (images.rank() != 3 || images.dim(1) != cfg_.image_tokens || images.dim(2) != cfg_.patch_dim) {
      throw ShapeError("image batch must be [N," + std::to_string(cfg_.image_tokens) + "," +
                       std::to_string(cfg_.patch_dim) + "], got " + ad::to_string(images.shape()));
    }
    const std::size_t n = images.dim(0);
    Tensor patches = ad::add(ad::matmul(images, patch_w_), patch_b_);
    Tensor cls = ad::reshape(ad::index_select(cls_, std::vector<std::size_t>(n, 0)), {n, 1, cfg_.model_dim});
    Tensor x = ad::add(ad::concat({cls, patches}, 1), pos_);
    return trunk_.forward(x, prompts);
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out{patch_w_, patch_b_, cls_, pos_};
    for (auto& t : trunk_.parameters()) out.push_back(t);
    return out;
  }
  std::vector<Tensor*> slots() {
    std::vector<Tensor*> out{&patch_w_, &patch_b_, &cls_, &pos_};
    for (auto* t : trunk_.slots()) out.push_back(t);
    return out;
  }

 private:
  EncoderConfig cfg_;
  Tensor patch_w_, patch_b_, cls_, pos_;
  Transformer trunk_;
};

/// Token-id sequences; the first token of each sequence is the read-out.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    embed_ = detail::gaussian(rng, {cfg.vocab_size, cfg.model_dim}, 1.0 / std::sqrt(static_cast<double>(cfg.model_dim)));
    pos_ = detail::gaussian(rng, {cfg.text_length, cfg.model_dim}, 0.02);
    trunk_ = Transformer(cfg, rng);
  }

  Tensor encode(const std::vector<std::vector<std::size_t>>& texts, std::span<const Tensor> prompts) const {
    std::vector<std::size_t> ids;
    for (const auto& t : texts) {
      if (t.size() != cfg_.text_length) {
        throw ShapeError("text length " + std::to_string(t.size()) + " != " + std::to_string(cfg_.text_length));
      }
      for (auto id : t) {
        if (id >= cfg_.vocab_size) throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
        ids.push_back(id);
      }
    }
    Tensor x = ad::reshape(ad::index_select(embed_, ids), {texts.size(), cfg_.text_length, cfg_.model_dim});
    return trunk_.forward(ad::add(x, pos_), prompts);
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out{embed_, pos_};
    for (auto& t : trunk_.parameters()) out.push_back(t);
    return out;
  }
  std::vector<Tensor*> slots() {
    std::vector<Tensor*> out{&embed_, &pos_};
    for (auto* t : trunk_.slots()) out.push_back(t);
    return out;
  }

 private:
  EncoderConfig cfg_;
  Tensor embed_, pos_;
  Transformer trunk_;
};

/// Image encoder, text encoder and the shared logit temperature.
class DualEncoder {
 public:
  DualEncoder() = default;
  DualEncoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    Rng image_rng = rng.fork(11), text_rng = rng.fork(12);
    image_ = ImageEncoder(cfg, image_rng);
    text_ = TextEncoder(cfg, text_rng);
  }

  const EncoderConfig& config() const { return cfg_; }
  double tau() const { return cfg_.tau; }
  bool frozen() const { return frozen_; }

  void freeze() {
    for (auto& p : parameters()) {
      p.set_requires_grad(false);
      p.zero_grad();
    }
    frozen_ = true;
  }

  Tensor encode_images(const Tensor& images, std::span<const Tensor> prompts = {}) const {
    return image_.encode(images, prompts);
  }
  Tensor encode_texts(const std::vector<std::vector<std::size_t>>& texts, std::span<const Tensor> prompts = {}) const {
    return text_.encode(texts, prompts);
  }

  /// Single image [T*P] values; `layer_prompts[l]` is [L_v, D] for layers 0..d_v-1.
  std::vector<double> encode_image(std::span<const double> image, std::span<const Tensor> layer_prompts = {}) const {
    const Tensor x = Tensor::constant({1, cfg_.image_tokens, cfg_.patch_dim}, {image.begin(), image.end()});
    return image_.encode(x, layer_prompts).to_vector();
  }

  /// Single token sequence; `class_prompt` is [d_t, L_t, D].
  std::vector<double> encode_text(const std::vector<std::size_t>& tokens,
                                  const std::optional<Tensor>& class_prompt = std::nullopt) const {
    std::vector<Tensor> layers;
    if (class_prompt) layers = split_layers(*class_prompt);
    return text_.encode({tokens}, layers).to_vector();
  }

  /// [d, L, D] -> d tensors of [L, D].
  static std::vector<Tensor> split_layers(const Tensor& stacked) {
    if (stacked.rank() != 3) throw ShapeError("layered prompt must be [d,L,D], got " + ad::to_string(stacked.shape()));
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < stacked.dim(0); ++l)
      out.push_back(ad::reshape(ad::slice(stacked, 0, l, 1), {stacked.dim(1), stacked.dim(2)}));
    return out;
  }

  /// Image parameters first, then text, in a fixed order (serialization relies on it).
  std::vector<Tensor> parameters() const {
    auto out = image_.parameters();
    for (auto& t : text_.parameters()) out.push_back(t);
    return out;
  }

  /// Handles to the parameter tensors in parameters() order, for rebinding
  /// weights (gradient checks). Replacing a handle does not affect copies.
  std::vector<Tensor*> parameter_slots() {
    auto out = image_.slots();
    for (auto* t : text_.slots()) out.push_back(t);
    return out;
  }

 private:
  EncoderConfig cfg_;
  ImageEncoder image_;
  TextEncoder text_;
  bool frozen_ = false;
};

}  // namespace tppt::enc
