// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tppt/autodiff/ops.hpp"
#include "tppt/errors.hpp"

namespace tppt::obj {

using ad::Tensor;

/// Unit-norm textual prototypes for the classes seen so far, one row per class.
struct PrototypeSet {
  std::vector<int> class_ids;
  Tensor embeddings;      // [C, D]
  bool prompted = false;  // rows come from the prompted text encoder

  std::size_t size() const { return class_ids.size(); }

  std::size_t index_of(int class_id) const {
    const auto it = std::find(class_ids.begin(), class_ids.end(), class_id);
    if (it == class_ids.end()) throw ContractError("class " + std::to_string(class_id) + " is not in the prototype set");
    return static_cast<std::size_t>(it - class_ids.begin());
  }

  std::vector<std::size_t> rows_for(std::span<const int> labels) const {
    std::vector<std::size_t> rows;
    rows.reserve(labels.size());
    for (int y : labels) rows.push_back(index_of(y));
    return rows;
  }
};

namespace detail {

inline void check_embeddings(const Tensor& z, const Tensor& w) {
  if (w.rank() != 2 || w.dim(0) == 0) throw ContractError("prototype set is empty");
  if (z.rank() != 2 || z.dim(1) != w.dim(1)) {
    throw ShapeError("embeddings " + ad::to_string(z.shape()) + " incompatible with prototypes " + ad::to_string(w.shape()));
  }
}

inline void check_labels(std::span<const std::size_t> labels, std::size_t n, std::size_t classes) {
  if (labels.size() != n) throw ShapeError("label count does not match batch size");
  for (auto y : labels)
    if (y >= classes) throw ContractError("label " + std::to_string(y) + " outside the prototype set");
}

// Entries (i, cols[i]) of a [R, K] tensor as an [R] vector.
inline Tensor pick(const Tensor& m, std::span<const std::size_t> cols, bool transposed = false) {
  const std::size_t r = transposed ? m.dim(1) : m.dim(0);
  const std::size_t k = transposed ? m.dim(0) : m.dim(1);
  std::vector<std::size_t> flat(r);
  for (std::size_t i = 0; i < r; ++i) flat[i] = transposed ? cols[i] * r + i : i * k + cols[i];
  return ad::index_select(ad::reshape(m, {m.numel()}), flat);
}

}  // namespace detail

/// Cosine logits Z W^T / tau for unit rows.
inline Tensor similarity_logits(const Tensor& z, const Tensor& w, double tau) {
  detail::check_embeddings(z, w);
  return ad::scale(ad::matmul(z, ad::transpose(w)), 1.0 / tau);
}

/// Softmax over prototypes of cos(z_i, w_c)/tau: [N, C].
inline Tensor class_probabilities(const Tensor& z, const Tensor& w, double tau) {
  return ad::softmax(similarity_logits(z, w, tau), -1);
}

/// Mean over the batch of -log p(y_i | x_i); labels are prototype row indices.
inline Tensor ce_loss(const Tensor& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2) throw ShapeError("ce_loss expects [N,C] probabilities");
  detail::check_labels(labels, probs.dim(0), probs.dim(1));
  if (labels.empty()) throw ContractError("ce_loss on an empty batch");
  return ad::neg(ad::mean(ad::log(detail::pick(probs, labels))));
}

/// Per-prototype softmax over batch samples; each sample contributes the
/// -log share of its own class prototype's mass. Normalized by C (seen classes).
inline Tensor tpcl_loss(const Tensor& z, const Tensor& w, std::span<const std::size_t> labels, double tau) {
  detail::check_embeddings(z, w);
  detail::check_labels(labels, z.dim(0), w.dim(0));
  if (labels.empty()) throw ContractError("tpcl_loss on an empty batch");
  const Tensor per_proto = ad::log_softmax(ad::scale(ad::matmul(w, ad::transpose(z)), 1.0 / tau), -1);  // [C, N]
  const Tensor matched = detail::pick(per_proto, labels, /*transposed=*/true);
  return ad::scale(ad::sum(matched), -1.0 / static_cast<double>(w.dim(0)));
}

/// log sum over ordered pairs m != n of exp(-||w_m - w_n||^2).
inline Tensor div_loss(const Tensor& w) {
  if (w.rank() != 2) throw ShapeError("div_loss expects [C,D] prototypes");
  const std::size_t c = w.dim(0);
  if (c < 2) throw ContractError("div_loss needs at least two prototypes");
  std::vector<std::size_t> left, right;
  for (std::size_t m = 0; m < c; ++m)
    for (std::size_t n = 0; n < c; ++n)
      if (m != n) {
        left.push_back(m);
        right.push_back(n);
      }
  const Tensor diff = ad::sub(ad::index_select(w, left), ad::index_select(w, right));
  const Tensor sq = ad::sum(ad::square(diff), -1);
  return ad::log(ad::sum(ad::exp(ad::neg(sq))));
}

enum class Mode { tppt_v, tppt_vt, ce_only };

struct LossBreakdown {
  Tensor total, ce, tpcl, div;
  double alpha = 0.0;

  static double value(const Tensor& t) { return t.defined() ? t.item() : 0.0; }
  double total_value() const { return value(total); }
  double ce_value() const { return value(ce); }
  double tpcl_value() const { return value(tpcl); }
  double div_value() const { return value(div); }
};

/// CE + TPCL (tppt_v), plus alpha * DIV over the prompted prototypes (tppt_vt),
/// or CE alone (ce_only ablation). DIV is skipped while fewer than two classes are seen.
inline LossBreakdown composite_loss(Mode mode, const Tensor& z, std::span<const std::size_t> labels,
                                    const PrototypeSet& protos, double alpha, double tau) {
  if (!(alpha >= 0.0)) throw ContractError("loss weight alpha must be non-negative");
  if (mode == Mode::tppt_vt && !protos.prompted) {
    throw ContractError("TPPT-VT objective requires prototypes from the prompted text encoder");
  }
  LossBreakdown out;
  out.alpha = alpha;
  out.ce = ce_loss(class_probabilities(z, protos.embeddings, tau), labels);
  out.total = out.ce;
  if (mode != Mode::ce_only) {
    out.tpcl = tpcl_loss(z, protos.embeddings, labels, tau);
    out.total = ad::add(out.total, out.tpcl);
  }
  if (mode == Mode::tppt_vt && protos.size() >= 2) {
    out.div = div_loss(protos.embeddings);
    out.total = ad::add(out.total, ad::scale(out.div, alpha));
  }
  return out;
}

/// Symmetric InfoNCE over matched rows of Z and W (pair i is the positive).
inline Tensor symmetric_info_nce(const Tensor& z, const Tensor& w, double tau) {
  if (z.shape() != w.shape()) throw ShapeError("info_nce expects paired batches of equal shape");
  const Tensor logits = similarity_logits(z, w, tau);
  std::vector<std::size_t> diag(z.dim(0));
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
  const Tensor rows = ad::mean(detail::pick(ad::log_softmax(logits, -1), diag));
  const Tensor cols = ad::mean(detail::pick(ad::log_softmax(logits, 0), diag));
  return ad::scale(ad::add(rows, cols), -0.5);
}

}  // namespace tppt::obj
