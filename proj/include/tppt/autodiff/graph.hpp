// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tppt/autodiff/ops.hpp"

namespace tppt::ad {

using Bindings = std::map<std::string, Tensor>;

/// A re-buildable computation: given bound inputs, produce named outputs, one of
/// which is the scalar loss. Inputs flagged requires_grad are the parameters.
struct Graph {
  std::vector<std::string> inputs;
  std::function<Bindings(const Bindings&)> forward;
  std::string loss = "loss";
};

struct Evaluation {
  std::map<std::string, std::vector<double>> outputs;
  std::map<std::string, std::vector<double>> grads;
  double loss = 0.0;
};

namespace detail {

inline void check_bound(const Graph& graph, const Bindings& inputs) {
  if (!graph.forward) throw ContractError("graph has no forward function");
  for (const auto& name : graph.inputs) {
    auto it = inputs.find(name);
    if (it == inputs.end() || !it->second.defined()) throw ContractError("graph input '" + name + "' is not bound");
  }
}

inline Tensor loss_of(const Graph& graph, const Bindings& outputs) {
  auto it = outputs.find(graph.loss);
  if (it == outputs.end()) throw ContractError("graph did not produce loss output '" + graph.loss + "'");
  if (it->second.numel() != 1) {
    throw ContractError("loss '" + graph.loss + "' is not scalar: shape " + to_string(it->second.shape()));
  }
  return it->second;
}

// Fresh leaves so that repeated evaluations never share gradient accumulators.
inline Bindings clone_inputs(const Bindings& inputs) {
  Bindings out;
  for (const auto& [name, t] : inputs) out.emplace(name, Tensor::make(t.shape(), t.to_vector(), t.requires_grad()));
  return out;
}

}  // namespace detail

inline Evaluation evaluate_with_gradients(const Graph& graph, const Bindings& inputs) {
  detail::check_bound(graph, inputs);
  const Bindings leaves = detail::clone_inputs(inputs);
  const Bindings outputs = graph.forward(leaves);
  const Tensor loss = detail::loss_of(graph, outputs);
  loss.backward();
  Evaluation ev;
  ev.loss = loss.item();
  for (const auto& [name, t] : outputs) ev.outputs.emplace(name, t.to_vector());
  for (const auto& [name, t] : leaves) {
    if (!t.requires_grad()) continue;
    ev.grads.emplace(name, t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                        : std::vector<double>(t.numel(), 0.0));
  }
  return ev;
}

struct GradCheckEntry {
  std::string parameter;
  double max_relative_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
  }
  double max_relative_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_relative_error);
    return m;
  }
};

/// |a - f| / max(|a|, |f|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares reverse-mode gradients to central differences for every parameter input.
inline GradCheckReport grad_check(const Graph& graph, const Bindings& inputs, double step, double tolerance) {
  if (!(step > 0.0) || !(tolerance > 0.0)) throw ContractError("grad_check: step and tolerance must be positive");
  for (const auto& [name, t] : inputs)
    for (double v : t.data())
      if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite value in input '" + name + "'");

  const auto finite_loss = [&](const Bindings& bound) {
    const double v = detail::loss_of(graph, graph.forward(bound)).item();
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite forward value " + std::to_string(v));
    return v;
  };

  const Evaluation ev = evaluate_with_gradients(graph, inputs);
  if (!std::isfinite(ev.loss)) throw NumericalError("grad_check: non-finite forward value " + std::to_string(ev.loss));
  for (const auto& [name, g] : ev.grads)
    for (double v : g)
      if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite gradient for '" + name + "'");

  GradCheckReport report;
  report.tolerance = tolerance;
  Bindings probe = detail::clone_inputs(inputs);
  for (auto& [name, analytic] : ev.grads) {
    GradCheckEntry entry{name, 0.0, true};
    auto values = probe.at(name).data_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + step;
      const double up = finite_loss(probe);
      values[i] = orig - step;
      const double down = finite_loss(probe);
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      entry.max_relative_error = std::max(entry.max_relative_error, relative_error(analytic[i], numeric));
    }
    entry.passed = entry.max_relative_error <= tolerance;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace tppt::ad
