// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "tppt/autodiff/tensor.hpp"

namespace tppt::ad {

/// Half-cosine decay from base_lr at step 0 to 0 at total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0) throw ContractError("cosine_lr: total_steps must be positive");
  if (step > total_steps) throw ContractError("cosine_lr: step exceeds total_steps");
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * (1.0 + std::cos(phase)) / 2.0;
}

struct OptimizerState {
  std::vector<std::vector<double>> velocity;
  double momentum = 0.9;
  double base_lr = 0.1;
  std::size_t step = 0;
  std::size_t total_steps = 1;

  OptimizerState() = default;
  OptimizerState(double momentum_, double base_lr_, std::size_t total_steps_)
      : momentum(momentum_), base_lr(base_lr_), total_steps(total_steps_) {}
};

/// Classical momentum: v <- mu*v + g; p <- p - lr*v, with lr from the cosine
/// schedule at the current step. Non-finite gradients abort before any write.
inline void sgd_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, OptimizerState& state) {
  if (params.size() != grads.size()) throw ContractError("sgd_step: params/grads count mismatch");
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.numel(), 0.0);
  }
  if (state.velocity.size() != params.size()) throw ContractError("sgd_step: optimizer state tracks a different parameter set");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].numel() || state.velocity[k].size() != params[k].numel()) {
      throw ShapeError("sgd_step: gradient/velocity shape does not match parameter " + std::to_string(k));
    }
    for (double g : grads[k])
      if (!std::isfinite(g)) throw NumericalError("sgd_step: non-finite gradient in parameter " + std::to_string(k));
  }
  const double lr = cosine_lr(state.step, state.total_steps, state.base_lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].data_mut();
    auto& v = state.velocity[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = state.momentum * v[i] + g[i];
      p[i] -= lr * v[i];
    }
  }
  ++state.step;
}

/// Steps using each parameter's own accumulated gradient (zero if none), then clears it.
inline void sgd_step(std::span<Tensor> params, OptimizerState& state) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    grads.push_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                 : std::vector<double>(p.numel(), 0.0));
  }
  sgd_step(params, grads, state);
  for (auto& p : params) p.zero_grad();
}

/// Adam with bias correction and the same cosine schedule. Used only to
/// pretrain the backbone; prompt tuning uses sgd_step.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double base_lr = 1e-3;
  std::size_t step = 0;
  std::size_t total_steps = 1;
};

inline void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  for (const auto& p : params)
    for (double g : p.grad())
      if (!std::isfinite(g)) throw NumericalError("adam_step: non-finite gradient");
  const double lr = cosine_lr(state.step, state.total_steps, state.base_lr);
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(state.beta1, t), c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) continue;
    auto p = params[k].data_mut();
    const auto g = params[k].grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
    params[k].zero_grad();
  }
  ++state.step;
}

}  // namespace tppt::ad
