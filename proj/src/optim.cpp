// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/optim.hpp"

#include <cmath>

#include "upoc2/errors.hpp"

namespace upoc2 {

void adam_step(const ParameterSet& params, AdamState& state, double lr) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw ContractError("adam_step: parameter '" + p.name + "' has no gradient");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) + " arrays, got " +
                        std::to_string(params.size()));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor w = params[i].tensor;
    auto data = w.data();
    auto grad = w.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size()) {
      throw ContractError("adam_step: moment shape mismatch for '" + params[i].name + "'");
    }
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
      if (state.round_to_f32) {
        data[j] = static_cast<float>(data[j]);
        m[j] = static_cast<float>(m[j]);
        v[j] = static_cast<float>(v[j]);
      }
    }
    w.zero_grad();
  }
}

void fill_missing_grads(const ParameterSet& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    if (!t.has_grad()) t.mutable_grad();
  }
}

double clip_grad_norm(const ParameterSet& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (Real g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      Tensor t = p.tensor;
      if (!t.has_grad()) continue;
      for (Real& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

void zero_grads(const ParameterSet& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace upoc2
