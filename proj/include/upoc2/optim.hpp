// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "upoc2/tensor.hpp"

namespace upoc2 {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Distinct trainable arrays, each listed once even when shared under several names.
using ParameterSet = std::vector<NamedTensor>;

struct AdamState {
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Keep values representable in 32-bit floats after every update.
  bool round_to_f32 = false;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
};

// One bias-corrected Adam update over `params`, which must all carry a
// gradient. Gradients are cleared afterwards.
void adam_step(const ParameterSet& params, AdamState& state, double lr);

// Gives every parameter without a gradient an all-zero one.
void fill_missing_grads(const ParameterSet& params);

// Scales gradients so their global L2 norm is at most max_norm. Returns the
// norm before scaling.
double clip_grad_norm(const ParameterSet& params, double max_norm);

void zero_grads(const ParameterSet& params);

}  // namespace upoc2
