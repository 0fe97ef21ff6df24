// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "upoc2/tensor.hpp"

namespace upoc2 {

struct GradCheckOptions {
  double step = 1e-5;
  // Inputs larger than this are checked on a random subsample of this size.
  std::size_t max_coords_per_input = 64;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  bool passed = true;
  double max_error = 0;
  std::size_t coords_checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;

  std::string describe() const;
};

// Compares the reverse-mode gradient of `build()` w.r.t. each tensor in
// `inputs` against central differences, using |a - n| / max(1, |n|).
// `build` must read the inputs' current values on every call.
GradCheckReport check_gradients(const std::function<Tensor()>& build, const std::vector<Tensor>& inputs,
                                double tolerance, const GradCheckOptions& options = {});

}  // namespace upoc2
