// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "upoc2/rng.hpp"

namespace upoc2 {

std::string GradCheckReport::describe() const {
  std::ostringstream os;
  os << (passed ? "pass" : "FAIL") << ": max rel error " << max_error << " over " << coords_checked
     << " coords; worst input " << worst_input << " index " << worst_index << " (analytic " << worst_analytic
     << ", numeric " << worst_numeric << ")";
  return os.str();
}

GradCheckReport check_gradients(const std::function<Tensor()>& build, const std::vector<Tensor>& inputs,
                                double tolerance, const GradCheckOptions& options) {
  for (auto t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape::current().clear();
  {
    Tensor loss = build();
    backward(loss);
  }
  std::vector<std::vector<Real>> analytic;
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  GradCheckReport report;
  Rng rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor x = inputs[i];
    std::vector<std::size_t> coords(x.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.max_coords_per_input) {
      for (std::size_t k = 0; k < options.max_coords_per_input; ++k) {
        const auto j = k + rng.uniform_int(coords.size() - k);
        std::swap(coords[k], coords[j]);
      }
      coords.resize(options.max_coords_per_input);
    }
    for (auto c : coords) {
      const Real saved = x.at(c);
      x.at(c) = saved + options.step;
      const Real up = build().item();
      x.at(c) = saved - options.step;
      const Real down = build().item();
      x.at(c) = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[i][c];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      const double scored = std::isnan(err) ? INFINITY : err;
      if (report.coords_checked++ == 0 || scored > report.max_error) {
        report.max_error = scored;
        report.worst_input = i;
        report.worst_index = c;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_error <= tolerance;
  for (auto t : inputs) t.zero_grad();
  return report;
}

}  // namespace upoc2
