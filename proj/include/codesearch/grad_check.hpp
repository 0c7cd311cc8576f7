// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "codesearch/autograd.hpp"

namespace codesearch {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of a scalar function against central
// differences. `fn` must rebuild its graph from the current values of
// `inputs` on every call; the inputs are perturbed in place and restored.
// The error per coordinate is |analytic - numeric| / max(1, |analytic|).
inline GradCheckResult grad_check(const std::function<Var()>& fn, std::vector<Var> inputs, double h = 1e-6) {
  require(h >= 1e-7 && h <= 1e-4, ErrorKind::kConfig, "grad_check step must lie in [1e-7, 1e-4]");
  for (Var& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  const Var root = fn();
  require(std::isfinite(root.item()), ErrorKind::kNumeric, "grad_check: non-finite function value");
  backward(root);

  GradCheckResult result;
  for (Var& in : inputs) {
    const Tensor analytic = in.grad();
    Tensor& x = in.mutable_value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + h;
      const double up = fn().item();
      x[i] = saved - h;
      const double down = fn().item();
      x[i] = saved;
      require(std::isfinite(up) && std::isfinite(down), ErrorKind::kNumeric,
              "grad_check: non-finite value under perturbation");
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace codesearch
