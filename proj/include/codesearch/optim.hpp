// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "codesearch/autograd.hpp"

namespace codesearch {

// lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2. Steps beyond the
// horizon clamp to lr_min.
inline double cosine_annealing(std::size_t t, std::size_t horizon, double lr_max, double lr_min = 0.0) {
  require(horizon >= 1, ErrorKind::kConfig, "scheduler horizon must be at least 1");
  if (t > horizon) {
    diagnostic("cosine_annealing: step " + std::to_string(t) + " past horizon " + std::to_string(horizon) +
               ", clamped to lr_min");
    return lr_min;
  }
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(horizon);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam without weight decay. State is created lazily and only for trainable
// parameters; frozen ones are skipped entirely.
class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, AdamConfig config = {}) : config_(config) {
    for (Parameter* p : params)
      if (p->trainable()) params_.push_back(p);
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (Parameter* p : params_) {
      if (!p->trainable()) continue;
      State& s = state_[p->id];
      if (s.m.size() != p->size()) {
        s.m = Tensor(p->value().shape());
        s.v = Tensor(p->value().shape());
      }
      const Tensor& g = p->var.grad();
      Tensor& x = p->mutable_value();
      for (std::size_t i = 0; i < x.size(); ++i) {
        s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g[i];
        s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        x[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + config_.eps);
      }
    }
  }

  void zero_grad() {
    for (Parameter* p : params_) p->var.zero_grad();
  }

  std::size_t steps() const { return t_; }
  bool has_state(const std::string& id) const { return state_.count(id) != 0; }
  const std::vector<Parameter*>& parameters() const { return params_; }

 private:
  struct State {
    Tensor m, v;
  };
  AdamConfig config_;
  std::vector<Parameter*> params_;
  std::unordered_map<std::string, State> state_;
  std::size_t t_ = 0;
};

}  // namespace codesearch
