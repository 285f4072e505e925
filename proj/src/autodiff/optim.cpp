// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/autodiff/optim.hpp"

#include <cmath>

#include "adafuse/error.hpp"

namespace adafuse::ad {

void AdamW::step(const ParamSet& params, double lr_now) {
  for (const auto& t : params) {
    if (t.trainable() && !t.has_grad()) {
      throw UsageError("adamw: trainable parameter '" + t.name() + "' has no gradient");
    }
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  for (auto t : params) {
    if (!t.trainable()) continue;
    auto [it, inserted] = moments_.try_emplace(t.impl().get());
    Moments& mo = it->second;
    if (inserted) {
      mo.m.assign(t.numel(), 0.0);
      mo.v.assign(t.numel(), 0.0);
      owners_.push_back(t);
    }
    // Bias correction counts this tensor's own updates, so a tensor that
    // sits out some steps (another task's head) is corrected correctly.
    ++mo.t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(mo.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(mo.t));
    auto w = t.mutable_data();
    const auto g = t.grad();
    const double decay = 1.0 - lr_now * config_.weight_decay;
    for (std::size_t i = 0; i < w.size(); ++i) {
      mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * g[i];
      mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = mo.m[i] / c1;
      const double v_hat = mo.v[i] / c2;
      if (config_.weight_decay != 0.0) w[i] *= decay;
      w[i] -= lr_now * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

const std::vector<double>* AdamW::first_moment(const Tensor& t) const {
  auto it = moments_.find(t.impl().get());
  return it == moments_.end() ? nullptr : &it->second.m;
}

const std::vector<double>* AdamW::second_moment(const Tensor& t) const {
  auto it = moments_.find(t.impl().get());
  return it == moments_.end() ? nullptr : &it->second.v;
}

double linear_decay_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr) {
  if (total_steps == 0) throw ConfigError("linear decay schedule needs total_steps > 0");
  if (step > total_steps) throw UsageError("schedule step beyond total_steps");
  return base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

}  // namespace adafuse::ad
