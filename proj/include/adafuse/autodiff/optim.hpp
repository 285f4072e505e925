// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "adafuse/autodiff/param_set.hpp"

namespace adafuse::ad {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with bias correction and decoupled weight decay:
///   w <- w - lr * wd * w
///   w <- w - lr * m_hat / (sqrt(v_hat) + eps)
/// Moments are keyed by tensor storage, so a state can follow a parameter set
/// across calls.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  std::uint64_t step_count() const { return steps_; }

  /// One update of every trainable tensor in `params` at learning rate
  /// `lr_now`. Frozen tensors are skipped without being read or written.
  /// A trainable tensor without a gradient is a UsageError.
  void step(const ParamSet& params, double lr_now);
  void step(const ParamSet& params) { step(params, config_.lr); }

  /// First and second moments of a parameter, or nullptr if never stepped.
  const std::vector<double>* first_moment(const Tensor& t) const;
  const std::vector<double>* second_moment(const Tensor& t) const;

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
  };
  AdamWConfig config_;
  std::uint64_t steps_ = 0;
  std::map<const detail::TensorImpl*, Moments> moments_;
  // Keeps keyed tensors alive so addresses cannot be reused.
  std::vector<Tensor> owners_;
};

/// base_lr * (1 - step / total_steps). total_steps == 0 is a ConfigError;
/// step outside [0, total_steps] is a UsageError.
double linear_decay_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr);

}  // namespace adafuse::ad
