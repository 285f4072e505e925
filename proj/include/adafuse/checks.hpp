// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adafuse/adapters.hpp"
#include "adafuse/autodiff/grad_check.hpp"

namespace adafuse {

struct GroupGradCheck {
  std::string group;  // "theta", "adapter:<task>", "fusion", "head"
  ad::GradCheckReport report;
};

/// Central-difference check of a complete fused classifier: a d=8, L=2,
/// 2-head backbone, three member adapters with the given wiring, fusion and a
/// head, every tensor trainable and perturbed away from its initialization.
/// The loss is cross-entropy plus the fusion regularizer.
std::vector<GroupGradCheck> check_fused_model_gradients(const AdapterConfig& wiring, std::uint64_t seed,
                                                        double h = 1e-5, double tol = 1e-4);

}  // namespace adafuse
