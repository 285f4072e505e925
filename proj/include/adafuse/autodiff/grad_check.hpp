// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "adafuse/autodiff/param_set.hpp"

namespace adafuse::ad {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Denominator floor: |a - n| / max(|a|, |n|, abs_floor). Keeps coordinates
  // whose true gradient is ~0 from reporting huge ratios of rounding noise.
  double abs_floor = 1e-6;
  // 0 checks every coordinate; otherwise an evenly strided subset.
  std::size_t max_coords_per_param = 0;
};

struct ParamGradCheck {
  std::string name;
  std::size_t coords_checked = 0;
  std::size_t worst_index = 0;
  double max_rel_error = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamGradCheck> params;
  double max_rel_error = 0.0;
  bool passed = true;

  const ParamGradCheck& find(const std::string& name) const;
  std::string summary() const;
};

/// Compares analytic gradients of a scalar program against central
/// differences (f(x+h) - f(x-h)) / 2h for every coordinate of `params`.
/// The program is called repeatedly and must rebuild its graph each time;
/// a program that returns different values for identical inputs raises
/// CheckError. Parameter values are restored bit-exactly afterwards.
GradCheckReport grad_check(const std::function<Tensor()>& program, const ParamSet& params,
                           const GradCheckOptions& options = {});

}  // namespace adafuse::ad
