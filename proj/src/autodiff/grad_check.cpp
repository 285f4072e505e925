// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/autodiff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "adafuse/error.hpp"

namespace adafuse::ad {

const ParamGradCheck& GradCheckReport::find(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return p;
  }
  throw UsageError("grad check report has no entry for '" + name + "'");
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  for (const auto& p : params) {
    os << (p.passed ? "ok   " : "FAIL ") << p.name << " coords=" << p.coords_checked
       << " max_rel_err=" << p.max_rel_error;
    if (!p.passed) {
      os << " at " << p.worst_index << " (analytic " << p.analytic_at_worst << ", numeric "
         << p.numeric_at_worst << ")";
    }
    os << '\n';
  }
  os << (passed ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_error << '\n';
  return os.str();
}

namespace {

double eval_no_grad(const std::function<Tensor()>& program) {
  NoGradGuard guard;
  Tensor out = program();
  if (out.numel() != 1) throw UsageError("grad_check: program must return a scalar");
  return out.item();
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& program, const ParamSet& params,
                           const GradCheckOptions& options) {
  if (!(options.h > 0.0)) throw UsageError("grad_check: h must be positive");
  active_tape().clear();

  const double f0 = eval_no_grad(program);
  const double f0_again = eval_no_grad(program);
  if (std::memcmp(&f0, &f0_again, sizeof(double)) != 0) {
    throw CheckError("grad_check: program is not deterministic");
  }

  params.clear_grad();
  Tensor loss = program();
  backward(loss);

  GradCheckReport report;
  for (auto t : params) {
    ParamGradCheck pc;
    pc.name = t.name();
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::size_t stride = 1;
    if (options.max_coords_per_param > 0 && t.numel() > options.max_coords_per_param) {
      stride = (t.numel() + options.max_coords_per_param - 1) / options.max_coords_per_param;
    }
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); i += stride) {
      const double original = w[i];
      w[i] = original + options.h;
      const double fp = eval_no_grad(program);
      w[i] = original - options.h;
      const double fm = eval_no_grad(program);
      w[i] = original;
      const double numeric = (fp - fm) / (2.0 * options.h);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++pc.coords_checked;
      if (rel > pc.max_rel_error) {
        pc.max_rel_error = rel;
        pc.worst_index = i;
        pc.analytic_at_worst = a;
        pc.numeric_at_worst = numeric;
      }
    }
    pc.passed = pc.max_rel_error < options.tol;
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.passed = report.passed && pc.passed;
    report.params.push_back(std::move(pc));
  }
  params.clear_grad();
  return report;
}

}  // namespace adafuse::ad
