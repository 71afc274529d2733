// SPDX-License-Identifier: Apache-2.0
/**
 * @file   grad_check.hpp
 * @brief  Central finite-difference verification of autodiff gradients.
 */
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "sw/tensor.hpp"

namespace sw {

struct GradCheckEntry {
  std::string name;
  std::size_t size = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Relative error uses max(|analytic|, |numeric|, floor) as denominator so
  /// entries whose true gradient is ~0 are compared absolutely. The floor is
  /// raised to noise_factor times the rounding noise of the difference
  /// quotient, DBL_EPSILON * max(|f|, 1) / eps, below which a gradient
  /// entry cannot be resolved.
  double floor = 1e-6;
  double noise_factor = 1e5;
};

/// Compares autodiff gradients of the scalar `f()` with respect to `params`
/// against (f(θ+εe) - f(θ-εe)) / 2ε for every coordinate.
/// Throws NumericError if two forward passes at the same point differ.
template <class F>
GradCheckReport grad_check(F&& f, const ParamList<double>& params, GradCheckOptions opt = {}) {
  for (auto p : params) p.tensor.zero_grad();
  Tensor<double> loss = f();
  loss.backward();
  const double base = loss.item();
  {
    NoGradGuard ng;
    const double again = f().item();
    if (std::bit_cast<std::uint64_t>(again) != std::bit_cast<std::uint64_t>(base))
      throw NumericError("grad_check: forward pass is not deterministic");
  }

  GradCheckReport report;
  report.tol = opt.tol;
  const double floor = std::max(
      opt.floor, opt.noise_factor * std::numeric_limits<double>::epsilon() * std::max(std::abs(base), 1.0) / opt.eps);
  NoGradGuard ng;
  for (auto p : params) {
    Tensor<double>& t = p.tensor;
    GradCheckEntry e{p.name, t.numel(), 0.0, 0.0};
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t[i];
      t[i] = orig + opt.eps;
      const double fp = f().item();
      t[i] = orig - opt.eps;
      const double fm = f().item();
      t[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
      e.max_abs_err = std::max(e.max_abs_err, abs_err);
      e.max_rel_err = std::max(e.max_rel_err, abs_err / denom);
    }
    report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
    report.entries.push_back(std::move(e));
  }
  report.passed = report.max_rel_err <= opt.tol;
  return report;
}

}  // namespace sw
