// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sw/tensor.hpp"

namespace sw {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

/// Adam with bias correction. Moment buffers are keyed by position in the
/// parameter list handed to step(); the list order must stay fixed.
template <class T>
struct AdamState {
  AdamOptions opt;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;

  explicit AdamState(AdamOptions o = {}) : opt(o) {}

  void init(const ParamList<T>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.numel(), T(0));
      v.emplace_back(p.tensor.numel(), T(0));
    }
  }
};

/// Cosine annealing from base_lr to min_lr over total epochs.
inline double cosine_lr(double base_lr, double min_lr, std::size_t epoch, std::size_t total) {
  if (total == 0) return base_lr;
  const double t = static_cast<double>(std::min(epoch, total)) / static_cast<double>(total);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(M_PI * t));
}

/// One update. Parameters without a gradient buffer are treated as having a
/// zero gradient. A NaN/Inf gradient aborts before anything is modified.
template <class T>
void adam_step(AdamState<T>& state, ParamList<T>& params, double lr) {
  if (state.m.size() != params.size()) state.init(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (state.m[i].size() != t.numel())
      throw ShapeError("adam moment buffer for '" + params[i].name + "' does not match parameter shape");
    if (!t.has_grad()) continue;
    for (T g : t.grad())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
  }
  ++state.step;
  const double b1 = state.opt.beta1, b2 = state.opt.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto data = t.data();
    const bool has = t.has_grad();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? static_cast<double>(t.grad()[j]) : 0.0;
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1, vhat = vj / c2;
      double upd = lr * mhat / (std::sqrt(vhat) + state.opt.eps);
      if (state.opt.weight_decay > 0.0) upd += lr * state.opt.weight_decay * static_cast<double>(data[j]);
      data[j] = static_cast<T>(static_cast<double>(data[j]) - upd);
    }
  }
}

}  // namespace sw
