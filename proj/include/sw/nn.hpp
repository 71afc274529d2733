// SPDX-License-Identifier: Apache-2.0
/**
 * @file   nn.hpp
 * @brief  Small parameterized building blocks shared by the host models.
 */
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sw/ops.hpp"
#include "sw/rng.hpp"

namespace sw::nn {

/// uniform(-bound, bound) values drawn in double and rounded to T, so a float
/// and a double model built from the same seed hold the same weights.
template <class T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng, std::string name) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(shape), std::move(v), std::move(name));
}

template <class T>
Tensor<T> constant_param(Shape shape, double value, std::string name) {
  return Tensor<T>::parameter(shape, std::vector<T>(numel(shape), static_cast<T>(value)), std::move(name));
}

/// Fan-in scaled init: uniform(±1/sqrt(fan_in)).
template <class T>
Tensor<T> linear_weight(std::size_t in, std::size_t out, Rng& rng, std::string name) {
  return uniform_param<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng, std::move(name));
}

template <class T>
struct Linear {
  Tensor<T> weight;  // (in, out)
  Tensor<T> bias;    // (out) or undefined

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    weight = linear_weight<T>(in, out, rng, "weight");
    if (with_bias) bias = uniform_param<T>({out}, 1.0 / std::sqrt(static_cast<double>(in)), rng, "bias");
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> y = ops::matmul(x, weight);
    return bias.defined() ? ops::add(y, bias) : y;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain, bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) {
    gain = constant_param<T>({d}, 1.0, "gain");
    bias = constant_param<T>({d}, 0.0, "bias");
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gain, bias); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Two-layer relu MLP applied position-wise.
template <class T>
struct FeedForward {
  Linear<T> in, out;

  FeedForward() = default;
  FeedForward(std::size_t d, std::size_t hidden, Rng& rng) : in(d, hidden, true, rng), out(hidden, d, true, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return out(ops::relu(in(x))); }

  void collect(ParamList<T>& ps, const std::string& prefix) const {
    in.collect(ps, prefix + ".in");
    out.collect(ps, prefix + ".out");
  }
};

}  // namespace sw::nn
