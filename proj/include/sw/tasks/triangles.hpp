// SPDX-License-Identifier: Apache-2.0
/**
 * @file   triangles.hpp
 * @brief  Equilateral-triangle detection images.
 *
 * Each image holds three clusters of points. A sample is positive when the
 * three cluster midpoints are equidistant: their pairwise-distance spread
 * (max - min) is at most tau. Negatives are resampled until the spread is
 * at least 2 tau, so no sample falls in the ambiguous band between.
 * Lengths scale with image_size / 64.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "sw/rng.hpp"
#include "sw/tasks/dataset.hpp"

namespace sw::tasks {

struct TriangleParams {
  std::size_t image_size = 32;
  std::size_t points_per_cluster = 5;
  std::size_t max_retries = 10000;

  double scale() const { return static_cast<double>(image_size) / 64.0; }
  double tau() const { return 1.5 * scale(); }
  double sigma() const { return 1.5 * scale(); }
  double min_separation() const { return 12.0 * scale(); }
  /// Midpoints stay this far from the border so the scatter lands inside.
  double margin() const { return 3.0 * sigma(); }

  void validate() const {
    if (image_size != 32 && image_size != 64) throw ConfigError("triangles: image_size must be 32 or 64");
    if (points_per_cluster < 1) throw ConfigError("triangles: need at least one point per cluster");
  }
};

struct TriangleSample {
  std::vector<std::uint8_t> pixels;  // image_size^2, 0 or 255
  int label = 0;                     // 1 = equilateral
  std::array<std::array<float, 2>, 3> midpoints{};  // (x, y)
};

/// max - min of the three pairwise midpoint distances.
inline double distance_spread(const std::array<std::array<double, 2>, 3>& m) {
  std::array<double, 3> d{};
  for (int i = 0; i < 3; ++i) {
    const auto& a = m[static_cast<std::size_t>(i)];
    const auto& b = m[static_cast<std::size_t>((i + 1) % 3)];
    d[static_cast<std::size_t>(i)] = std::hypot(a[0] - b[0], a[1] - b[1]);
  }
  return *std::max_element(d.begin(), d.end()) - *std::min_element(d.begin(), d.end());
}

namespace detail {

inline double min_pairwise(const std::array<std::array<double, 2>, 3>& m) {
  double best = 1e300;
  for (int i = 0; i < 3; ++i) {
    const auto& a = m[static_cast<std::size_t>(i)];
    const auto& b = m[static_cast<std::size_t>((i + 1) % 3)];
    best = std::min(best, std::hypot(a[0] - b[0], a[1] - b[1]));
  }
  return best;
}

}  // namespace detail

/// Sample i of the dataset with master seed `seed`.
inline TriangleSample make_triangle_sample(const TriangleParams& p, std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, index));
  const double S = static_cast<double>(p.image_size), lo = p.margin(), hi = S - 1.0 - p.margin();
  auto inside = [&](const std::array<double, 2>& v) { return v[0] >= lo && v[0] <= hi && v[1] >= lo && v[1] <= hi; };

  TriangleSample s;
  s.label = rng.bernoulli(0.5) ? 1 : 0;
  std::array<std::array<double, 2>, 3> m{};
  bool ok = false;
  for (std::size_t attempt = 0; attempt < p.max_retries && !ok; ++attempt) {
    if (s.label) {
      const double side = rng.uniform(p.min_separation(), hi - lo);
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const std::array<double, 2> c{rng.uniform(lo, hi), rng.uniform(lo, hi)};
      const double r = side / std::sqrt(3.0);
      for (int v = 0; v < 3; ++v) {
        const double a = theta + 2.0 * std::numbers::pi * v / 3.0;
        m[static_cast<std::size_t>(v)] = {c[0] + r * std::cos(a) + rng.uniform(-p.tau() / 4, p.tau() / 4),
                                          c[1] + r * std::sin(a) + rng.uniform(-p.tau() / 4, p.tau() / 4)};
      }
    } else {
      for (auto& v : m) v = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
    }
    // Checks run on the float32 values that are stored.
    for (auto& v : m) v = {static_cast<float>(v[0]), static_cast<float>(v[1])};
    if (s.label) ok = distance_spread(m) <= p.tau();
    else ok = distance_spread(m) >= 2.0 * p.tau();
    ok = ok && std::all_of(m.begin(), m.end(), inside) && detail::min_pairwise(m) >= p.min_separation();
  }
  if (!ok) throw ConfigError("triangles: no feasible placement after " + std::to_string(p.max_retries) + " tries");

  s.pixels.assign(p.image_size * p.image_size, 0);
  for (std::size_t v = 0; v < 3; ++v) {
    s.midpoints[v] = {static_cast<float>(m[v][0]), static_cast<float>(m[v][1])};
    for (std::size_t k = 0; k < p.points_per_cluster; ++k) {
      const double x = std::round(m[v][0] + p.sigma() * rng.normal());
      const double y = std::round(m[v][1] + p.sigma() * rng.normal());
      const auto xi = static_cast<std::size_t>(std::clamp(x, 0.0, S - 1.0));
      const auto yi = static_cast<std::size_t>(std::clamp(y, 0.0, S - 1.0));
      s.pixels[yi * p.image_size + xi] = 255;
    }
  }
  return s;
}

/// Record: pixels, label byte, 3 midpoints as (x, y) float32 pairs.
inline std::size_t triangle_record_size(const TriangleParams& p) { return p.image_size * p.image_size + 1 + 24; }

inline Dataset generate_triangles(std::size_t n, const TriangleParams& p, std::uint64_t seed) {
  p.validate();
  if (n < 1) throw ConfigError("triangles: n must be >= 1");
  const std::size_t rs = triangle_record_size(p), npx = p.image_size * p.image_size;
  std::vector<std::uint8_t> bytes(n * rs);
  for (std::size_t i = 0; i < n; ++i) {
    TriangleSample s = make_triangle_sample(p, seed, i);
    std::uint8_t* r = bytes.data() + i * rs;
    std::copy(s.pixels.begin(), s.pixels.end(), r);
    r[npx] = static_cast<std::uint8_t>(s.label);
    for (std::size_t v = 0; v < 3; ++v) {
      sw::detail::put_f32(r + npx + 1 + 8 * v, s.midpoints[v][0]);
      sw::detail::put_f32(r + npx + 5 + 8 * v, s.midpoints[v][1]);
    }
  }
  nlohmann::json h = {{"task", "triangles"}, {"n", n}, {"seed", seed}, {"record_size", rs},
                      {"image_size", p.image_size}, {"points_per_cluster", p.points_per_cluster},
                      {"tau", p.tau()}, {"sigma", p.sigma()}, {"min_separation", p.min_separation()}};
  return Dataset(std::move(h), std::move(bytes));
}

/// Decoded view of one triangles record.
struct TriangleRecord {
  std::span<const std::uint8_t> pixels;
  int label = 0;
  std::array<std::array<double, 2>, 3> midpoints{};
};

inline TriangleRecord read_triangle(const Dataset& d, std::size_t i) {
  const std::size_t S = d.header().at("image_size").get<std::size_t>(), npx = S * S;
  auto r = d.record(i);
  TriangleRecord t;
  t.pixels = r.subspan(0, npx);
  t.label = r[npx];
  for (std::size_t v = 0; v < 3; ++v)
    t.midpoints[v] = {sw::detail::get_f32(r.data() + npx + 1 + 8 * v), sw::detail::get_f32(r.data() + npx + 5 + 8 * v)};
  return t;
}

}  // namespace sw::tasks
