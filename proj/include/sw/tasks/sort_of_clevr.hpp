// SPDX-License-Identifier: Apache-2.0
/**
 * @file   sort_of_clevr.hpp
 * @brief  Sort-of-CLEVR scenes, questions and answers.
 *
 * A 75x75 RGB image on a white background holds six objects, one per colour,
 * each an 11x11 square or a radius-5 circle. Every image carries 10
 * non-relational and 10 relational questions, encoded in 11 bits:
 *   bits 0-5   colour of the queried object (one-hot)
 *   bit 6 / 7  non-relational / relational
 *   bits 8-10  subtype (one-hot)
 * Non-relational: 0 shape, 1 is it on the left, 2 is it on top.
 * Relational:     0 shape of the nearest object, 1 shape of the farthest
 *                 object, 2 number of objects with the same shape.
 * Answers: 0 yes, 1 no, 2 square, 3 circle, 4..9 count 1..6.
 */
#pragma once

#include <array>
#include <cstdint>

#include "sw/rng.hpp"
#include "sw/tasks/dataset.hpp"

namespace sw::tasks {

inline constexpr std::size_t kSocImage = 75;
inline constexpr std::size_t kSocHalf = 5;
inline constexpr std::size_t kSocObjects = 6;
inline constexpr std::size_t kSocQuestions = 20;  // 10 non-relational then 10 relational
inline constexpr std::size_t kSocQuestionBits = 11;
inline constexpr std::size_t kSocAnswers = 10;

inline constexpr std::array<std::array<std::uint8_t, 3>, kSocObjects> kSocColors = {{
    {255, 0, 0},      // red
    {0, 255, 0},      // green
    {0, 0, 255},      // blue
    {255, 156, 0},    // orange
    {128, 128, 128},  // gray
    {255, 255, 0},    // yellow
}};

enum SocAnswer : std::uint8_t { kYes = 0, kNo = 1, kSquare = 2, kCircle = 3, kCountOne = 4 };

struct SocObject {
  std::uint8_t color = 0;
  std::uint8_t shape = 0;  // 0 square, 1 circle
  std::uint8_t x = 0, y = 0;
};

struct SocQuestion {
  std::uint8_t color = 0;
  std::uint8_t relational = 0;
  std::uint8_t subtype = 0;
  std::uint8_t answer = 0;

  std::array<float, kSocQuestionBits> bits() const {
    std::array<float, kSocQuestionBits> b{};
    b[color] = 1.0F;
    b[6 + relational] = 1.0F;
    b[8 + subtype] = 1.0F;
    return b;
  }
};

struct SocScene {
  std::array<SocObject, kSocObjects> objects{};  // objects[i].color == i
  std::vector<std::uint8_t> pixels;              // 75*75*3 RGB
  std::array<SocQuestion, kSocQuestions> questions{};
};

/// Answer from the scene graph. Ties in distance go to the lower colour index.
inline std::uint8_t soc_answer(const std::array<SocObject, kSocObjects>& objs, std::uint8_t color, bool relational,
                               std::uint8_t subtype) {
  const SocObject& o = objs[color];
  const double half = static_cast<double>(kSocImage) / 2.0;
  if (!relational) {
    if (subtype == 0) return o.shape == 0 ? kSquare : kCircle;
    if (subtype == 1) return o.x < half ? kYes : kNo;
    return o.y < half ? kYes : kNo;
  }
  if (subtype == 2) {
    std::uint8_t count = 0;
    for (const auto& p : objs) count += p.shape == o.shape;
    return static_cast<std::uint8_t>(kCountOne + count - 1);
  }
  int best = -1;
  long best_d = 0;
  for (std::size_t i = 0; i < kSocObjects; ++i) {
    if (i == color) continue;
    const long dx = long{objs[i].x} - o.x, dy = long{objs[i].y} - o.y, d = dx * dx + dy * dy;
    if (best < 0 || (subtype == 0 ? d < best_d : d > best_d)) {
      best = static_cast<int>(i);
      best_d = d;
    }
  }
  return objs[static_cast<std::size_t>(best)].shape == 0 ? kSquare : kCircle;
}

inline void render_soc(SocScene& s) {
  s.pixels.assign(kSocImage * kSocImage * 3, 255);
  const long r = kSocHalf;
  for (const auto& o : s.objects)
    for (long dy = -r; dy <= r; ++dy)
      for (long dx = -r; dx <= r; ++dx) {
        if (o.shape == 1 && dx * dx + dy * dy > r * r) continue;
        const auto px = static_cast<std::size_t>(o.x + dx), py = static_cast<std::size_t>(o.y + dy);
        for (std::size_t c = 0; c < 3; ++c) s.pixels[(py * kSocImage + px) * 3 + c] = kSocColors[o.color][c];
      }
}

/// Object centres lie in [5, 69] and their bounding boxes never touch, so
/// every object is fully visible.
inline SocScene make_soc_scene(std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, index));
  SocScene s;
  const std::size_t span = kSocImage - 2 * kSocHalf;
  for (std::size_t i = 0; i < kSocObjects; ++i) {
    SocObject o;
    o.color = static_cast<std::uint8_t>(i);
    for (;;) {
      o.x = static_cast<std::uint8_t>(kSocHalf + rng.below(span));
      o.y = static_cast<std::uint8_t>(kSocHalf + rng.below(span));
      bool clear = true;
      for (std::size_t j = 0; j < i; ++j) {
        const long dx = std::abs(long{o.x} - s.objects[j].x), dy = std::abs(long{o.y} - s.objects[j].y);
        clear &= std::max(dx, dy) > static_cast<long>(2 * kSocHalf);
      }
      if (clear) break;
    }
    o.shape = rng.bernoulli(0.5) ? 0 : 1;
    s.objects[i] = o;
  }
  for (std::size_t q = 0; q < kSocQuestions; ++q) {
    SocQuestion& Q = s.questions[q];
    Q.relational = q >= kSocQuestions / 2;
    Q.color = static_cast<std::uint8_t>(rng.below(kSocObjects));
    Q.subtype = static_cast<std::uint8_t>(rng.below(3));
    Q.answer = soc_answer(s.objects, Q.color, Q.relational, Q.subtype);
  }
  render_soc(s);
  return s;
}

/// Record: pixels, 20 x (color, relational, subtype, answer), 6 x (color, shape, x, y).
inline constexpr std::size_t kSocRecordSize = kSocImage * kSocImage * 3 + 4 * kSocQuestions + 4 * kSocObjects;

inline Dataset generate_sort_of_clevr(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("sort_of_clevr: n must be >= 1");
  std::vector<std::uint8_t> bytes(n * kSocRecordSize);
  for (std::size_t i = 0; i < n; ++i) {
    SocScene s = make_soc_scene(seed, i);
    std::uint8_t* r = bytes.data() + i * kSocRecordSize;
    r = std::copy(s.pixels.begin(), s.pixels.end(), r);
    for (const auto& q : s.questions) {
      *r++ = q.color;
      *r++ = q.relational;
      *r++ = q.subtype;
      *r++ = q.answer;
    }
    for (const auto& o : s.objects) {
      *r++ = o.color;
      *r++ = o.shape;
      *r++ = o.x;
      *r++ = o.y;
    }
  }
  nlohmann::json h = {{"task", "soc"}, {"n", n}, {"seed", seed}, {"record_size", kSocRecordSize},
                      {"image_size", kSocImage}, {"questions_per_image", kSocQuestions}};
  return Dataset(std::move(h), std::move(bytes));
}

inline SocScene read_soc(const Dataset& d, std::size_t i) {
  auto r = d.record(i);
  SocScene s;
  const std::size_t npx = kSocImage * kSocImage * 3;
  s.pixels.assign(r.begin(), r.begin() + static_cast<long>(npx));
  const std::uint8_t* p = r.data() + npx;
  for (auto& q : s.questions) {
    q = {p[0], p[1], p[2], p[3]};
    p += 4;
  }
  for (auto& o : s.objects) {
    o = {p[0], p[1], p[2], p[3]};
    p += 4;
  }
  return s;
}

}  // namespace sw::tasks
