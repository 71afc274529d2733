// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tasks.hpp
 * @brief  Generation by config and conversion of dataset records to batches.
 *
 * A Sort-of-CLEVR record holds 20 questions, so sample s of such a dataset
 * is question s % 20 of image s / 20.
 */
#pragma once

#include <span>

#include "sw/models/common.hpp"
#include "sw/tasks/copy.hpp"
#include "sw/tasks/sort_of_clevr.hpp"
#include "sw/tasks/triangles.hpp"

namespace sw::tasks {

/// Rejects configs whose task binding cannot consume the task's records.
inline void check_task_binding(const ModelConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  switch (c.task) {
    case TaskKind::kTriangles:
      need(c.image_size == 32 || c.image_size == 64, "triangles: image_size must be 32 or 64");
      need(c.channels == 1 && c.n_classes == 2 && c.question_bits == 0,
           "triangles: needs channels = 1, n_classes = 2, question_bits = 0");
      break;
    case TaskKind::kSortOfClevr:
      need(c.image_size == kSocImage && c.channels == 3, "soc: needs image_size = 75 and channels = 3");
      need(c.question_bits == kSocQuestionBits && c.n_classes == kSocAnswers, "soc: needs question_bits = 11, n_classes = 10");
      break;
    case TaskKind::kCopy:
      CopyParams{c.vocab, c.seq_len}.validate();
      break;
  }
}

/// Number of model samples held by a dataset.
inline std::size_t sample_count(const Dataset& d) {
  return d.task() == "soc" ? d.size() * kSocQuestions : d.size();
}

inline Dataset generate_for(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  check_task_binding(c);
  switch (c.task) {
    case TaskKind::kTriangles: {
      TriangleParams p;
      p.image_size = c.image_size;
      return generate_triangles(n, p, seed);
    }
    case TaskKind::kSortOfClevr:
      return generate_sort_of_clevr(n, seed);
    case TaskKind::kCopy:
      return generate_copy(n, CopyParams{c.vocab, c.seq_len}, seed);
  }
  throw ConfigError("unknown task");
}

/// Images per dataset for n model samples (Sort-of-CLEVR rounds up).
inline std::size_t records_for_samples(const ModelConfig& c, std::size_t n) {
  return c.task == TaskKind::kSortOfClevr ? (n + kSocQuestions - 1) / kSocQuestions : n;
}

/// Verifies that a dataset file matches the config's task binding.
inline void check_dataset(const Dataset& d, const ModelConfig& c) {
  if (d.task() != task_name(c.task))
    throw ConfigError("dataset task '" + d.task() + "' does not match config task '" + task_name(c.task) + "'");
  const auto& h = d.header();
  if (c.image_task() && h.at("image_size").get<std::size_t>() != c.image_size)
    throw ConfigError("dataset image_size does not match the config");
  if (c.task == TaskKind::kCopy &&
      (h.at("vocab").get<std::size_t>() != c.vocab || h.at("seq_len").get<std::size_t>() != c.seq_len))
    throw ConfigError("dataset vocab/seq_len do not match the config");
}

/// True when sample s of a Sort-of-CLEVR dataset is a relational question.
inline bool is_relational(const Dataset& d, std::size_t s) {
  const auto r = d.record(s / kSocQuestions);
  return r[kSocImage * kSocImage * 3 + 4 * (s % kSocQuestions) + 1] != 0;
}

template <class T>
Batch<T> make_batch(const Dataset& d, const ModelConfig& c, std::span<const std::size_t> samples) {
  Batch<T> b;
  b.size = samples.size();
  if (c.task == TaskKind::kCopy) {
    for (std::size_t s : samples) {
      const auto r = d.record(s);
      b.tokens.insert(b.tokens.end(), r.begin(), r.end());
      const auto y = copy_targets(r);
      b.labels.insert(b.labels.end(), y.begin(), y.end());
    }
    return b;
  }
  const std::size_t npx = c.image_size * c.image_size * c.channels;
  std::vector<T> pixels;
  pixels.reserve(b.size * npx);
  if (c.task == TaskKind::kSortOfClevr) {
    std::vector<T> q;
    q.reserve(b.size * kSocQuestionBits);
    for (std::size_t s : samples) {
      // Inverted so the white background is zero and only objects drive
      // the patch embedding.
      const auto r = d.record(s / kSocQuestions);
      for (std::size_t i = 0; i < npx; ++i) pixels.push_back(T(1) - static_cast<T>(r[i]) / T(255));
      const std::uint8_t* qp = r.data() + npx + 4 * (s % kSocQuestions);
      const SocQuestion sq{qp[0], qp[1], qp[2], qp[3]};
      for (float v : sq.bits()) q.push_back(static_cast<T>(v));
      b.labels.push_back(sq.answer);
    }
    b.question = Tensor<T>({b.size, 1, kSocQuestionBits}, std::move(q));
  } else {
    for (std::size_t s : samples) {
      const auto r = d.record(s);
      for (std::size_t i = 0; i < npx; ++i) pixels.push_back(static_cast<T>(r[i]) / T(255));
      b.labels.push_back(r[npx]);
    }
  }
  b.patches = patchify(pixels, b.size, c.image_size, c.channels, c.patch);
  return b;
}

}  // namespace sw::tasks
