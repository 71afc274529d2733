// SPDX-License-Identifier: Apache-2.0
/**
 * @file   copy.hpp
 * @brief  Synthetic copy sequences for the causal host.
 *
 * A sequence is a random prefix of seq_len / 2 tokens over [0, vocab), the
 * delimiter token `vocab`, then the prefix again. Only the copy region is
 * scored.
 */
#pragma once

#include <algorithm>

#include "sw/rng.hpp"
#include "sw/tasks/dataset.hpp"

namespace sw::tasks {

struct CopyParams {
  std::size_t vocab = 8;
  std::size_t seq_len = 16;

  std::size_t prefix() const { return seq_len / 2; }
  std::size_t tokens() const { return seq_len + 1; }

  void validate() const {
    if (vocab < 1 || vocab > 255) throw ConfigError("copy: vocab must lie in [1, 255]");
    if (seq_len < 2 || seq_len % 2 != 0) throw ConfigError("copy: seq_len must be even and >= 2");
  }
};

inline std::vector<std::uint8_t> make_copy_sequence(const CopyParams& p, std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, index));
  std::vector<std::uint8_t> s(p.tokens());
  for (std::size_t t = 0; t < p.prefix(); ++t) s[t] = static_cast<std::uint8_t>(rng.below(p.vocab));
  s[p.prefix()] = static_cast<std::uint8_t>(p.vocab);
  std::copy_n(s.begin(), p.prefix(), s.begin() + static_cast<long>(p.prefix()) + 1);
  return s;
}

/// Next-token targets: position t predicts s[t+1] for t in [P, 2P), -1 elsewhere.
inline std::vector<int> copy_targets(std::span<const std::uint8_t> s) {
  const std::size_t P = (s.size() - 1) / 2;
  std::vector<int> y(s.size(), -1);
  for (std::size_t t = P; t + 1 < s.size(); ++t) y[t] = s[t + 1];
  return y;
}

inline Dataset generate_copy(std::size_t n, const CopyParams& p, std::uint64_t seed) {
  p.validate();
  if (n < 1) throw ConfigError("copy: n must be >= 1");
  std::vector<std::uint8_t> bytes;
  bytes.reserve(n * p.tokens());
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = make_copy_sequence(p, seed, i);
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  nlohmann::json h = {{"task", "copy"}, {"n", n}, {"seed", seed}, {"record_size", p.tokens()},
                      {"vocab", p.vocab}, {"seq_len", p.seq_len}};
  return Dataset(std::move(h), std::move(bytes));
}

/// Accuracy on the copy region of `test` when always predicting the most
/// frequent copy-region token of `train` (ties to the lowest token).
inline double unigram_baseline(const Dataset& train, const Dataset& test) {
  std::vector<std::size_t> freq(256, 0);
  for (std::size_t i = 0; i < train.size(); ++i)
    for (int y : copy_targets(train.record(i)))
      if (y >= 0) ++freq[static_cast<std::size_t>(y)];
  const auto guess = static_cast<int>(std::max_element(freq.begin(), freq.end()) - freq.begin());
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < test.size(); ++i)
    for (int y : copy_targets(test.record(i)))
      if (y >= 0) {
        hit += y == guess;
        ++total;
      }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace sw::tasks
