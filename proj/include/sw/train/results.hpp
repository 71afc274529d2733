// SPDX-License-Identifier: Apache-2.0
/**
 * @file   results.hpp
 * @brief  Reading recorded runs: metrics streams, epochs to a target
 *         accuracy and seed medians.
 */
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "sw/tensor.hpp"

namespace sw {

/// Test-split lines of a run's metrics.jsonl, in epoch order.
inline std::vector<nlohmann::json> read_test_metrics(const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "metrics.jsonl");
  if (!in) throw IoError("no metrics in " + run_dir.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(run_dir.string() + ": bad metrics line: " + e.what());
    }
    if (j.value("split", "") == "test") out.push_back(std::move(j));
  }
  return out;
}

/// First epoch whose `key` reaches `threshold`; 0 if none does.
inline std::size_t epochs_to_reach(const std::vector<nlohmann::json>& test_lines, const std::string& key,
                                   double threshold) {
  for (const auto& j : test_lines)
    if (j.contains(key) && j.at(key).get<double>() >= threshold) return j.at("epoch").get<std::size_t>();
  return 0;
}

/// Epochs to threshold with a never-reached run counted as `cap` + 1, so
/// it orders after every run that got there.
inline double epochs_or_cap(std::size_t reached, std::size_t cap) {
  return reached ? static_cast<double>(reached) : static_cast<double>(cap + 1);
}

/// Median; the mean of the two middle values for even sizes.
inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace sw
