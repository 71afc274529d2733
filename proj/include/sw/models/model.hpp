// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  Host construction from a ModelConfig.
 */
#pragma once

#include <memory>

#include "sw/models/rims.hpp"
#include "sw/models/tims.hpp"
#include "sw/models/transformer.hpp"

namespace sw {

/// Builds the host named by cfg.host with parameters drawn from `seed`.
/// Equal seeds give equal weights for float and double models.
template <class T>
std::unique_ptr<HostModel<T>> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  switch (cfg.host) {
    case Host::kRimsSw: return std::make_unique<RimsHost<T>>(cfg, rng);
    case Host::kTimsSw: return std::make_unique<TimsHost<T>>(cfg, rng);
    default: return std::make_unique<TransformerHost<T>>(cfg, rng);
  }
}

template <class T>
std::unique_ptr<HostModel<T>> make_model(const ModelConfig& cfg) {
  return make_model<T>(cfg, cfg.seed);
}

}  // namespace sw
