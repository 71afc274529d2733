// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.hpp
 * @brief  Versioned binary checkpoints.
 *
 * Layout (little-endian):
 *   "SWCK"  u32 version  u32 manifest_len  manifest (JSON)
 *   raw tensor buffers in manifest order
 * The manifest lists every tensor as {name, dtype, shape} and carries the
 * model config text plus free-form training state (epoch, step, ...).
 * Optimizer moments are stored as tensors named "adam.m/<param>" and
 * "adam.v/<param>".
 */
#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <type_traits>

#include "sw/adam.hpp"
#include "sw/models/config.hpp"

namespace sw {

inline constexpr char kCheckpointMagic[4] = {'S', 'W', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  Shape shape;
  std::vector<double> values;  // widened; the dtype is kept alongside
  std::string dtype;
};

struct Checkpoint {
  std::string config_text;
  nlohmann::json state = nlohmann::json::object();
  std::map<std::string, StoredTensor> tensors;
};

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <class T>
void add_tensor(Checkpoint& ck, const std::string& name, const Shape& shape, const std::vector<T>& v) {
  ck.tensors[name] = {shape, std::vector<double>(v.begin(), v.end()), dtype_name<T>()};
}

}  // namespace detail

/// Snapshot of parameters (and optionally Adam moments) plus metadata.
template <class T>
Checkpoint make_checkpoint(const ModelConfig& cfg, const ParamList<T>& params, const std::type_identity_t<AdamState<T>>* adam,
                           nlohmann::json state = nlohmann::json::object()) {
  Checkpoint ck;
  ck.config_text = to_text(cfg);
  ck.state = std::move(state);
  for (const auto& p : params) detail::add_tensor(ck, p.name, p.tensor.shape(), p.tensor.values());
  if (adam && !adam->m.empty()) {
    ck.state["adam_step"] = adam->step;
    for (std::size_t i = 0; i < params.size(); ++i) {
      detail::add_tensor(ck, "adam.m/" + params[i].name, params[i].tensor.shape(), adam->m[i]);
      detail::add_tensor(ck, "adam.v/" + params[i].name, params[i].tensor.shape(), adam->v[i]);
    }
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  nlohmann::json man;
  man["config"] = ck.config_text;
  man["state"] = ck.state;
  man["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : ck.tensors) man["tensors"].push_back({{"name", name}, {"dtype", t.dtype}, {"shape", t.shape}});
  const std::string text = man.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    const std::uint32_t version = kCheckpointVersion, len = static_cast<std::uint32_t>(text.size());
    f.write(kCheckpointMagic, 4);
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&len), 4);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ck.tensors) {
      if (t.dtype == "f32") {
        std::vector<float> v(t.values.begin(), t.values.end());
        f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
      } else {
        f.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * 8));
      }
    }
    if (!f) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  char magic[4];
  std::uint32_t version = 0, len = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&len), 4);
  if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IoError(path + ": not a checkpoint");
  if (version != kCheckpointVersion)
    throw IoError(path + ": checkpoint version " + std::to_string(version) + " (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  std::string text(len, '\0');
  f.read(text.data(), len);
  if (!f) throw IoError(path + ": truncated manifest");
  Checkpoint ck;
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(text);
    ck.config_text = man.at("config").get<std::string>();
    ck.state = man.at("state");
    for (const auto& e : man.at("tensors")) {
      StoredTensor t;
      t.shape = e.at("shape").get<Shape>();
      t.dtype = e.at("dtype").get<std::string>();
      if (t.dtype != "f32" && t.dtype != "f64") throw IoError(path + ": unknown dtype " + t.dtype);
      t.values.resize(numel(t.shape));
      if (t.dtype == "f32") {
        std::vector<float> v(t.values.size());
        f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
        std::copy(v.begin(), v.end(), t.values.begin());
      } else {
        f.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * 8));
      }
      if (!f) throw IoError(path + ": truncated tensor data for " + e.at("name").get<std::string>());
      ck.tensors[e.at("name").get<std::string>()] = std::move(t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad manifest: " + e.what());
  }
  if (f.peek() != std::char_traits<char>::eof()) throw IoError(path + ": trailing bytes after tensor data");
  return ck;
}

/// Copies stored values into the parameters (and Adam moments when both are
/// present). Names and shapes must match exactly.
template <class T>
void restore(const Checkpoint& ck, ParamList<T>& params, AdamState<T>* adam = nullptr) {
  auto fetch = [&](const std::string& name, const Shape& shape) -> const StoredTensor& {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw ConfigError("checkpoint has no tensor '" + name + "'");
    if (it->second.shape != shape)
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + to_string(it->second.shape) + ", model expects " +
                        to_string(shape));
    return it->second;
  };
  for (auto& p : params) {
    const auto& s = fetch(p.name, p.tensor.shape());
    auto d = p.tensor.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(s.values[i]);
  }
  if (adam && ck.state.contains("adam_step")) {
    adam->init(params);
    adam->step = ck.state.at("adam_step").get<std::uint64_t>();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& m = fetch("adam.m/" + params[i].name, params[i].tensor.shape());
      const auto& v = fetch("adam.v/" + params[i].name, params[i].tensor.shape());
      for (std::size_t j = 0; j < m.values.size(); ++j) {
        adam->m[i][j] = static_cast<T>(m.values[j]);
        adam->v[i][j] = static_cast<T>(v.values[j]);
      }
    }
  }
}

}  // namespace sw
