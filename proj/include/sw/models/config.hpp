// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  ModelConfig: architecture, task binding and training settings, with
 *         a versioned `key = value` text form.
 *
 * File format:
 *
 *   # comment
 *   version = 1
 *   host = tr_hsw
 *   topk = 4
 *
 * Unknown keys, malformed values and a missing or different version are
 * ConfigErrors. Keys that are absent keep their defaults.
 */
#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sw/tensor.hpp"
#include "sw/workspace.hpp"

namespace sw {

inline constexpr int kConfigVersion = 1;

enum class Host { kTr, kTrHc, kTrSsw, kTrHsw, kTr2xSa, kRimsSw, kTimsSw };
enum class TaskKind { kTriangles, kSortOfClevr, kCopy };

inline const char* host_name(Host h) {
  switch (h) {
    case Host::kTr: return "tr";
    case Host::kTrHc: return "tr_hc";
    case Host::kTrSsw: return "tr_ssw";
    case Host::kTrHsw: return "tr_hsw";
    case Host::kTr2xSa: return "tr_2xsa";
    case Host::kRimsSw: return "rims_sw";
    case Host::kTimsSw: return "tims_sw";
  }
  return "?";
}

inline Host parse_host(const std::string& s) {
  for (Host h : {Host::kTr, Host::kTrHc, Host::kTrSsw, Host::kTrHsw, Host::kTr2xSa, Host::kRimsSw, Host::kTimsSw})
    if (s == host_name(h)) return h;
  throw ConfigError("unknown host '" + s + "'");
}

inline const char* task_name(TaskKind t) {
  switch (t) {
    case TaskKind::kTriangles: return "triangles";
    case TaskKind::kSortOfClevr: return "soc";
    case TaskKind::kCopy: return "copy";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  for (TaskKind t : {TaskKind::kTriangles, TaskKind::kSortOfClevr, TaskKind::kCopy})
    if (s == task_name(t)) return t;
  throw ConfigError("unknown task '" + s + "'");
}

struct ModelConfig {
  // host
  Host host = Host::kTr;
  std::size_t n_layers = 4;
  bool share_layer_params = true;
  std::size_t n_h = 64;
  std::size_t ffn_dim = 128;
  std::size_t heads = 4;
  std::size_t head_dim = 16;  // per-head width of pairwise self-attention
  double dropout = 0.1;       // on attention weights, training only

  // workspace
  std::size_t n_m = 8;
  std::size_t n_l = 0;  // 0 means n_h
  std::size_t sw_heads = 4;
  std::size_t sw_key_dim = 8;
  std::size_t topk = 0;  // tr_hsw / tims_sw write competition
  std::size_t write_iters = 1;
  GateStyle gate_style = GateStyle::kUnit;
  bool persistence = true;
  bool sw_plus_sa = false;

  // rims_sw
  std::size_t n_s = 6;
  std::size_t n_sel = 4;
  std::size_t rims_input_dim = 32;  // patch encoding width before the position code
  std::size_t rims_pos_dim = 8;
  std::size_t rims_key_dim = 16;
  bool rims_broadcast = true;

  // tims_sw
  std::size_t n_b = 4;
  std::size_t tims_pre = 1;   // monolithic layers before the modular block
  std::size_t tims_post = 1;  // and after

  // task binding
  TaskKind task = TaskKind::kTriangles;
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t patch = 4;
  std::size_t question_bits = 0;
  std::size_t n_classes = 2;
  std::size_t vocab = 8;
  std::size_t seq_len = 16;

  // training
  std::uint64_t seed = 1;
  std::uint64_t data_seed = 7;
  std::size_t n_train = 10000;  // model samples (Sort-of-CLEVR: 20 per image)
  std::size_t n_test = 2000;
  std::size_t batch = 64;
  std::size_t epochs = 50;
  double lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 0.0;

  std::size_t slot_width() const { return n_l ? n_l : n_h; }
  bool causal() const { return task == TaskKind::kCopy; }
  bool image_task() const { return task != TaskKind::kCopy; }
  bool uses_workspace() const { return host == Host::kTrSsw || host == Host::kTrHsw || host == Host::kRimsSw || host == Host::kTimsSw; }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t n_patches() const { return (image_size / patch) * (image_size / patch); }
  /// Token rows seen by transformer hosts: CLS + patches (+ question), or the sequence.
  std::size_t n_tokens() const {
    if (causal()) return 2 * (seq_len / 2) + 1;
    return 1 + n_patches() + (question_bits ? 1 : 0);
  }

  /// Host-dependent defaults that a config file may leave implicit.
  void apply_host_defaults() { share_layer_params = host != Host::kTrHc; }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("config: " + msg);
    };
    need(n_layers >= 1, "n_layers must be >= 1");
    need(n_h > 0 && ffn_dim > 0 && heads > 0 && head_dim > 0, "zero model dimension");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0,1)");
    need(host != Host::kTr || share_layer_params, "tr shares parameters across layers (use tr_hc for separate ones)");
    need(host != Host::kTrHc || !share_layer_params, "tr_hc uses separate parameters per layer");
    need(host != Host::kTrHsw || topk >= 1, "tr_hsw requires topk >= 1");
    need(!(host == Host::kTrSsw && topk), "tr_ssw is soft; use tr_hsw for top-k");
    need(n_m >= 1, "n_m must be >= 1");
    need(sw_heads > 0 && sw_key_dim > 0, "zero workspace dimension");
    need(slot_width() % sw_heads == 0, "sw_heads must divide the slot width");
    if (host == Host::kRimsSw) {
      need(image_task(), "rims_sw runs on image tasks");
      need(n_sel >= 1 && n_sel <= n_s, "rims_sw requires 1 <= n_sel <= n_s");
      need(n_h % sw_heads == 0, "sw_heads must divide n_h");
    } else if (host == Host::kTimsSw) {
      need(n_b >= 1 && n_h % n_b == 0, "n_b must divide n_h");
      need(n_sel >= 1 && n_sel <= n_b, "tims_sw requires 1 <= n_sel <= n_b");
      need((n_h / n_b) % sw_heads == 0, "sw_heads must divide n_h / n_b");
      need(heads <= n_h / n_b, "heads must not exceed the mechanism width");
    } else if (uses_workspace()) {
      need(n_h % sw_heads == 0, "sw_heads must divide n_h");
    }
    if (host == Host::kTimsSw || host == Host::kRimsSw) need(topk == 0 || topk <= (host == Host::kRimsSw ? n_sel : n_b), "topk exceeds the written rows");
    if (image_task()) {
      need(patch > 0 && image_size % patch == 0, "patch must divide image_size");
      need(channels >= 1 && n_classes >= 2, "image tasks need channels >= 1 and n_classes >= 2");
    } else {
      need(seq_len >= 2 && seq_len % 2 == 0, "copy task needs an even seq_len >= 2");
      need(vocab >= 1, "vocab must be >= 1");
      need(host != Host::kRimsSw, "rims_sw runs on image tasks");
    }
    need(batch >= 1, "batch must be >= 1");
    need(lr > 0.0 && min_lr >= 0.0, "learning rates must be positive");
  }

  WorkspaceConfig workspace() const {
    WorkspaceConfig w;
    w.n_m = n_m;
    w.n_l = slot_width();
    w.n_h = n_h;
    w.heads = sw_heads;
    w.key_dim = sw_key_dim;
    w.write_iters = write_iters;
    w.gate_style = gate_style;
    if (topk) w.competition = Competition::topk(topk);
    return w;
  }
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const std::string&)> set;
};

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

inline std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

#define SW_SIZE_FIELD(name)                                                       \
  ConfigField {                                                                   \
    #name, [](const ModelConfig& c) { return std::to_string(c.name); },           \
        [](ModelConfig& c, const std::string& v) { c.name = parse_number<decltype(c.name)>(#name, v); } \
  }
#define SW_BOOL_FIELD(name)                                                       \
  ConfigField {                                                                   \
    #name, [](const ModelConfig& c) { return std::string(c.name ? "true" : "false"); }, \
        [](ModelConfig& c, const std::string& v) { c.name = parse_bool(#name, v); } \
  }
#define SW_REAL_FIELD(name)                                                       \
  ConfigField {                                                                   \
    #name, [](const ModelConfig& c) { return fmt_double(c.name); },               \
        [](ModelConfig& c, const std::string& v) { c.name = parse_number<double>(#name, v); } \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      {"host", [](const ModelConfig& c) { return std::string(host_name(c.host)); },
       [](ModelConfig& c, const std::string& v) { c.host = parse_host(v); }},
      SW_SIZE_FIELD(n_layers), SW_BOOL_FIELD(share_layer_params), SW_SIZE_FIELD(n_h), SW_SIZE_FIELD(ffn_dim),
      SW_SIZE_FIELD(heads), SW_SIZE_FIELD(head_dim), SW_REAL_FIELD(dropout),
      SW_SIZE_FIELD(n_m), SW_SIZE_FIELD(n_l), SW_SIZE_FIELD(sw_heads), SW_SIZE_FIELD(sw_key_dim), SW_SIZE_FIELD(topk),
      SW_SIZE_FIELD(write_iters),
      {"gate_style", [](const ModelConfig& c) { return std::string(c.gate_style == GateStyle::kUnit ? "unit" : "memory"); },
       [](ModelConfig& c, const std::string& v) {
         if (v == "unit") c.gate_style = GateStyle::kUnit;
         else if (v == "memory") c.gate_style = GateStyle::kMemory;
         else throw ConfigError("config: gate_style must be unit or memory, got '" + v + "'");
       }},
      SW_BOOL_FIELD(persistence), SW_BOOL_FIELD(sw_plus_sa),
      SW_SIZE_FIELD(n_s), SW_SIZE_FIELD(n_sel), SW_SIZE_FIELD(rims_input_dim), SW_SIZE_FIELD(rims_pos_dim),
      SW_SIZE_FIELD(rims_key_dim), SW_BOOL_FIELD(rims_broadcast),
      SW_SIZE_FIELD(n_b), SW_SIZE_FIELD(tims_pre), SW_SIZE_FIELD(tims_post),
      {"task", [](const ModelConfig& c) { return std::string(task_name(c.task)); },
       [](ModelConfig& c, const std::string& v) { c.task = parse_task(v); }},
      SW_SIZE_FIELD(image_size), SW_SIZE_FIELD(channels), SW_SIZE_FIELD(patch), SW_SIZE_FIELD(question_bits),
      SW_SIZE_FIELD(n_classes), SW_SIZE_FIELD(vocab), SW_SIZE_FIELD(seq_len),
      SW_SIZE_FIELD(seed), SW_SIZE_FIELD(data_seed), SW_SIZE_FIELD(n_train), SW_SIZE_FIELD(n_test), SW_SIZE_FIELD(batch),
      SW_SIZE_FIELD(epochs), SW_REAL_FIELD(lr), SW_REAL_FIELD(min_lr), SW_REAL_FIELD(weight_decay),
  };
  return fields;
}

#undef SW_SIZE_FIELD
#undef SW_BOOL_FIELD
#undef SW_REAL_FIELD

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

/// Sets one key; used by the parser and by command-line overrides.
inline void set_config_value(ModelConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields())
    if (f.key == key) return f.set(c, value);
  throw ConfigError("config: unknown key '" + key + "'");
}

inline std::string config_value(const ModelConfig& c, const std::string& key) {
  for (const auto& f : detail::config_fields())
    if (f.key == key) return f.get(c);
  throw ConfigError("config: unknown key '" + key + "'");
}

inline std::string to_text(const ModelConfig& c) {
  std::string out = "version = " + std::to_string(kConfigVersion) + "\n";
  for (const auto& f : detail::config_fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

/// Parses the text form. share_layer_params follows the host unless given.
inline ModelConfig parse_config(const std::string& text) {
  ModelConfig c;
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    if (kv.count(key)) throw ConfigError("config: duplicate key '" + key + "'");
    kv[key] = detail::trim(line.substr(eq + 1));
  }
  if (!kv.count("version")) throw ConfigError("config: missing version");
  if (kv["version"] != std::to_string(kConfigVersion))
    throw ConfigError("config: version " + kv["version"] + " is not supported (expected " + std::to_string(kConfigVersion) + ")");
  kv.erase("version");
  if (kv.count("host")) set_config_value(c, "host", kv["host"]);
  c.apply_host_defaults();
  for (const auto& [k, v] : kv) set_config_value(c, k, v);
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace sw
