// SPDX-License-Identifier: Apache-2.0
/**
 * @file   workspace.hpp
 * @brief  Limited-capacity shared workspace: competitive write, gated
 *         memory update and broadcast read.
 *
 * A stage runs three steps:
 *   write      M~ = softmax(M Wq (R We)^T / sqrt(d_e)) R Wv   (per head)
 *   gate       Xbar = mean_i relu(X_i W1);  K = Xbar + tanh(M)
 *              I = sigmoid(K WI + bI);  F = sigmoid(K WF + bF)
 *              M' = I * tanh(M~) + F * M
 *   broadcast  h_k += sum_j softmax_j(h_k Wq^ (m_j We^)^T / sqrt(d_e)) m_j Wv^
 * The memory persists across stages until reset().
 */
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sw/attention.hpp"
#include "sw/nn.hpp"
#include "sw/ops.hpp"

namespace sw {

enum class GateStyle { kUnit, kMemory };

struct WorkspaceConfig {
  std::size_t n_m = 8;          // slots
  std::size_t n_l = 64;         // slot width
  std::size_t n_h = 64;         // specialist state width (broadcast target)
  std::size_t source_dim = 0;   // width of written rows R / gate inputs X; 0 means n_h
  std::size_t heads = 4;
  std::size_t key_dim = 8;      // per head, both write and broadcast
  std::size_t write_iters = 1;
  bool include_memory_rows = false;  // R = [M; A] instead of R = A
  GateStyle gate_style = GateStyle::kUnit;
  Competition competition{};

  std::size_t source() const { return source_dim ? source_dim : n_h; }

  void validate() const {
    if (n_m < 1) throw ConfigError("workspace: n_m must be >= 1");
    if (n_l == 0 || n_h == 0 || heads == 0 || key_dim == 0) throw ConfigError("workspace: zero dimension");
    if (n_l % heads) throw ConfigError("workspace: heads must divide n_l (" + std::to_string(n_l) + ")");
    if (n_h % heads) throw ConfigError("workspace: heads must divide n_h (" + std::to_string(n_h) + ")");
    if (write_iters < 1) throw ConfigError("workspace: write_iters must be >= 1");
    if (include_memory_rows && source() != n_l)
      throw ConfigError("workspace: memory rows can only be concatenated with rows of width n_l");
    if (competition.is_topk() && competition.k < 1) throw ConfigError("workspace: top-k needs k >= 1");
  }

  /// Non-fatal configuration notes for a given specialist count.
  std::vector<std::string> warnings(std::size_t n_s) const {
    std::vector<std::string> w;
    if (n_m >= n_s)
      w.push_back("workspace has " + std::to_string(n_m) + " slots for " + std::to_string(n_s) +
                  " specialists; the bottleneck is not limiting");
    return w;
  }
};

template <class T>
struct WorkspaceState {
  Tensor<T> memory;       // (B, n_m, n_l), or (B*T, n_m, n_l) per position
  Tensor<T> init_memory;  // (n_m, n_l), learned
  std::size_t batch = 0;
  std::size_t positions = 0;  // > 0 for the per-position variant
};

/// Gate parameters. w1 is a single matrix shared by every specialist.
template <class T>
struct GatingParams {
  Tensor<T> w1;        // (source, n_l)
  Tensor<T> w_input;   // (n_l, g), g = n_l for unit gates, 1 for memory gates
  Tensor<T> w_forget;  // (n_l, g)
  Tensor<T> b_input;   // (g)
  Tensor<T> b_forget;  // (g)
  GateStyle style = GateStyle::kUnit;

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".w_input", w_input});
    out.push_back({prefix + ".w_forget", w_forget});
    out.push_back({prefix + ".b_input", b_input});
    out.push_back({prefix + ".b_forget", b_forget});
  }
};

template <class T>
class Workspace {
 public:
  Workspace() = default;

  Workspace(WorkspaceConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t g = cfg_.gate_style == GateStyle::kUnit ? cfg_.n_l : 1;
    init_memory_ = nn::uniform_param<T>({cfg_.n_m, cfg_.n_l}, 0.01, rng, "init_memory");
    write_ = ProjectionSet<T>(cfg_.n_l, cfg_.source(), cfg_.heads, cfg_.key_dim, cfg_.n_l / cfg_.heads, 0, rng);
    gate_.style = cfg_.gate_style;
    gate_.w1 = nn::linear_weight<T>(cfg_.source(), cfg_.n_l, rng, "w1");
    gate_.w_input = nn::linear_weight<T>(cfg_.n_l, g, rng, "w_input");
    gate_.w_forget = nn::linear_weight<T>(cfg_.n_l, g, rng, "w_forget");
    gate_.b_input = nn::constant_param<T>({g}, 0.0, "b_input");
    gate_.b_forget = nn::constant_param<T>({g}, 0.0, "b_forget");
    read_ = ProjectionSet<T>(cfg_.n_h, cfg_.n_l, cfg_.heads, cfg_.key_dim, cfg_.n_h / cfg_.heads, 0, rng);
  }

  const WorkspaceConfig& config() const { return cfg_; }
  ProjectionSet<T>& write_projections() { return write_; }
  ProjectionSet<T>& read_projections() { return read_; }
  GatingParams<T>& gating() { return gate_; }
  Tensor<T>& init_memory() { return init_memory_; }
  const Tensor<T>& init_memory() const { return init_memory_; }
  const ProjectionSet<T>& write_projections() const { return write_; }
  const ProjectionSet<T>& read_projections() const { return read_; }
  const GatingParams<T>& gating() const { return gate_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".init_memory", init_memory_});
    write_.collect(out, prefix + ".write");
    gate_.collect(out, prefix + ".gate");
    read_.collect(out, prefix + ".read");
  }

  /// Episode boundary: memory := learned initial value for every batch
  /// element (and every position in the per-position variant).
  WorkspaceState<T> reset(std::size_t batch, std::size_t positions = 0) const {
    WorkspaceState<T> s;
    s.init_memory = init_memory_;
    s.batch = batch;
    s.positions = positions;
    const std::size_t copies = positions ? batch * positions : batch;
    s.memory = ops::broadcast_to(init_memory_, {copies, cfg_.n_m, cfg_.n_l});
    return s;
  }

  /// Candidate memory from specialist rows R (B, n_s, source).
  Tensor<T> write_step(const WorkspaceState<T>& ws, const Tensor<T>& rows, const RunContext<T>& ctx = {},
                       const Mask* mask = nullptr) const {
    check_rows(rows, ws.memory.dim(0));
    Tensor<T> cur = ws.memory;
    for (std::size_t it = 0; it < cfg_.write_iters; ++it) {
      Tensor<T> kv = cfg_.include_memory_rows ? ops::concat<T>({cur, rows}, 1) : rows;
      AttentionOptions opt;
      opt.mask = mask;
      opt.competition = cfg_.competition;
      opt.exempt_prefix = cfg_.include_memory_rows ? cfg_.n_m : 0;
      opt.dropout = ctx.dropout;
      opt.rng = ctx.rng;
      AttentionOutput<T> att = multihead(cur, kv, write_, opt);
      if (ctx.trace) ctx.trace->add("write", att.weights, att.selected);
      cur = att.values;
    }
    return cur;
  }

  /// Per-position variant: position t's memory only sees rows 0..t.
  /// rows: (B, T, source); ws from reset(B, T). Returns (B*T, n_m, n_l).
  Tensor<T> write_step_causal(const WorkspaceState<T>& ws, const Tensor<T>& rows, const RunContext<T>& ctx = {}) const {
    if (cfg_.include_memory_rows) throw ConfigError("per-position workspace does not support memory rows in R");
    const std::size_t B = rows.dim(0), Tn = rows.dim(1);
    if (ws.positions != Tn || ws.batch != B)
      throw ShapeError("write_step_causal: state for " + std::to_string(ws.positions) + " positions, rows " +
                       to_string(rows.shape()));
    check_rows(rows, B);
    const Mask mask = Mask::causal(Tn * cfg_.n_m, Tn, cfg_.n_m);
    WorkspaceState<T> flat = ws;
    flat.memory = ops::reshape(ws.memory, {B, Tn * cfg_.n_m, cfg_.n_l});
    Tensor<T> cand = write_step(flat, rows, ctx, &mask);
    return ops::reshape(cand, {B * Tn, cfg_.n_m, cfg_.n_l});
  }

  /// Xbar = mean over rows of relu(X W1): (B, n_x, source) -> (B, 1, n_l).
  Tensor<T> summarize_inputs(const Tensor<T>& x) const {
    return ops::mean(ops::relu(ops::matmul(x, gate_.w1)), 1, true);
  }

  /// Running mean over positions 0..t for the per-position variant:
  /// (B, T, source) -> (B*T, 1, n_l).
  Tensor<T> summarize_inputs_causal(const Tensor<T>& x) const {
    const std::size_t B = x.dim(0), Tn = x.dim(1);
    std::vector<T> avg(Tn * Tn, T(0));
    for (std::size_t t = 0; t < Tn; ++t)
      for (std::size_t i = 0; i <= t; ++i) avg[t * Tn + i] = T(1) / static_cast<T>(t + 1);
    Tensor<T> running = ops::matmul(Tensor<T>({Tn, Tn}, std::move(avg)), ops::relu(ops::matmul(x, gate_.w1)));
    return ops::reshape(running, {B * Tn, 1, cfg_.n_l});
  }

  /// M' = I * tanh(M~) + F * M_prev with gates driven by the input summary.
  Tensor<T> gated_update_summary(const Tensor<T>& candidate, const Tensor<T>& summary, const Tensor<T>& prev) const {
    if (candidate.shape() != prev.shape())
      throw ShapeError("gated_update: candidate " + to_string(candidate.shape()) + " vs memory " + to_string(prev.shape()));
    Tensor<T> k = ops::add(summary, ops::tanh(prev));
    Tensor<T> in_gate = ops::sigmoid(ops::add(ops::matmul(k, gate_.w_input), gate_.b_input));
    Tensor<T> forget_gate = ops::sigmoid(ops::add(ops::matmul(k, gate_.w_forget), gate_.b_forget));
    Tensor<T> next = ops::add(ops::mul(in_gate, ops::tanh(candidate)), ops::mul(forget_gate, prev));
    for (T v : next.values())
      if (!std::isfinite(v)) throw NumericError("gated_update: non-finite memory value");
    return next;
  }

  Tensor<T> gated_update(const Tensor<T>& candidate, const Tensor<T>& inputs, const Tensor<T>& prev) const {
    return gated_update_summary(candidate, summarize_inputs(inputs), prev);
  }

  /// attention(h -> memory slots) for all specialists, without the residual.
  Tensor<T> broadcast_update(const WorkspaceState<T>& ws, const Tensor<T>& h, const RunContext<T>& ctx = {}) const {
    if (h.rank() != 3 || h.dim(2) != cfg_.n_h)
      throw ShapeError("broadcast_step: specialists " + to_string(h.shape()) + " do not have width n_h=" +
                       std::to_string(cfg_.n_h));
    AttentionOptions opt;
    opt.dropout = ctx.dropout;
    opt.rng = ctx.rng;
    if (ws.positions) {
      const std::size_t B = h.dim(0), Tn = h.dim(1);
      Tensor<T> q = ops::reshape(h, {B * Tn, 1, cfg_.n_h});
      AttentionOutput<T> att = multihead(q, ws.memory, read_, opt);
      if (ctx.trace) ctx.trace->add("broadcast", att.weights);
      return ops::reshape(att.values, {B, Tn, cfg_.n_h});
    }
    AttentionOutput<T> att = multihead(h, ws.memory, read_, opt);
    if (ctx.trace) ctx.trace->add("broadcast", att.weights);
    return att.values;
  }

  /// h + attention(h -> memory slots), for all specialists.
  Tensor<T> broadcast_step(const WorkspaceState<T>& ws, const Tensor<T>& h, const RunContext<T>& ctx = {}) const {
    return ops::add(h, broadcast_update(ws, h, ctx));
  }

  /// write followed by the gated memory update; leaves specialists untouched.
  void write_and_update(WorkspaceState<T>& ws, const Tensor<T>& rows, const RunContext<T>& ctx = {},
                        const Tensor<T>& inputs = {}) const {
    const Tensor<T>& x = inputs.defined() ? inputs : rows;
    if (ws.positions) {
      Tensor<T> cand = write_step_causal(ws, rows, ctx);
      ws.memory = gated_update_summary(cand, summarize_inputs_causal(x), ws.memory);
    } else {
      Tensor<T> cand = write_step(ws, rows, ctx);
      ws.memory = gated_update(cand, x, ws.memory);
    }
  }

  /// write -> gate -> broadcast. `inputs` feeds the gate summary; rows are
  /// also used when inputs is undefined.
  Tensor<T> stage(WorkspaceState<T>& ws, const Tensor<T>& rows, const Tensor<T>& h, const RunContext<T>& ctx = {},
                  const Tensor<T>& inputs = {}) const {
    write_and_update(ws, rows, ctx, inputs);
    return broadcast_step(ws, h, ctx);
  }

 private:
  void check_rows(const Tensor<T>& rows, std::size_t batch) const {
    if (rows.rank() != 3 || rows.dim(2) != cfg_.source())
      throw ShapeError("write_step: specialist rows " + to_string(rows.shape()) + " do not have width " +
                       std::to_string(cfg_.source()));
    if (rows.dim(1) == 0) throw ConfigError("write_step: empty specialist set");
    if (rows.dim(0) != batch)
      throw ShapeError("write_step: batch " + std::to_string(rows.dim(0)) + " vs memory batch " + std::to_string(batch));
    const auto& v = rows.values();
    const std::size_t n = rows.dim(1), d = rows.dim(2);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i]))
        throw NumericError("write_step: non-finite value in batch " + std::to_string(i / (n * d)) + ", specialist " +
                           std::to_string((i / d) % n) + ", column " + std::to_string(i % d));
  }

  WorkspaceConfig cfg_;
  Tensor<T> init_memory_;
  ProjectionSet<T> write_;
  GatingParams<T> gate_;
  ProjectionSet<T> read_;
};

}  // namespace sw
