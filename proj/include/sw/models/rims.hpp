// SPDX-License-Identifier: Apache-2.0
/**
 * @file   rims.hpp
 * @brief  RIMs host with a shared workspace replacing specialist-to-
 *         specialist attention.
 *
 * One step per image row of patches:
 *   z      = [enc(patch_p) ; e_p] for every patch p of the row (+ question),
 *            plus a learned null row
 *   s_k    = softmax(h_k Wq_k (z We)^T / sqrt(d)),  a_k = s_k z Wv
 *   F      = the n_sel specialists with the least attention on the null row
 *   hbar_k = GRU_k(a_k, h_k) for k in F, h_k otherwise
 *   write  R = [M; A], A = rows a_k, k in F;  gated update with X = A
 *   h_k    = hbar_k + read(hbar_k <- M) for every k
 */
#pragma once

#include <algorithm>

#include "sw/models/common.hpp"
#include "sw/workspace.hpp"

namespace sw {

/// n_s independent GRU cells evaluated as one batched product.
template <class T>
struct GruBank {
  Tensor<T> w_x, w_h, b_x, b_h;  // (n_s, in, 3h), (n_s, h, 3h), (n_s, 1, 3h) x2
  std::size_t hidden = 0;

  GruBank() = default;
  GruBank(std::size_t n_s, std::size_t in, std::size_t h, Rng& rng) : hidden(h) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(h));
    w_x = nn::uniform_param<T>({n_s, in, 3 * h}, bound, rng, "w_x");
    w_h = nn::uniform_param<T>({n_s, h, 3 * h}, bound, rng, "w_h");
    b_x = nn::uniform_param<T>({n_s, 1, 3 * h}, bound, rng, "b_x");
    b_h = nn::uniform_param<T>({n_s, 1, 3 * h}, bound, rng, "b_h");
  }

  /// x: (B, n_s, in), h: (B, n_s, hidden) -> (B, n_s, hidden).
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& h) const {
    const std::vector<std::size_t> swap{1, 0, 2};
    Tensor<T> hs = ops::permute(h, swap);
    Tensor<T> gx = ops::add(ops::matmul(ops::permute(x, swap), w_x), b_x);
    Tensor<T> gh = ops::add(ops::matmul(hs, w_h), b_h);
    const std::size_t H = hidden;
    Tensor<T> r = ops::sigmoid(ops::add(ops::slice(gx, 2, 0, H), ops::slice(gh, 2, 0, H)));
    Tensor<T> z = ops::sigmoid(ops::add(ops::slice(gx, 2, H, H), ops::slice(gh, 2, H, H)));
    Tensor<T> n = ops::tanh(ops::add(ops::slice(gx, 2, 2 * H, H), ops::mul(r, ops::slice(gh, 2, 2 * H, H))));
    Tensor<T> next = ops::add(n, ops::mul(z, ops::sub(hs, n)));  // (1-z) n + z h
    return ops::permute(next, swap);
  }

  void collect(ParamList<T>& ps, const std::string& p) const {
    ps.push_back({p + ".w_x", w_x});
    ps.push_back({p + ".w_h", w_h});
    ps.push_back({p + ".b_x", b_x});
    ps.push_back({p + ".b_h", b_h});
  }
};

struct RimsSelection {
  std::vector<std::vector<std::size_t>> active;  // per batch element, ascending
};

template <class T>
struct RimsCell {
  Tensor<T> w_q;   // (n_s, n_h, d_key), one query projection per specialist
  Tensor<T> w_e;   // (d_z, d_key), shared
  Tensor<T> w_v;   // (d_z, n_l), shared
  Tensor<T> null_row;  // (1, 1, d_z)
  GruBank<T> gru;
  std::size_t n_s = 0, n_sel = 0;
  bool broadcast = true;

  RimsCell() = default;
  RimsCell(const ModelConfig& c, std::size_t d_z, Rng& rng) : n_s(c.n_s), n_sel(c.n_sel), broadcast(c.rims_broadcast) {
    w_q = nn::uniform_param<T>({c.n_s, c.n_h, c.rims_key_dim}, 1.0 / std::sqrt(static_cast<double>(c.n_h)), rng, "w_q");
    w_e = nn::linear_weight<T>(d_z, c.rims_key_dim, rng, "w_e");
    w_v = nn::linear_weight<T>(d_z, c.slot_width(), rng, "w_v");
    null_row = nn::uniform_param<T>({1, 1, d_z}, 0.02, rng, "null");
    gru = GruBank<T>(c.n_s, c.slot_width(), c.n_h, rng);
  }

  void collect(ParamList<T>& ps, const std::string& p) const {
    ps.push_back({p + ".w_q", w_q});
    ps.push_back({p + ".w_e", w_e});
    ps.push_back({p + ".w_v", w_v});
    ps.push_back({p + ".null", null_row});
    gru.collect(ps, p + ".gru");
  }
};

/// One RIMs step with workspace communication. z: (B, n_in, d_z) without the
/// null row; h: (B, n_s, n_h). Updates `state` and returns the new h.
template <class T>
Tensor<T> rims_sw_step(const RimsCell<T>& cell, const Workspace<T>& ws, WorkspaceState<T>& state, const Tensor<T>& z,
                       const Tensor<T>& h, const RunContext<T>& ctx = {}, RimsSelection* selection = nullptr) {
  const std::size_t B = z.dim(0), n_in = z.dim(1), d_z = z.dim(2), n_s = cell.n_s;
  if (cell.n_sel < 1 || cell.n_sel > n_s)
    throw ConfigError("rims_sw_step: n_sel=" + std::to_string(cell.n_sel) + " outside [1," + std::to_string(n_s) + "]");
  if (h.rank() != 3 || h.dim(0) != B || h.dim(1) != n_s) throw ShapeError("rims_sw_step: state " + to_string(h.shape()));

  Tensor<T> zz = ops::concat<T>({z, ops::broadcast_to(cell.null_row, {B, 1, d_z})}, 1);
  const std::vector<std::size_t> swap{1, 0, 2};
  Tensor<T> q = ops::permute(ops::matmul(ops::permute(h, swap), cell.w_q), swap);
  AttentionOptions opt;
  opt.dropout = ctx.dropout;
  opt.rng = ctx.rng;
  AttentionOutput<T> in_att = scaled_dot_attention(q, ops::matmul(zz, cell.w_e), ops::matmul(zz, cell.w_v), opt);
  const Tensor<T>& a = in_att.values;  // (B, n_s, n_l)

  // Rank by attention not spent on the null row.
  const std::size_t nk = n_in + 1, H = h.dim(2);
  std::vector<std::uint8_t> keep(B * n_s * H, 0);
  std::vector<std::size_t> rows;
  RimsSelection sel;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> score(n_s);
    for (std::size_t k = 0; k < n_s; ++k)
      score[k] = 1.0 - static_cast<double>(in_att.weights[(b * n_s + k) * nk + n_in]);
    std::vector<std::size_t> top = detail::topk_indices(std::span<const double>(score), cell.n_sel);
    std::sort(top.begin(), top.end());
    for (std::size_t k : top) {
      std::fill_n(keep.begin() + static_cast<long>((b * n_s + k) * H), H, std::uint8_t{1});
      rows.push_back(k);
    }
    sel.active.push_back(std::move(top));
  }
  if (ctx.trace) {
    ctx.trace->add("input", in_att.weights);
    ctx.trace->add("select", Tensor<T>({B, n_s}), sel.active);
  }
  if (selection) *selection = sel;

  Tensor<T> hbar = ops::where(keep, cell.gru(a, h), h);
  Tensor<T> A = ops::gather_rows(a, rows, cell.n_sel);
  ws.write_and_update(state, A, ctx);
  if (!cell.broadcast) return hbar;
  return ops::add(hbar, ws.broadcast_update(state, hbar, ctx));
}

template <class T>
class RimsHost : public HostModel<T> {
 public:
  RimsHost(const ModelConfig& c, Rng& rng) : HostModel<T>(c) {
    if (c.host != Host::kRimsSw) throw ConfigError("RimsHost builds rims_sw only");
    per_row_ = c.image_size / c.patch;
    d_z_ = c.rims_input_dim + c.rims_pos_dim;
    encoder_ = nn::Linear<T>(c.patch_dim(), c.rims_input_dim, true, rng);
    pos_ = nn::uniform_param<T>({per_row_, c.rims_pos_dim}, 1.0, rng, "pos");
    if (c.question_bits) question_ = nn::Linear<T>(c.question_bits, d_z_, true, rng);
    cell_ = RimsCell<T>(c, d_z_, rng);
    WorkspaceConfig w = c.workspace();
    w.source_dim = w.n_l;
    w.include_memory_rows = true;
    if (w.competition.is_topk() && w.competition.k > c.n_sel) throw ConfigError("rims_sw: topk exceeds n_sel");
    ws_ = Workspace<T>(w, rng);
    head_ = OutputHead<T>(c, c.n_s * c.n_h, rng);
  }

  const RimsCell<T>& cell() const { return cell_; }
  const Workspace<T>& workspace() const { return ws_; }

  /// Inputs of step t: encoded patches of image row t with position codes.
  Tensor<T> step_inputs(const Batch<T>& in, std::size_t t) const {
    const std::size_t B = in.size;
    Tensor<T> row = ops::slice(in.patches, 1, t * per_row_, per_row_);
    Tensor<T> z = ops::concat<T>({encoder_(row), ops::broadcast_to(pos_, {B, per_row_, this->cfg_.rims_pos_dim})}, 2);
    if (this->cfg_.question_bits) z = ops::concat<T>({z, question_(in.question)}, 1);
    return z;
  }

  Tensor<T> forward(const Batch<T>& in, const RunContext<T>& ctx = {}) const override {
    const ModelConfig& c = this->cfg_;
    const std::size_t B = in.size;
    if (!in.patches.defined() || in.patches.dim(1) != c.n_patches()) throw ShapeError("rims_sw: bad patch input");
    Tensor<T> h({B, c.n_s, c.n_h});
    WorkspaceState<T> state = ws_.reset(B);
    for (std::size_t t = 0; t < per_row_; ++t) {
      if (ctx.trace) ctx.trace->stage = t;
      if (!c.persistence && t > 0) state = ws_.reset(B);
      h = rims_sw_step(cell_, ws_, state, step_inputs(in, t), h, ctx);
    }
    return head_(ops::reshape(h, {B, c.n_s * c.n_h}));
  }

  void collect(ParamList<T>& ps) const override {
    encoder_.collect(ps, "encoder");
    ps.push_back({"pos", pos_});
    if (this->cfg_.question_bits) question_.collect(ps, "question");
    cell_.collect(ps, "cell");
    ws_.collect(ps, "ws");
    head_.collect(ps, "head");
  }

 private:
  std::size_t per_row_ = 0, d_z_ = 0;
  nn::Linear<T> encoder_, question_;
  Tensor<T> pos_;
  RimsCell<T> cell_;
  Workspace<T> ws_;
  OutputHead<T> head_;
};

}  // namespace sw
