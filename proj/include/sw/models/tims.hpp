// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tims.hpp
 * @brief  TIMs host: a transformer whose middle layers are split into n_b
 *         mechanisms that compete per position and communicate only through
 *         the shared workspace.
 *
 * Modular layer, with h^k the k-th D/n_b column block of h (T x D):
 *   c      = softmax_k(h^k Wc_k)                  per position, (T, n_b)
 *   c*     = c on the top n_sel mechanisms of each position, 0 elsewhere
 *   hbar^k = h^k + c*_k * SA_k(LN_k h^k)
 *   a      = [c*_k * hbar^k]_k  reshaped (B*T, n_b, D/n_b);  A = a Wv
 *   write  R = [M; A] per position;  gated update with X = A
 *   h^k    = hbar^k + read(hbar^k <- M)
 * Layout: tims_pre monolithic layers, n_layers modular layers sharing
 * parameters, tims_post monolithic layers. Position-wise FFN blocks follow
 * every layer.
 */
#pragma once

#include "sw/models/transformer.hpp"

namespace sw {

template <class T>
struct TimsLayer {
  std::size_t n_b = 0, n_sel = 0, width = 0;  // width = D / n_b
  Tensor<T> w_c;  // (n_b, width)
  std::vector<nn::LayerNorm<T>> ln;
  std::vector<ProjectionSet<T>> attn;
  Tensor<T> w_v;  // (width, n_l)
  Workspace<T> ws;

  TimsLayer() = default;
  TimsLayer(const ModelConfig& c, Rng& rng) : n_b(c.n_b), n_sel(c.n_sel), width(c.n_h / c.n_b) {
    w_c = nn::uniform_param<T>({n_b, width}, 1.0 / std::sqrt(static_cast<double>(width)), rng, "w_c");
    const std::size_t hd = width / c.heads;
    for (std::size_t k = 0; k < n_b; ++k) {
      ln.emplace_back(width);
      attn.emplace_back(width, width, c.heads, hd, hd, width, rng);
    }
    w_v = nn::linear_weight<T>(width, c.slot_width(), rng, "w_v");
    WorkspaceConfig w = c.workspace();
    w.n_h = width;
    w.source_dim = w.n_l;
    w.include_memory_rows = true;
    ws = Workspace<T>(w, rng);
  }

  void collect(ParamList<T>& ps, const std::string& p) const {
    ps.push_back({p + ".w_c", w_c});
    for (std::size_t k = 0; k < n_b; ++k) {
      ln[k].collect(ps, p + ".ln" + std::to_string(k));
      attn[k].collect(ps, p + ".attn" + std::to_string(k));
    }
    ps.push_back({p + ".w_v", w_v});
    ws.collect(ps, p + ".ws");
  }
};

/// One modular layer. h: (B, T, D); state: memory for B*T positions.
template <class T>
Tensor<T> tims_sw_layer(const TimsLayer<T>& layer, WorkspaceState<T>& state, const Tensor<T>& h,
                        const RunContext<T>& ctx = {}, const Mask* mask = nullptr) {
  const std::size_t B = h.dim(0), Tn = h.dim(1), D = h.dim(2), nb = layer.n_b, w = layer.width;
  if (D != nb * w) throw ShapeError("tims_sw_layer: width " + std::to_string(D) + " is not n_b * " + std::to_string(w));

  Tensor<T> c = ops::softmax(ops::sum(ops::mul(ops::reshape(h, {B, Tn, nb, w}), layer.w_c), 3));  // (B, T, n_b)
  std::vector<T> keep(B * Tn * nb, T(0));
  std::vector<std::vector<std::size_t>> active(B * Tn);
  for (std::size_t r = 0; r < B * Tn; ++r) {
    active[r] = detail::topk_indices(std::span<const T>(c.values().data() + r * nb, nb), layer.n_sel);
    std::sort(active[r].begin(), active[r].end());
    for (std::size_t k : active[r]) keep[r * nb + k] = T(1);
  }
  if (ctx.trace) ctx.trace->add("select", c, active);
  Tensor<T> cstar = ops::mul(c, Tensor<T>({B, Tn, nb}, std::move(keep)));

  std::vector<Tensor<T>> hbar_parts, a_parts;
  for (std::size_t k = 0; k < nb; ++k) {
    Tensor<T> hk = ops::slice(h, 2, k * w, w);
    Tensor<T> ck = ops::slice(cstar, 2, k, 1);
    Tensor<T> hbar_k = ops::add(hk, ops::mul(ck, self_attention(layer.attn[k], layer.ln[k](hk), ctx, mask)));
    a_parts.push_back(ops::mul(ck, hbar_k));
    hbar_parts.push_back(std::move(hbar_k));
  }
  Tensor<T> hbar = ops::reshape(ops::concat(hbar_parts, 2), {B * Tn, nb, w});
  Tensor<T> A = ops::matmul(ops::reshape(ops::concat(a_parts, 2), {B * Tn, nb, w}), layer.w_v);
  layer.ws.write_and_update(state, A, ctx);
  Tensor<T> out = ops::add(hbar, layer.ws.broadcast_update(state, hbar, ctx));
  return ops::reshape(out, {B, Tn, D});
}

template <class T>
class TimsHost : public HostModel<T> {
 public:
  TimsHost(const ModelConfig& c, Rng& rng) : HostModel<T>(c) {
    if (c.host != Host::kTimsSw) throw ConfigError("TimsHost builds tims_sw only");
    ModelConfig mono = c;
    mono.host = Host::kTrHc;
    mono.share_layer_params = false;
    embed_ = Embedder<T>(c, rng);
    for (std::size_t i = 0; i < c.tims_pre; ++i) pre_.emplace_back(mono, rng);
    layer_ = TimsLayer<T>(c, rng);
    ln_ffn_ = nn::LayerNorm<T>(c.n_h);
    ffn_ = nn::FeedForward<T>(c.n_h, c.ffn_dim, rng);
    for (std::size_t i = 0; i < c.tims_post; ++i) post_.emplace_back(mono, rng);
    head_ = OutputHead<T>(c, c.n_h, rng);
  }

  const TimsLayer<T>& layer() const { return layer_; }

  Tensor<T> forward(const Batch<T>& in, const RunContext<T>& ctx = {}) const override {
    const ModelConfig& c = this->cfg_;
    Tensor<T> h = embed_(in);
    const std::size_t B = h.dim(0), n = h.dim(1);
    std::optional<Mask> causal;
    if (c.causal()) causal = Mask::causal(n, n);
    const Mask* mask = causal ? &*causal : nullptr;
    std::size_t stage = 0;
    auto mono = [&](const TransformerBlock<T>& blk) {
      if (ctx.trace) ctx.trace->stage = stage++;
      h = ops::add(h, self_attention(blk.attn, blk.ln1(h), ctx, mask));
      h = ops::add(h, blk.ffn(blk.ln2(h)));
    };
    for (const auto& blk : pre_) mono(blk);
    WorkspaceState<T> state = layer_.ws.reset(B * n);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      if (ctx.trace) ctx.trace->stage = stage++;
      if (!c.persistence && l > 0) state = layer_.ws.reset(B * n);
      h = tims_sw_layer(layer_, state, h, ctx, mask);
      h = ops::add(h, ffn_(ln_ffn_(h)));
    }
    for (const auto& blk : post_) mono(blk);
    return head_(h);
  }

  void collect(ParamList<T>& ps) const override {
    embed_.collect(ps, "embed");
    for (std::size_t i = 0; i < pre_.size(); ++i) pre_[i].collect(ps, "pre" + std::to_string(i));
    layer_.collect(ps, "modular");
    ln_ffn_.collect(ps, "modular.ln_ffn");
    ffn_.collect(ps, "modular.ffn");
    for (std::size_t i = 0; i < post_.size(); ++i) post_[i].collect(ps, "post" + std::to_string(i));
    head_.collect(ps, "head");
  }

 private:
  Embedder<T> embed_;
  std::vector<TransformerBlock<T>> pre_, post_;
  TimsLayer<T> layer_;
  nn::LayerNorm<T> ln_ffn_;
  nn::FeedForward<T> ffn_;
  OutputHead<T> head_;
};

}  // namespace sw
