// SPDX-License-Identifier: Apache-2.0
/**
 * @file   transformer.hpp
 * @brief  Transformer hosts: TR, TR+HC, TR+SSW, TR+HSW, TR+2xSA, and the
 *         causal per-position workspace variant.
 *
 * Blocks are pre-layer-norm residual:
 *   tr, tr_hc   h += SA(LN1 h)                       h += FFN(LN2 h)
 *   tr_2xsa     h += SA(LN1 h);  h += SA'(LN1' h)     h += FFN(LN2 h)
 *   tr_ssw/hsw  [h += SA(LN' h)]  n = LN1 h;  write n -> M;  h += read(n <- M)
 *                                                    h += FFN(LN2 h)
 * Workspace memory is reset once per forward pass and carried across
 * layers, or reset at every layer when persistence is off. With the causal
 * task every position keeps its own memory copy that only rows <= t write.
 */
#pragma once

#include <optional>

#include "sw/models/common.hpp"
#include "sw/workspace.hpp"

namespace sw {

template <class T>
struct TransformerBlock {
  nn::LayerNorm<T> ln1, ln2, ln_extra;
  ProjectionSet<T> attn;        // tr, tr_hc, tr_2xsa, sw_plus_sa
  ProjectionSet<T> attn_extra;  // second self-attention of tr_2xsa
  nn::FeedForward<T> ffn;
  std::optional<Workspace<T>> ws;

  TransformerBlock() = default;
  TransformerBlock(const ModelConfig& c, Rng& rng) : ln1(c.n_h), ln2(c.n_h), ffn(c.n_h, c.ffn_dim, rng) {
    const bool sw = c.host == Host::kTrSsw || c.host == Host::kTrHsw;
    if (!sw || c.sw_plus_sa) attn = ProjectionSet<T>(c.n_h, c.n_h, c.heads, c.head_dim, c.head_dim, c.n_h, rng);
    if (c.host == Host::kTr2xSa || (sw && c.sw_plus_sa)) ln_extra = nn::LayerNorm<T>(c.n_h);
    if (c.host == Host::kTr2xSa) attn_extra = ProjectionSet<T>(c.n_h, c.n_h, c.heads, c.head_dim, c.head_dim, c.n_h, rng);
    if (sw) ws.emplace(c.workspace(), rng);
  }

  void collect(ParamList<T>& ps, const std::string& p) const {
    ln1.collect(ps, p + ".ln1");
    ln2.collect(ps, p + ".ln2");
    if (ln_extra.gain.defined()) ln_extra.collect(ps, p + ".ln_extra");
    if (attn.w_q.defined()) attn.collect(ps, p + ".attn");
    if (attn_extra.w_q.defined()) attn_extra.collect(ps, p + ".attn_extra");
    ffn.collect(ps, p + ".ffn");
    if (ws) ws->collect(ps, p + ".ws");
  }
};

template <class T>
class TransformerHost : public HostModel<T> {
 public:
  TransformerHost(const ModelConfig& c, Rng& rng) : HostModel<T>(c) {
    const Host h = c.host;
    if (h == Host::kRimsSw || h == Host::kTimsSw) throw ConfigError("TransformerHost cannot build " + std::string(host_name(h)));
    embed_ = Embedder<T>(c, rng);
    const std::size_t n_blocks = c.share_layer_params ? 1 : c.n_layers;
    for (std::size_t i = 0; i < n_blocks; ++i) blocks_.emplace_back(c, rng);
    head_ = OutputHead<T>(c, c.n_h, rng);
  }

  bool has_workspace() const { return blocks_.front().ws.has_value(); }
  const TransformerBlock<T>& block(std::size_t layer) const { return blocks_[this->cfg_.share_layer_params ? 0 : layer]; }
  TransformerBlock<T>& block(std::size_t layer) { return blocks_[this->cfg_.share_layer_params ? 0 : layer]; }

  /// Token rows after the last block, before the output head.
  Tensor<T> encode(const Batch<T>& in, const RunContext<T>& ctx = {}) const {
    const ModelConfig& c = this->cfg_;
    Tensor<T> h = embed_(in);
    const std::size_t B = h.dim(0), n = h.dim(1);
    std::optional<Mask> causal;
    if (c.causal()) causal = Mask::causal(n, n);
    const Mask* mask = causal ? &*causal : nullptr;
    const std::size_t positions = c.causal() ? n : 0;

    WorkspaceState<T> state;
    if (has_workspace()) state = blocks_.front().ws->reset(B, positions);

    for (std::size_t l = 0; l < c.n_layers; ++l) {
      if (ctx.trace) ctx.trace->stage = l;
      const TransformerBlock<T>& blk = block(l);
      if (blk.ws) {
        if (c.sw_plus_sa) h = ops::add(h, self_attention(blk.attn, blk.ln_extra(h), ctx, mask));
        if (!c.persistence && l > 0) state = blocks_.front().ws->reset(B, positions);
        Tensor<T> hn = blk.ln1(h);
        blk.ws->write_and_update(state, hn, ctx);
        h = ops::add(h, blk.ws->broadcast_update(state, hn, ctx));
      } else {
        h = ops::add(h, self_attention(blk.attn, blk.ln1(h), ctx, mask));
        if (blk.attn_extra.w_q.defined())
          h = ops::add(h, self_attention(blk.attn_extra, blk.ln_extra(h), ctx, mask, "self2"));
      }
      h = ops::add(h, blk.ffn(blk.ln2(h)));
    }
    return h;
  }

  Tensor<T> forward(const Batch<T>& in, const RunContext<T>& ctx = {}) const override { return head_(encode(in, ctx)); }

  void collect(ParamList<T>& ps) const override {
    embed_.collect(ps, "embed");
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(ps, "block" + std::to_string(i));
    head_.collect(ps, "head");
  }

 private:
  Embedder<T> embed_;
  std::vector<TransformerBlock<T>> blocks_;
  OutputHead<T> head_;
};

}  // namespace sw
