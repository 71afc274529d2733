// SPDX-License-Identifier: Apache-2.0
/**
 * @file   common.hpp
 * @brief  Pieces shared by every host: the input batch, embeddings, output
 *         heads and the host interface.
 */
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sw/attention.hpp"
#include "sw/models/config.hpp"
#include "sw/nn.hpp"

namespace sw {

/// One minibatch in model-ready form.
template <class T>
struct Batch {
  std::size_t size = 0;
  Tensor<T> patches;        // (B, n_patches, patch_dim), image tasks
  Tensor<T> question;       // (B, 1, question_bits) or undefined
  std::vector<int> tokens;  // B * seq rows, copy task
  /// Class per sample, or B * seq next-token targets with -1 outside the
  /// scored region.
  std::vector<int> labels;
};

/// Non-overlapping patch x patch tiles in row-major order, each flattened
/// as (row, col, channel). pixels: B images of size*size*channels in [0,1].
template <class T>
Tensor<T> patchify(const std::vector<T>& pixels, std::size_t batch, std::size_t size, std::size_t channels, std::size_t patch) {
  const std::size_t per_side = size / patch, pd = patch * patch * channels;
  if (pixels.size() != batch * size * size * channels) throw ShapeError("patchify: pixel buffer size mismatch");
  std::vector<T> out(batch * per_side * per_side * pd);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t py = 0; py < per_side; ++py)
      for (std::size_t px = 0; px < per_side; ++px)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            for (std::size_t c = 0; c < channels; ++c)
              out[o++] = pixels[((b * size + py * patch + y) * size + px * patch + x) * channels + c];
  return Tensor<T>({batch, per_side * per_side, pd}, std::move(out));
}

/// Token rows for transformer-style hosts: CLS + patch embeddings (+ a
/// question token) + learned positions, or token embeddings + positions.
template <class T>
struct Embedder {
  nn::Linear<T> patch_proj, question_proj;
  Tensor<T> cls, pos, tokens;
  ModelConfig cfg;

  Embedder() = default;
  Embedder(const ModelConfig& c, Rng& rng) : cfg(c) {
    const std::size_t n = c.n_tokens();
    if (c.image_task()) {
      patch_proj = nn::Linear<T>(c.patch_dim(), c.n_h, true, rng);
      cls = nn::uniform_param<T>({1, 1, c.n_h}, 0.02, rng, "cls");
      if (c.question_bits) question_proj = nn::Linear<T>(c.question_bits, c.n_h, true, rng);
    } else {
      tokens = nn::uniform_param<T>({c.vocab + 1, c.n_h}, 1.0, rng, "tokens");
    }
    pos = nn::uniform_param<T>({n, c.n_h}, 0.02, rng, "pos");
  }

  Tensor<T> operator()(const Batch<T>& in) const {
    const std::size_t B = in.size;
    Tensor<T> x;
    if (cfg.image_task()) {
      if (!in.patches.defined() || in.patches.dim(1) != cfg.n_patches())
        throw ShapeError("embedder: expected " + std::to_string(cfg.n_patches()) + " patches per image");
      std::vector<Tensor<T>> rows{ops::broadcast_to(cls, {B, 1, cfg.n_h}), patch_proj(in.patches)};
      if (cfg.question_bits) {
        if (!in.question.defined()) throw ShapeError("embedder: task needs a question input");
        rows.push_back(question_proj(in.question));
      }
      x = ops::concat(rows, 1);
    } else {
      const std::size_t n = in.tokens.size() / B;
      if (n > cfg.n_tokens())
        throw ConfigError("sequence length " + std::to_string(n) + " exceeds the configured maximum " +
                          std::to_string(cfg.n_tokens()));
      x = ops::embedding(tokens, in.tokens, {B, n});
    }
    const std::size_t n = x.dim(1);
    return ops::add(x, n == cfg.n_tokens() ? pos : ops::slice(pos, 0, 0, n));
  }

  void collect(ParamList<T>& ps, const std::string& prefix) const {
    if (cfg.image_task()) {
      patch_proj.collect(ps, prefix + ".patch");
      ps.push_back({prefix + ".cls", cls});
      if (cfg.question_bits) question_proj.collect(ps, prefix + ".question");
    } else {
      ps.push_back({prefix + ".tokens", tokens});
    }
    ps.push_back({prefix + ".pos", pos});
  }
};

/// Final layer norm + linear classifier on the CLS row, or on every row for
/// the causal task (output (B*n, vocab)).
template <class T>
struct OutputHead {
  nn::LayerNorm<T> ln;
  nn::Linear<T> out;
  bool per_position = false;

  OutputHead() = default;
  OutputHead(const ModelConfig& c, std::size_t width, Rng& rng)
      : ln(width), out(width, c.causal() ? c.vocab : c.n_classes, true, rng), per_position(c.causal()) {}

  Tensor<T> operator()(const Tensor<T>& h) const {
    if (per_position) {
      Tensor<T> y = out(ln(h));
      return ops::reshape(y, {h.dim(0) * h.dim(1), y.dim(2)});
    }
    Tensor<T> first = h.rank() == 3 ? ops::reshape(ops::slice(h, 1, 0, 1), {h.dim(0), h.dim(2)}) : h;
    return out(ln(first));
  }

  void collect(ParamList<T>& ps, const std::string& prefix) const {
    ln.collect(ps, prefix + ".ln");
    out.collect(ps, prefix + ".out");
  }
};

/// Pairwise multi-head self-attention over the token rows.
template <class T>
Tensor<T> self_attention(const ProjectionSet<T>& proj, const Tensor<T>& x, const RunContext<T>& ctx,
                         const Mask* mask = nullptr, const char* site = "self") {
  AttentionOptions opt;
  opt.mask = mask;
  opt.dropout = ctx.dropout;
  opt.rng = ctx.rng;
  AttentionOutput<T> att = multihead(x, x, proj, opt);
  if (ctx.trace) ctx.trace->add(site, att.weights);
  return att.values;
}

/// Interface of every host architecture.
template <class T>
class HostModel {
 public:
  virtual ~HostModel() = default;
  /// Logits (B, n_classes), or (B*n, vocab) for the causal task.
  virtual Tensor<T> forward(const Batch<T>& in, const RunContext<T>& ctx = {}) const = 0;
  virtual void collect(ParamList<T>& ps) const = 0;
  const ModelConfig& config() const { return cfg_; }

  ParamList<T> parameters() const {
    ParamList<T> ps;
    collect(ps);
    return ps;
  }

 protected:
  explicit HostModel(const ModelConfig& c) : cfg_(c) { cfg_.validate(); }
  ModelConfig cfg_;
};

}  // namespace sw
