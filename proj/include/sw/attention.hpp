// SPDX-License-Identifier: Apache-2.0
/**
 * @file   attention.hpp
 * @brief  Scaled dot-product attention, the multi-head wrapper, and top-k
 *         competition.
 *
 * Top-k competition keeps the full softmax and zeroes the entries outside
 * the k highest pre-softmax scores of each row, without renormalizing.
 * With k equal to the row length the weights are bit-identical to the soft
 * path.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "sw/nn.hpp"
#include "sw/ops.hpp"

namespace sw {

struct Competition {
  enum class Kind { kSoft, kTopK };
  Kind kind = Kind::kSoft;
  std::size_t k = 0;

  static Competition soft() { return {}; }
  static Competition topk(std::size_t k) { return {Kind::kTopK, k}; }
  bool is_topk() const { return kind == Kind::kTopK; }
};

/// Chosen indices of one score row, in descending score order.
struct SelectionResult {
  std::vector<std::size_t> indices;
  std::vector<double> scores;
};

namespace detail {

/// Indices of the k largest scores among `allowed` (all when empty), ties to
/// the lower index.
template <class T>
std::vector<std::size_t> topk_indices(std::span<const T> scores, std::size_t k,
                                      std::span<const std::uint8_t> allowed = {}) {
  std::vector<std::size_t> idx;
  idx.reserve(scores.size());
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (allowed.empty() || allowed[j]) idx.push_back(j);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });
  idx.resize(k);
  return idx;
}

}  // namespace detail

/// Picks the k highest scores. Requires 1 <= k <= scores.size().
template <class T>
SelectionResult topk_select(std::span<const T> scores, std::size_t k) {
  if (k < 1 || k > scores.size())
    throw ConfigError("topk_select: k=" + std::to_string(k) + " outside [1," + std::to_string(scores.size()) + "]");
  SelectionResult r;
  r.indices = detail::topk_indices(scores, k);
  for (auto i : r.indices) r.scores.push_back(static_cast<double>(scores[i]));
  return r;
}

template <class T>
struct AttentionOutput {
  Tensor<T> values;   // (..., n_queries, value_dim)
  Tensor<T> weights;  // (..., n_queries, n_keys), after competition
  /// Per flattened query row, the indices retained by top-k competition.
  std::vector<std::vector<std::size_t>> selected;
};

/// Attention maps captured during a forward pass, for dumps.
template <class T>
struct AttentionTrace {
  struct Record {
    std::string site;  // "write", "broadcast", "self", "select", ...
    std::size_t stage = 0;
    Tensor<T> weights;
    std::vector<std::vector<std::size_t>> selected;
  };
  std::size_t stage = 0;
  std::vector<Record> records;

  void add(std::string site, Tensor<T> w, std::vector<std::vector<std::size_t>> sel = {}) {
    records.push_back({std::move(site), stage, w.detach(), std::move(sel)});
  }
};

/// Per-forward settings threaded through the host models.
template <class T>
struct RunContext {
  double dropout = 0.0;  // attention-weight dropout, training only
  Rng* rng = nullptr;
  AttentionTrace<T>* trace = nullptr;
};

struct AttentionOptions {
  const Mask* mask = nullptr;
  Competition competition{};
  /// Leading key columns that bypass the competition (always retained).
  std::size_t exempt_prefix = 0;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

/// softmax(q k^T / sqrt(d_e)) v over the last two axes; leading axes batch.
template <class T>
AttentionOutput<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        const AttentionOptions& opt = {}) {
  const std::size_t de = q.shape().back();
  if (de == 0) throw ConfigError("scaled_dot_attention: key dimension is zero");
  if (k.shape().back() != de)
    throw ShapeError("scaled_dot_attention: query/key dims differ: " + to_string(q.shape()) + " vs " + to_string(k.shape()));
  if (k.shape()[k.rank() - 2] != v.shape()[v.rank() - 2])
    throw ShapeError("scaled_dot_attention: key/value counts differ: " + to_string(k.shape()) + " vs " + to_string(v.shape()));

  Tensor<T> scores = ops::scale(ops::matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(de))));
  AttentionOutput<T> out;
  Tensor<T> w = ops::softmax(scores, opt.mask);

  if (opt.competition.is_topk()) {
    const std::size_t nk = scores.shape().back();
    const std::size_t rows = scores.numel() / nk;
    const std::size_t pre = std::min(opt.exempt_prefix, nk);
    // Under a mask a row may have fewer visible candidates than k; those
    // rows keep every visible key.
    if (opt.competition.k < 1 || (!opt.mask && opt.competition.k > nk - pre))
      throw ConfigError("top-k competition: k=" + std::to_string(opt.competition.k) + " outside [1," +
                        std::to_string(nk - pre) + "]");
    std::vector<T> keep(scores.numel(), T(0));
    std::vector<std::uint8_t> allowed(nk, 1);
    const std::size_t mask_n = opt.mask ? opt.mask->keep.size() : 0;
    out.selected.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * nk;
      for (std::size_t j = 0; j < nk; ++j) allowed[j] = (j >= pre) && (!opt.mask || opt.mask->keep[(base + j) % mask_n]);
      for (std::size_t j = 0; j < pre; ++j) keep[base + j] = T(1);
      auto sel = detail::topk_indices(std::span<const T>(scores.values().data() + base, nk), opt.competition.k,
                                      std::span<const std::uint8_t>(allowed));
      for (auto j : sel) keep[base + j] = T(1);
      out.selected[r] = std::move(sel);
    }
    w = ops::mul(w, Tensor<T>(scores.shape(), std::move(keep)));
  }
  if (opt.dropout > 0.0 && opt.rng) w = ops::dropout(w, opt.dropout, *opt.rng);
  out.values = ops::matmul(w, v);
  out.weights = w;
  return out;
}

/// Query/key/value projections for multi-head attention; w_o is optional
/// (absent means the concatenated heads are the output).
template <class T>
struct ProjectionSet {
  Tensor<T> w_q;  // (query_in, n_heads * head_dim)
  Tensor<T> w_e;  // (kv_in, n_heads * head_dim)
  Tensor<T> w_v;  // (kv_in, n_heads * value_dim)
  Tensor<T> w_o;  // (n_heads * value_dim, out) or undefined
  std::size_t n_heads = 1;
  std::size_t head_dim = 0;
  std::size_t value_dim = 0;

  ProjectionSet() = default;
  ProjectionSet(std::size_t query_in, std::size_t kv_in, std::size_t heads, std::size_t key_dim, std::size_t val_dim,
                std::size_t out_dim, Rng& rng)
      : n_heads(heads), head_dim(key_dim), value_dim(val_dim) {
    if (heads == 0 || key_dim == 0 || val_dim == 0) throw ConfigError("projection set needs nonzero heads and dims");
    w_q = nn::linear_weight<T>(query_in, heads * key_dim, rng, "w_q");
    w_e = nn::linear_weight<T>(kv_in, heads * key_dim, rng, "w_e");
    w_v = nn::linear_weight<T>(kv_in, heads * val_dim, rng, "w_v");
    if (out_dim) w_o = nn::linear_weight<T>(heads * val_dim, out_dim, rng, "w_o");
  }

  std::size_t output_dim() const { return w_o.defined() ? w_o.dim(1) : n_heads * value_dim; }

  void validate() const {
    if (w_q.dim(1) != n_heads * head_dim || w_e.dim(1) != n_heads * head_dim)
      throw ConfigError("projection set: query/key width " + std::to_string(w_q.dim(1)) + " is not n_heads*head_dim = " +
                        std::to_string(n_heads * head_dim));
    if (w_v.dim(1) != n_heads * value_dim)
      throw ConfigError("projection set: value width " + std::to_string(w_v.dim(1)) + " is not n_heads*value_dim = " +
                        std::to_string(n_heads * value_dim));
    if (w_o.defined() && w_o.dim(0) != n_heads * value_dim) throw ConfigError("projection set: output projection width mismatch");
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w_q", w_q});
    out.push_back({prefix + ".w_e", w_e});
    out.push_back({prefix + ".w_v", w_v});
    if (w_o.defined()) out.push_back({prefix + ".w_o", w_o});
  }
};

namespace detail {

/// (B, n, H*d) -> (B, H, n, d)
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t B = x.dim(0), n = x.dim(1), d = x.dim(2) / heads;
  if (heads == 1) return ops::reshape(x, {B, 1, n, d});
  return ops::permute(ops::reshape(x, {B, n, heads, d}), {0, 2, 1, 3});
}

/// (B, H, n, d) -> (B, n, H*d)
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::size_t B = x.dim(0), H = x.dim(1), n = x.dim(2), d = x.dim(3);
  if (H == 1) return ops::reshape(x, {B, n, d});
  return ops::reshape(ops::permute(x, {0, 2, 1, 3}), {B, n, H * d});
}

}  // namespace detail

/// Multi-head attention: queries from `query_in` (B, nq, dq), keys/values from
/// `kv_in` (B, nk, dkv). Returned weights have shape (B, H, nq, nk).
template <class T>
AttentionOutput<T> multihead(const Tensor<T>& query_in, const Tensor<T>& kv_in, const ProjectionSet<T>& proj,
                             const AttentionOptions& opt = {}) {
  proj.validate();
  if (query_in.rank() != 3 || kv_in.rank() != 3 || query_in.dim(0) != kv_in.dim(0))
    throw ShapeError("multihead expects (B,n,d) inputs with equal batch, got " + to_string(query_in.shape()) + " and " +
                     to_string(kv_in.shape()));
  if (query_in.dim(2) != proj.w_q.dim(0) || kv_in.dim(2) != proj.w_e.dim(0))
    throw ConfigError("multihead: input dims " + to_string(query_in.shape()) + " / " + to_string(kv_in.shape()) +
                      " do not match projections");
  const std::size_t H = proj.n_heads;
  Tensor<T> q = detail::split_heads(ops::matmul(query_in, proj.w_q), H);
  Tensor<T> k = detail::split_heads(ops::matmul(kv_in, proj.w_e), H);
  Tensor<T> v = detail::split_heads(ops::matmul(kv_in, proj.w_v), H);
  AttentionOutput<T> att = scaled_dot_attention(q, k, v, opt);
  Tensor<T> merged = detail::merge_heads(att.values);
  att.values = proj.w_o.defined() ? ops::matmul(merged, proj.w_o) : merged;
  return att;
}

}  // namespace sw
