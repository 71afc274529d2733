// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ops.hpp
 * @brief  Differentiable tensor operations.
 *
 * Every op computes its forward value eagerly and, when recording, attaches
 * a closure that accumulates into the parents' gradient buffers. Reductions
 * run sequentially over the leading index so results are reproducible.
 * Dense products go through Eigen's single-threaded GEMM.
 */
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sw/rng.hpp"
#include "sw/tensor.hpp"

namespace sw {

/// Value written into masked logits before softmax.
inline constexpr double kMaskSentinel = -1e9;

/// Keep-mask for softmax. Its shape must be a suffix of the logits' shape;
/// it is broadcast over the remaining leading dimensions.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> keep;

  static Mask all(Shape s) {
    Mask m{std::move(s), {}};
    m.keep.assign(sw::numel(m.shape), 1);
    return m;
  }
  /// Row q may see key j iff j <= q / group. With group = 1 this is the
  /// usual causal mask; group = n_m gives the per-position memory layout
  /// where rows are (position, slot) pairs.
  static Mask causal(std::size_t rows, std::size_t cols, std::size_t group = 1) {
    Mask m{{rows, cols}, std::vector<std::uint8_t>(rows * cols, 0)};
    for (std::size_t q = 0; q < rows; ++q)
      for (std::size_t j = 0; j < cols && j <= q / group; ++j) m.keep[q * cols + j] = 1;
    return m;
  }
};

namespace ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

template <class T>
void accumulate(Node<T>& parent, const std::vector<T>& g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) parent.grad[i] += g[i];
}

inline Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

/// Numpy-style broadcast of two shapes; per-output-dim strides into each
/// operand (0 where broadcast).
struct Broadcast {
  Shape out;
  Shape sa, sb;
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(r, 1);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  const Shape ast = strides_of(a), bst = strides_of(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ai = i + a.size() >= r ? i + a.size() - r : SIZE_MAX;
    const std::size_t bi = i + b.size() >= r ? i + b.size() - r : SIZE_MAX;
    const std::size_t da = ai == SIZE_MAX ? 1 : a[ai];
    const std::size_t db = bi == SIZE_MAX ? 1 : b[bi];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    p.out[i] = std::max(da, db);
    if (da != 1) p.sa[i] = ast[ai];
    if (db != 1) p.sb[i] = bst[bi];
  }
  return p;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t total = numel(p.out);
  if (total == 0) return;
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t inner = p.out[r - 1], ia_step = p.sa[r - 1], ib_step = p.sb[r - 1];
  for (std::size_t o = 0; o < total;) {
    std::size_t a0 = ia, b0 = ib;
    for (std::size_t j = 0; j < inner; ++j, ++o, a0 += ia_step, b0 += ib_step) f(o, a0, b0);
    // advance the multi-index over the outer dims
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <class T, class Fwd, class Da, class Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [da, db](Node<T>& o) {
      Node<T>& pa = *o.parents[0];
      Node<T>& pb = *o.parents[1];
      const std::size_t n = o.data.size();
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i] * da(pa.data[i], pb.data[i], o.data[i]);
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pb.grad[i] += o.grad[i] * db(pa.data[i], pb.data[i], o.data[i]);
      }
    });
  }
  Broadcast plan = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(numel(plan.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  Shape oshape = plan.out;
  return Tensor<T>::make_result(std::move(oshape), std::move(out), {a, b}, [plan, da, db](Node<T>& o) {
    Node<T>& pa = *o.parents[0];
    Node<T>& pb = *o.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for_each_broadcast(plan, [&](std::size_t k, std::size_t i, std::size_t j) {
      if (pa.requires_grad) pa.grad[i] += o.grad[k] * da(pa.data[i], pb.data[j], o.data[k]);
      if (pb.requires_grad) pb.grad[j] += o.grad[k] * db(pa.data[i], pb.data[j], o.data[k]);
    });
  });
}

/// Elementwise unary op; dfn(x, y) is dy/dx.
template <class T, class Fwd, class Dfn>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Dfn dfn) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [dfn](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < o.data.size(); ++i) p.grad[i] += o.grad[i] * dfn(p.data[i], o.data[i]);
  });
}

inline std::size_t norm_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

/// out = keep ? a : b, elementwise; keep has a's element count.
template <class T>
Tensor<T> where(const std::vector<std::uint8_t>& keep, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() || keep.size() != a.numel())
    throw ShapeError("where: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " with mask of " +
                     std::to_string(keep.size()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? a[i] : b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [keep](Node<T>& o) {
    Node<T>& pa = *o.parents[0];
    Node<T>& pb = *o.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (keep[i]) {
        if (pa.requires_grad) pa.grad[i] += o.grad[i];
      } else if (pb.requires_grad) {
        pb.grad[i] += o.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  return Tensor<T>::make_result(Shape{}, {s}, {x}, [](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    for (auto& g : p.grad) g += o.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum over one axis. keepdim retains it with extent 1.
template <class T>
Tensor<T> sum(const Tensor<T>& x, long axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  std::vector<T> out(outer * inner, T(0));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + j) * inner + i];
  Shape os = s;
  if (keepdim) os[ax] = 1;
  else os.erase(os.begin() + static_cast<long>(ax));
  return Tensor<T>::make_result(std::move(os), std::move(out), {x}, [outer, inner, n](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < inner; ++i) p.grad[(a * n + j) * inner + i] += o.grad[a * inner + i];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, long axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(x.dim(ax)));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  return Tensor<T>::make_result(std::move(shape), x.values(), {x}, [](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
  });
}

/// out.shape[d] = x.shape[perm[d]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size()) throw ShapeError("permute rank mismatch for " + to_string(s));
  const Shape xst = detail::strides_of(s);
  detail::Broadcast plan;
  plan.out.resize(s.size());
  plan.sa.resize(s.size());
  plan.sb.assign(s.size(), 0);
  std::vector<bool> used(s.size(), false);
  for (std::size_t d = 0; d < perm.size(); ++d) {
    if (perm[d] >= s.size() || used[perm[d]]) throw ShapeError("invalid permutation for " + to_string(s));
    used[perm[d]] = true;
    plan.out[d] = s[perm[d]];
    plan.sa[d] = xst[perm[d]];
  }
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = xv[i]; });
  Shape os = plan.out;
  return Tensor<T>::make_result(std::move(os), std::move(out), {x}, [plan](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    detail::for_each_broadcast(plan, [&](std::size_t k, std::size_t i, std::size_t) { p.grad[i] += o.grad[k]; });
  });
}

/// Swap the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

/// Materialized numpy-style broadcast of x to `shape`.
template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  detail::Broadcast plan = detail::plan_broadcast(x.shape(), shape);
  if (plan.out != shape) throw ShapeError("cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  std::vector<T> out(numel(shape));
  const auto& xv = x.values();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = xv[i]; });
  return Tensor<T>::make_result(shape, std::move(out), {x}, [plan](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    detail::for_each_broadcast(plan, [&](std::size_t k, std::size_t i, std::size_t) { p.grad[i] += o.grad[k]; });
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, long axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  const std::size_t ax = detail::norm_axis(axis, xs[0].rank());
  Shape os = xs[0].shape();
  os[ax] = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != os.size()) throw ShapeError("concat rank mismatch: " + to_string(s) + " vs " + to_string(xs[0].shape()));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != xs[0].shape()[i])
        throw ShapeError("concat shape mismatch: " + to_string(s) + " vs " + to_string(xs[0].shape()));
    os[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= os[i];
  for (std::size_t i = ax + 1; i < os.size(); ++i) inner *= os[i];
  std::vector<std::size_t> widths;
  for (const auto& x : xs) widths.push_back(x.dim(ax) * inner);
  const std::size_t row = os[ax] * inner;
  std::vector<T> out(numel(os));
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
      const auto& xv = xs[t].values();
      std::copy_n(xv.begin() + static_cast<long>(o * widths[t]), widths[t], out.begin() + static_cast<long>(o * row + off));
      off += widths[t];
    }
  }
  return Tensor<T>::make_result(std::move(os), std::move(out), xs, [outer, row, widths](Node<T>& o) {
    std::size_t off = 0;
    for (std::size_t t = 0; t < o.parents.size(); ++t) {
      Node<T>& p = *o.parents[t];
      if (p.requires_grad) {
        p.ensure_grad();
        for (std::size_t a = 0; a < outer; ++a)
          for (std::size_t i = 0; i < widths[t]; ++i) p.grad[a * widths[t] + i] += o.grad[a * row + off + i];
      }
      off += widths[t];
    }
  });
}

/// x[..., start:start+len, ...] along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t start, std::size_t len) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const Shape& s = x.shape();
  if (start + len > s[ax]) throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t in_row = s[ax] * inner, out_row = len * inner, off = start * inner;
  Shape os = s;
  os[ax] = len;
  std::vector<T> out(outer * out_row);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + static_cast<long>(o * in_row + off), out_row, out.begin() + static_cast<long>(o * out_row));
  return Tensor<T>::make_result(std::move(os), std::move(out), {x}, [outer, in_row, out_row, off](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t i = 0; i < out_row; ++i) p.grad[a * in_row + off + i] += o.grad[a * out_row + i];
  });
}

/// x: (B, n, D); rows: B*k indices into n. Returns (B, k, D).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows, std::size_t k) {
  if (x.rank() != 3 || rows.size() != x.dim(0) * k)
    throw ShapeError("gather_rows expects (B,n,D) and B*k indices, got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), n = x.dim(1), D = x.dim(2);
  std::vector<T> out(B * k * D);
  const auto& xv = x.values();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t r = rows[b * k + j];
      if (r >= n) throw ShapeError("gather_rows index " + std::to_string(r) + " >= " + std::to_string(n));
      std::copy_n(xv.begin() + static_cast<long>((b * n + r) * D), D, out.begin() + static_cast<long>((b * k + j) * D));
    }
  return Tensor<T>::make_result(Shape{B, k, D}, std::move(out), {x}, [rows, B, n, k, D](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t d = 0; d < D; ++d) p.grad[(b * n + rows[b * k + j]) * D + d] += o.grad[(b * k + j) * D + d];
  });
}

/// Row lookup into table (V, D). Output shape is out_shape + {D}.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids, Shape out_shape) {
  if (table.rank() != 2 || numel(out_shape) != ids.size())
    throw ShapeError("embedding expects (V,D) table and ids matching " + to_string(out_shape));
  const std::size_t V = table.dim(0), D = table.dim(1);
  std::vector<T> out(ids.size() * D);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
      throw ShapeError("embedding id " + std::to_string(ids[i]) + " out of range " + std::to_string(V));
    std::copy_n(table.values().begin() + static_cast<long>(static_cast<std::size_t>(ids[i]) * D), D,
                out.begin() + static_cast<long>(i * D));
  }
  out_shape.push_back(D);
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {table}, [ids, D](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t d = 0; d < D; ++d) p.grad[static_cast<std::size_t>(ids[i]) * D + d] += o.grad[i * D + d];
  });
}

// ---------------------------------------------------------------------------
// Products

namespace detail {

template <class T>
void check_finite_dims(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError(std::string(what) + ": operands need rank >= 2, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
}

/// C = A * op(B) over a (possibly broadcast) batch. trans_b selects B^T.
template <class T>
Tensor<T> batched_product(const Tensor<T>& a, const Tensor<T>& b, bool trans_b, const char* what) {
  check_finite_dims(a, b, what);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t bk = trans_b ? bs.back() : bs[bs.size() - 2];
  const std::size_t n = trans_b ? bs[bs.size() - 2] : bs.back();
  if (k != bk)
    throw ShapeError(std::string(what) + ": inner dimensions disagree for " + to_string(as) + " and " + to_string(bs));

  // b is a single matrix: fold all of a's leading dims into rows.
  if (bs.size() == 2) {
    const std::size_t rows = a.numel() / k;
    std::vector<T> out(rows * n);
    {
      CMatMap<T> A(a.values().data(), static_cast<long>(rows), static_cast<long>(k));
      CMatMap<T> Bm(b.values().data(), static_cast<long>(bs[0]), static_cast<long>(bs[1]));
      MatMap<T> C(out.data(), static_cast<long>(rows), static_cast<long>(n));
      if (trans_b) C.noalias() = A * Bm.transpose();
      else C.noalias() = A * Bm;
    }
    sw::detail::mac_count += rows * k * n;
    Shape os(as.begin(), as.end() - 1);
    os.push_back(n);
    return Tensor<T>::make_result(std::move(os), std::move(out), {a, b}, [rows, k, n, bs, trans_b](Node<T>& o) {
      Node<T>& pa = *o.parents[0];
      Node<T>& pb = *o.parents[1];
      CMatMap<T> G(o.grad.data(), static_cast<long>(rows), static_cast<long>(n));
      CMatMap<T> Bm(pb.data.data(), static_cast<long>(bs[0]), static_cast<long>(bs[1]));
      if (pa.requires_grad) {
        pa.ensure_grad();
        MatMap<T> GA(pa.grad.data(), static_cast<long>(rows), static_cast<long>(k));
        if (trans_b) GA.noalias() += G * Bm;
        else GA.noalias() += G * Bm.transpose();
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        CMatMap<T> A(pa.data.data(), static_cast<long>(rows), static_cast<long>(k));
        MatMap<T> GB(pb.grad.data(), static_cast<long>(bs[0]), static_cast<long>(bs[1]));
        if (trans_b) GB.noalias() += G.transpose() * A;
        else GB.noalias() += A.transpose() * G;
      }
    });
  }

  const Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  if (!abatch.empty() && abatch != bbatch)
    throw ShapeError(std::string(what) + ": batch dimensions disagree for " + to_string(as) + " and " + to_string(bs));
  const std::size_t batch = numel(bbatch);
  const bool a_shared = abatch.empty();
  const std::size_t bsz = bs[bs.size() - 2] * bs.back();
  const long br = static_cast<long>(bs[bs.size() - 2]), bc = static_cast<long>(bs.back());
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    CMatMap<T> A(a.values().data() + (a_shared ? 0 : i * m * k), static_cast<long>(m), static_cast<long>(k));
    CMatMap<T> Bm(b.values().data() + i * bsz, br, bc);
    MatMap<T> C(out.data() + i * m * n, static_cast<long>(m), static_cast<long>(n));
    if (trans_b) C.noalias() = A * Bm.transpose();
    else C.noalias() = A * Bm;
  }
  sw::detail::mac_count += batch * m * k * n;
  Shape os = bbatch;
  os.push_back(m);
  os.push_back(n);
  return Tensor<T>::make_result(std::move(os), std::move(out), {a, b},
                                [batch, m, k, n, bsz, br, bc, a_shared, trans_b](Node<T>& o) {
    Node<T>& pa = *o.parents[0];
    Node<T>& pb = *o.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (std::size_t i = 0; i < batch; ++i) {
      CMatMap<T> G(o.grad.data() + i * m * n, static_cast<long>(m), static_cast<long>(n));
      const std::size_t aoff = a_shared ? 0 : i * m * k;
      CMatMap<T> Bm(pb.data.data() + i * bsz, br, bc);
      if (pa.requires_grad) {
        MatMap<T> GA(pa.grad.data() + aoff, static_cast<long>(m), static_cast<long>(k));
        if (trans_b) GA.noalias() += G * Bm;
        else GA.noalias() += G * Bm.transpose();
      }
      if (pb.requires_grad) {
        CMatMap<T> A(pa.data.data() + aoff, static_cast<long>(m), static_cast<long>(k));
        MatMap<T> GB(pb.grad.data() + i * bsz, br, bc);
        if (trans_b) GB.noalias() += G.transpose() * A;
        else GB.noalias() += A.transpose() * G;
      }
    }
  });
}

}  // namespace detail

/// a (..., m, k) x b (k, n) or (..., k, n) with matching batch dims; a may
/// also be a single (m, k) matrix shared across b's batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::batched_product(a, b, false, "matmul");
}

/// a (..., m, k) x b(..., n, k)^T.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::batched_product(a, b, true, "matmul_nt");
}

// ---------------------------------------------------------------------------
// Normalization and losses

/// Softmax over the last axis. Masked logits are replaced by the sentinel
/// before normalization; a row with no kept entries yields zeros.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, const Mask* mask = nullptr) {
  if (x.rank() < 1) throw ShapeError("softmax of a scalar");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n ? x.numel() / n : 0;
  std::size_t mask_n = 0;
  if (mask) {
    mask_n = mask->keep.size();
    const Shape& ms = mask->shape;
    const Shape& xs = x.shape();
    bool suffix = !ms.empty() && ms.size() <= xs.size() && mask_n == numel(ms) && mask_n > 0;
    for (std::size_t i = 0; suffix && i < ms.size(); ++i) suffix = ms[ms.size() - 1 - i] == xs[xs.size() - 1 - i];
    if (!suffix) throw ShapeError("softmax mask " + to_string(ms) + " is not a suffix of " + to_string(xs));
  }
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  const T sentinel = static_cast<T>(kMaskSentinel);
  using Row = Eigen::Array<T, Eigen::Dynamic, 1>;
  Row row(static_cast<long>(n));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    bool any = !mask;
    if (mask) {
      const std::size_t moff = base % mask_n;
      for (std::size_t j = 0; j < n; ++j) {
        const bool keep = mask->keep[moff + j];
        row[static_cast<long>(j)] = keep ? xv[base + j] : sentinel;
        any = any || keep;
      }
    } else {
      row = Eigen::Map<const Row>(xv.data() + base, static_cast<long>(n));
    }
    if (!any) continue;  // all-masked row stays zero
    row = (row - row.maxCoeff()).exp();
    // Sequential sum keeps the reduction order fixed.
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += row[static_cast<long>(j)];
    for (std::size_t j = 0; j < n; ++j) out[base + j] = row[static_cast<long>(j)] / s;
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [rows, n](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += o.grad[base + j] * o.data[base + j];
      for (std::size_t j = 0; j < n; ++j) p.grad[base + j] += o.data[base + j] * (o.grad[base + j] - dot);
    }
  });
}

/// Layer norm over the last axis with gain/bias of that extent.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm params of size " + std::to_string(gain.numel()) + " for input " + to_string(x.shape()));
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, gain, bias},
                                [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& o) {
    Node<T>& px = *o.parents[0];
    Node<T>& pg = *o.parents[1];
    Node<T>& pb = *o.parents[2];
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    if (px.requires_grad) px.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = o.grad.data() + r * d;
      const T* h = xhat.data() + r * d;
      T m1 = T(0), m2 = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        if (pg.requires_grad) pg.grad[j] += g[j] * h[j];
        if (pb.requires_grad) pb.grad[j] += g[j];
        const T dh = g[j] * pg.data[j];
        m1 += dh;
        m2 += dh * h[j];
      }
      if (!px.requires_grad) continue;
      m1 /= static_cast<T>(d);
      m2 /= static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) {
        const T dh = g[j] * pg.data[j];
        px.grad[r * d + j] += inv_std[r] * (dh - m1 - h[j] * m2);
      }
    }
  });
}

/// Mean negative log-likelihood of integer labels under softmax(logits).
/// logits: (N, C). Label -1 marks an ignored row.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy expects (N,C) logits and N labels, got " + to_string(logits.shape()) + " and " +
                     std::to_string(labels.size()));
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  std::vector<T> prob(N * C, T(0));
  T loss = T(0);
  std::size_t valid = 0;
  const auto& lv = logits.values();
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] < 0) continue;
    if (static_cast<std::size_t>(labels[i]) >= C) throw ShapeError("label " + std::to_string(labels[i]) + " >= " + std::to_string(C));
    const T* z = lv.data() + i * C;
    const T mx = *std::max_element(z, z + C);
    T s = T(0);
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    for (std::size_t c = 0; c < C; ++c) prob[i * C + c] = std::exp(z[c] - mx) / s;
    loss += -(z[labels[i]] - mx - std::log(s));
    ++valid;
  }
  const T denom = valid ? static_cast<T>(valid) : T(1);
  loss /= denom;
  return Tensor<T>::make_result(Shape{}, {loss}, {logits}, [labels, prob = std::move(prob), N, C, denom](Node<T>& o) {
    Node<T>& p = *o.parents[0];
    p.ensure_grad();
    const T g = o.grad[0] / denom;
    for (std::size_t i = 0; i < N; ++i) {
      if (labels[i] < 0) continue;
      for (std::size_t c = 0; c < C; ++c) p.grad[i * C + c] += g * prob[i * C + c];
      p.grad[i * C + static_cast<std::size_t>(labels[i])] -= g;
    }
  });
}

/// Inverted dropout; identity when p == 0. Each 64-bit draw yields two
/// 32-bit uniforms.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const T s = static_cast<T>(1.0 / (1.0 - p));
  const auto cut = static_cast<std::uint64_t>(p * 4294967296.0);
  const std::size_t n = x.numel();
  std::vector<T> m(n), out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; i += 2) {
    const std::uint64_t r = rng.next();
    m[i] = (r & 0xffffffffULL) < cut ? T(0) : s;
    if (i + 1 < n) m[i + 1] = (r >> 32) < cut ? T(0) : s;
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] * m[i];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [m = std::move(m)](Node<T>& o) {
    Node<T>& px = *o.parents[0];
    px.ensure_grad();
    for (std::size_t i = 0; i < m.size(); ++i) px.grad[i] += o.grad[i] * m[i];
  });
}

/// Row-wise argmax over the last axis (no gradient).
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  std::vector<int> out(x.numel() / n);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const T* row = x.values().data() + r * n;
    out[r] = static_cast<int>(std::max_element(row, row + n) - row);
  }
  return out;
}

/// Cast between precisions (no gradient).
template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> v(x.values().begin(), x.values().end());
  return Tensor<To>(x.shape(), std::move(v));
}

}  // namespace ops
}  // namespace sw
