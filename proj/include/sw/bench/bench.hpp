// SPDX-License-Identifier: Apache-2.0
/**
 * @file   bench.hpp
 * @brief  Communication-cost benchmark: pairwise self-attention against a
 *         shared-workspace stage as the number of specialists grows.
 *
 * Both mechanisms run forward-only on a single (n_s, d) specialist matrix
 * with fixed weights, through plain Eigen kernels that perform the same
 * products as the library ops. Multiply-add counts (d = heads * head_dim):
 *
 *   pairwise   projections 3 n_s d^2 + output n_s d^2
 *              scores n_s^2 d + mixing n_s^2 d
 *   workspace  write    queries n_m d^2, keys + values 2 n_s d^2,
 *                       scores n_m n_s d, mixing n_m n_s d
 *              gate     n_s d^2 (input summary) + 2 n_m d g (g = d, or 1
 *                       for memory-style gates)
 *              read     queries n_s d^2, keys + values 2 n_m d^2,
 *                       scores n_s n_m d, mixing n_s n_m d
 *
 * The workspace count has no n_s^2 term.
 */
#pragma once

#include <sched.h>

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "sw/models/common.hpp"
#include "sw/workspace.hpp"

namespace sw::bench {

enum class Mechanism { kPairwise, kWorkspace };

inline const char* mechanism_name(Mechanism m) { return m == Mechanism::kPairwise ? "pairwise" : "workspace"; }

struct BenchConfig {
  std::size_t n_s = 64;
  std::size_t n_m = 8;
  std::size_t d = 64;
  std::size_t heads = 4;
  GateStyle gate_style = GateStyle::kUnit;

  std::size_t head_dim() const { return d / heads; }

  void validate() const {
    if (n_m == 0) throw ConfigError("bench: n_m must be >= 1");
    if (n_s == 0 || d == 0 || heads == 0) throw ConfigError("bench: n_s, d and heads must be >= 1");
    if (d % heads) throw ConfigError("bench: heads must divide d");
  }
};

/// Multiply-adds of one forward pass of the mechanism.
inline std::uint64_t count_flops(Mechanism m, const BenchConfig& c) {
  c.validate();
  const std::uint64_t s = c.n_s, k = c.n_m, d = c.d;
  if (m == Mechanism::kPairwise) return 4 * s * d * d + 2 * s * s * d;
  const std::uint64_t g = c.gate_style == GateStyle::kUnit ? d : 1;
  const std::uint64_t write = k * d * d + 2 * s * d * d + 2 * k * s * d;
  const std::uint64_t gate = s * d * d + 2 * k * d * g;
  const std::uint64_t read = s * d * d + 2 * k * d * d + 2 * s * k * d;
  return write + gate + read;
}

/// Communication-only part (attention scores and mixing).
inline std::uint64_t count_communication(Mechanism m, const BenchConfig& c) {
  const std::uint64_t s = c.n_s, k = c.n_m, d = c.d;
  return m == Mechanism::kPairwise ? 2 * s * s * d : 2 * (k * s * d + s * k * d);
}

/// Bytes of operands read and results written by the mechanism's products.
inline std::uint64_t count_bytes(Mechanism m, const BenchConfig& c) {
  const std::uint64_t s = c.n_s, k = c.n_m, d = c.d, H = c.heads, dh = c.head_dim();
  auto gemm = [](std::uint64_t r, std::uint64_t in, std::uint64_t out) { return r * in + in * out + r * out; };
  std::uint64_t f = 0;
  if (m == Mechanism::kPairwise) {
    f = 4 * gemm(s, d, d) + H * (gemm(s, dh, s) + gemm(s, s, dh));
  } else {
    const std::uint64_t g = c.gate_style == GateStyle::kUnit ? d : 1;
    f = gemm(k, d, d) + 2 * gemm(s, d, d) + H * (gemm(k, dh, s) + gemm(k, s, dh));
    f += gemm(s, d, d) + 2 * gemm(k, d, g);
    f += gemm(s, d, d) + 2 * gemm(k, d, d) + H * (gemm(s, dh, k) + gemm(s, k, dh));
  }
  return 4 * f;
}

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline RowMat to_mat(const Tensor<float>& t) {
  const long r = static_cast<long>(t.dim(0)), c = static_cast<long>(t.numel() / t.dim(0));
  return Eigen::Map<const RowMat>(t.values().data(), r, c);
}

/// dst = a * b. With a short inner dimension and wide rows the
/// coefficient-based product streams whole rows of b and skips the GEMM
/// dispatch cost; otherwise GEMM is faster.
template <class A, class B, class D>
void product(const A& a, const B& b, D&& dst) {
  if (a.cols() <= 16 && b.cols() >= 32) dst.noalias() = a.lazyProduct(b);
  else dst.noalias() = a * b;
}

/// Buffers for one attention site. With at least as many queries as keys
/// the scores are kept as S^T (keys x queries, row-major), so the per-query
/// max and sum run down columns and vectorize across queries; the output is
/// accumulated transposed. Wide score matrices stay row-major.
struct AttendScratch {
  RowMat qt, kt, vt;  // transposes, so per-head blocks are contiguous rows
  RowMat st;          // (nk, nq) when nq >= nk
  RowMat wide;        // (nq, nk) otherwise
  RowMat outt;        // (dv * heads, nq)
  Eigen::RowVectorXf m;
};

/// out[:, h] = softmax(q[:, h] k[:, h]^T / sqrt(dh)) v[:, h] for every head h.
/// Scales q in place.
inline void attend(RowMat& q, const RowMat& k, const RowMat& v, std::size_t heads, AttendScratch& w, RowMat& out) {
  const long dh = q.cols() / static_cast<long>(heads), dv = v.cols() / static_cast<long>(heads);
  const long nq = q.rows(), nk = k.rows();
  q *= 1.0F / std::sqrt(static_cast<float>(dh));
  if (nq >= nk) {
    w.qt = q.transpose();
    w.vt = v.transpose();
    w.st.resize(nk, nq);
    w.outt.resize(v.cols(), nq);
    for (long h = 0; h < static_cast<long>(heads); ++h) {
      product(k.middleCols(h * dh, dh), w.qt.middleRows(h * dh, dh), w.st);
      w.m = w.st.colwise().maxCoeff();
      w.st.rowwise() -= w.m;
      Eigen::Map<Eigen::ArrayXf> flat(w.st.data(), w.st.size());
      flat = flat.exp();
      w.m = w.st.colwise().sum().cwiseInverse();
      w.st.array().rowwise() *= w.m.array();
      product(w.vt.middleRows(h * dv, dv), w.st, w.outt.middleRows(h * dv, dv));
    }
    out = w.outt.transpose();
  } else {
    w.kt = k.transpose();
    w.vt = v.transpose();
    w.wide.resize(nq, nk);
    for (long h = 0; h < static_cast<long>(heads); ++h) {
      product(q.middleCols(h * dh, dh), w.kt.middleRows(h * dh, dh), w.wide);
      for (long i = 0; i < nq; ++i) w.wide.row(i).array() -= w.wide.row(i).maxCoeff();
      Eigen::Map<Eigen::ArrayXf> flat(w.wide.data(), w.wide.size());
      flat = flat.exp();
      for (long i = 0; i < nq; ++i) w.wide.row(i) /= w.wide.row(i).sum();
      // Few queries: each output entry is one contiguous dot product.
      out.middleCols(h * dv, dv).noalias() = w.wide.lazyProduct(w.vt.middleRows(h * dv, dv).transpose());
    }
  }
}

}  // namespace detail

/// One pairwise multi-head self-attention layer with output projection.
class PairwiseKernel {
 public:
  PairwiseKernel(const ProjectionSet<float>& p, std::size_t n_s)
      : wq_(detail::to_mat(p.w_q)), we_(detail::to_mat(p.w_e)), wv_(detail::to_mat(p.w_v)), wo_(detail::to_mat(p.w_o)),
        heads_(p.n_heads) {
    const long d = wq_.cols(), s = static_cast<long>(n_s);
    q_.resize(s, d), k_.resize(s, d), v_.resize(s, d), o_.resize(s, d), y_.resize(s, wo_.cols());
  }

  const RowMat& run(const RowMat& x) {
    q_.noalias() = x * wq_;
    k_.noalias() = x * we_;
    v_.noalias() = x * wv_;
    detail::attend(q_, k_, v_, heads_, scratch_, o_);
    y_.noalias() = o_ * wo_;
    return y_;
  }

 private:
  RowMat wq_, we_, wv_, wo_;
  std::size_t heads_;
  RowMat q_, k_, v_, o_, y_;
  detail::AttendScratch scratch_;
};

/// One workspace stage: write, gated update, broadcast with residual. The
/// specialists both write and read.
class WorkspaceKernel {
 public:
  WorkspaceKernel(const Workspace<float>& ws, std::size_t n_s) : heads_(ws.config().heads) {
    const auto& w = ws.write_projections();
    const auto& r = ws.read_projections();
    const auto& g = ws.gating();
    wq_ = detail::to_mat(w.w_q), we_ = detail::to_mat(w.w_e), wv_ = detail::to_mat(w.w_v);
    rq_ = detail::to_mat(r.w_q), re_ = detail::to_mat(r.w_e), rv_ = detail::to_mat(r.w_v);
    w1_ = detail::to_mat(g.w1), wi_ = detail::to_mat(g.w_input), wf_ = detail::to_mat(g.w_forget);
    bi_ = Eigen::Map<const Eigen::RowVectorXf>(g.b_input.values().data(), static_cast<long>(g.b_input.numel()));
    bf_ = Eigen::Map<const Eigen::RowVectorXf>(g.b_forget.values().data(), static_cast<long>(g.b_forget.numel()));
    m0_ = detail::to_mat(ws.init_memory());
    const long s = static_cast<long>(n_s), k = m0_.rows(), l = m0_.cols(), hd = rq_.cols();
    qm_.resize(k, wq_.cols()), kr_.resize(s, we_.cols()), vr_.resize(s, wv_.cols()), cand_.resize(k, l);
    x1_.resize(s, l), kg_.resize(k, l), ig_.resize(k, wi_.cols()), fg_.resize(k, wf_.cols());
    qh_.resize(s, hd), km_.resize(k, re_.cols()), vm_.resize(k, rv_.cols()), read_.resize(s, rv_.cols());
  }

  void reset() { m_ = m0_; }

  /// h: (n_s, n_h). Updates the memory and returns h + broadcast.
  const RowMat& run(const RowMat& h) {
    if (m_.size() == 0) reset();
    // Slot-side products are tiny and independent of n_s; coefficient-based
    // products skip the GEMM dispatch cost.
    qm_.noalias() = m_.lazyProduct(wq_);
    kr_.noalias() = h * we_;
    vr_.noalias() = h * wv_;
    detail::attend(qm_, kr_, vr_, heads_, write_, cand_);
    x1_.noalias() = h * w1_;
    xbar_ = x1_.array().max(0.0F).matrix().colwise().sum() / static_cast<float>(h.rows());
    // Two statements: fused with the broadcast, tanh loses vectorization.
    kg_ = m_.array().tanh().matrix();
    kg_.rowwise() += xbar_;
    ig_.noalias() = kg_.lazyProduct(wi_);
    fg_.noalias() = kg_.lazyProduct(wf_);
    ig_.rowwise() += bi_;
    fg_.rowwise() += bf_;
    auto sig = [](auto a) { return (1.0F + (-a).exp()).inverse(); };
    const auto in = sig(ig_.array()), fo = sig(fg_.array());
    if (ig_.cols() == m_.cols()) next_ = (in * cand_.array().tanh() + fo * m_.array()).matrix();
    else next_ = ((cand_.array().tanh().colwise() * in.col(0)) + (m_.array().colwise() * fo.col(0))).matrix();
    m_.swap(next_);
    qh_.noalias() = h * rq_;
    km_.noalias() = m_.lazyProduct(re_);
    vm_.noalias() = m_.lazyProduct(rv_);
    detail::attend(qh_, km_, vm_, heads_, read_scratch_, read_);
    out_ = h + read_;
    return out_;
  }

  const RowMat& memory() const { return m_; }

 private:
  std::size_t heads_;
  RowMat wq_, we_, wv_, rq_, re_, rv_, w1_, wi_, wf_, m0_, m_;
  Eigen::RowVectorXf bi_, bf_, xbar_;
  RowMat next_, qm_, kr_, vr_, cand_, x1_, kg_, ig_, fg_, qh_, km_, vm_, read_, out_;
  detail::AttendScratch write_, read_scratch_;
};

/// Library components at bench dims; weights come from `seed`.
inline WorkspaceConfig workspace_config(const BenchConfig& c) {
  WorkspaceConfig w;
  w.n_m = c.n_m;
  w.n_l = c.d;
  w.n_h = c.d;
  w.heads = c.heads;
  w.key_dim = c.head_dim();
  w.gate_style = c.gate_style;
  return w;
}

inline ProjectionSet<float> pairwise_projections(const BenchConfig& c, Rng& rng) {
  return ProjectionSet<float>(c.d, c.d, c.heads, c.head_dim(), c.head_dim(), c.d, rng);
}

/// Multiply-adds recorded by the library's own ops for one forward pass,
/// used to cross-check count_flops.
inline std::uint64_t traced_macs(Mechanism m, const BenchConfig& c, std::uint64_t seed = 1) {
  c.validate();
  Rng rng(seed);
  NoGradGuard ng;
  Tensor<float> x({1, c.n_s, c.d});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
  if (m == Mechanism::kPairwise) {
    const auto p = pairwise_projections(c, rng);
    reset_mac_counter();
    self_attention(p, x, RunContext<float>{});
    return mac_counter();
  }
  Workspace<float> ws(workspace_config(c), rng);
  WorkspaceState<float> st = ws.reset(1);
  reset_mac_counter();
  ws.stage(st, x, x);
  return mac_counter();
}

struct BenchResult {
  Mechanism mechanism = Mechanism::kWorkspace;
  std::size_t n_s = 0, n_m = 0, d = 0;
  std::uint64_t flops_analytic = 0;
  double wall_ns = 0.0;  // median over repeats, per forward pass
  std::uint64_t bytes_touched = 0;
};

struct ScalingOptions {
  std::size_t n_m = 8;
  std::size_t d = 32;
  std::size_t heads = 8;  // head width 4
  std::size_t repeats = 15;
  std::size_t warmup = 2;
  double min_run_ns = 5e6;  // raise the inner loop until a run lasts this long
  std::uint64_t seed = 1;
};

/// Restricts the calling thread to one CPU. Returns false if not permitted.
inline bool pin_to_one_cpu() {
  cpu_set_t set;
  CPU_ZERO(&set);
  if (sched_getaffinity(0, sizeof set, &set) != 0) return false;
  int first = -1;
  for (int i = 0; i < CPU_SETSIZE && first < 0; ++i)
    if (CPU_ISSET(i, &set)) first = i;
  if (first < 0) return false;
  CPU_ZERO(&set);
  CPU_SET(first, &set);
  return sched_setaffinity(0, sizeof set, &set) == 0;
}

namespace detail {

/// Smallest nonzero step of the steady clock, in ns.
inline double timer_tick_ns() {
  using C = std::chrono::steady_clock;
  double best = 1e9;
  for (int i = 0; i < 50; ++i) {
    const auto a = C::now();
    auto b = C::now();
    while (b == a) b = C::now();
    best = std::min(best, std::chrono::duration<double, std::nano>(b - a).count());
  }
  return best;
}

/// Inner-loop count so one timed run of fn spans at least floor_ns.
template <class F>
std::size_t calibrate(F& fn, double floor_ns) {
  using C = std::chrono::steady_clock;
  std::size_t inner = 1;
  for (;;) {
    const auto a = C::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    if (std::chrono::duration<double, std::nano>(C::now() - a).count() >= floor_ns) return inner;
    inner *= 2;
  }
}

/// Wall time per call over one run of `inner` calls.
template <class F>
double time_run(F& fn, std::size_t inner) {
  using C = std::chrono::steady_clock;
  const auto a = C::now();
  for (std::size_t i = 0; i < inner; ++i) fn();
  return std::chrono::duration<double, std::nano>(C::now() - a).count() / static_cast<double>(inner);
}

inline double median(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

}  // namespace detail

/// Times both mechanisms for every n_s in ns_list. Each timed run spans at
/// least max(100 timer ticks, min_run_ns). Repeats are taken in rounds that
/// visit every point once, so slow drift of the host spreads over all
/// points instead of biasing whichever was measured during it.
inline std::vector<BenchResult> run_scaling(const std::vector<std::size_t>& ns_list, const ScalingOptions& o) {
  struct Point {
    BenchResult result;
    std::function<void()> fn;
    std::size_t inner = 1;
    std::vector<double> runs;
  };
  volatile float sink = 0.0F;
  std::vector<std::unique_ptr<PairwiseKernel>> pks;
  std::vector<std::unique_ptr<WorkspaceKernel>> wks;
  std::vector<RowMat> inputs;
  inputs.reserve(ns_list.size());
  std::vector<Point> points;
  for (std::size_t n_s : ns_list) {
    BenchConfig c{n_s, o.n_m, o.d, o.heads};
    c.validate();
    Rng rng(derive_seed(o.seed, n_s));
    RowMat& x = inputs.emplace_back(static_cast<long>(n_s), static_cast<long>(o.d));
    for (long i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.uniform(-1, 1));
    PairwiseKernel* pk = pks.emplace_back(std::make_unique<PairwiseKernel>(pairwise_projections(c, rng), n_s)).get();
    Workspace<float> ws(workspace_config(c), rng);
    WorkspaceKernel* wk = wks.emplace_back(std::make_unique<WorkspaceKernel>(ws, n_s)).get();
    points.push_back({{Mechanism::kPairwise, n_s, o.n_m, o.d, count_flops(Mechanism::kPairwise, c), 0.0,
                       count_bytes(Mechanism::kPairwise, c)},
                      [&sink, pk, &x] { sink = sink + pk->run(x)(0, 0); }});
    points.push_back({{Mechanism::kWorkspace, n_s, o.n_m, o.d, count_flops(Mechanism::kWorkspace, c), 0.0,
                       count_bytes(Mechanism::kWorkspace, c)},
                      [&sink, wk, &x] {
                        wk->reset();
                        sink = sink + wk->run(x)(0, 0);
                      }});
  }
  const double floor_ns = std::max(100.0 * detail::timer_tick_ns(), o.min_run_ns);
  for (auto& p : points) p.inner = detail::calibrate(p.fn, floor_ns);
  const std::size_t repeats = std::max<std::size_t>(o.repeats, 5);
  for (std::size_t r = 0; r < o.warmup + repeats; ++r)
    for (auto& p : points) {
      const double ns = detail::time_run(p.fn, p.inner);
      if (r >= o.warmup) p.runs.push_back(ns);
    }
  std::vector<BenchResult> out;
  for (auto& p : points) {
    p.result.wall_ns = detail::median(p.runs);
    out.push_back(p.result);
  }
  return out;
}

/// Least-squares slope of log(wall_ns) against log(n_s) for one mechanism.
inline double loglog_slope(const std::vector<BenchResult>& rs, Mechanism m) {
  std::vector<double> xs, ys;
  for (const auto& r : rs)
    if (r.mechanism == m) {
      xs.push_back(std::log(static_cast<double>(r.n_s)));
      ys.push_back(std::log(r.wall_ns));
    }
  if (xs.size() < 2) throw ConfigError("loglog_slope: need at least two sizes");
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i], sy += ys[i], sxx += xs[i] * xs[i], sxy += xs[i] * ys[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

inline void write_csv(std::ostream& os, const std::vector<BenchResult>& rs) {
  os << "mechanism,n_s,n_m,d,flops_analytic,wall_ns,bytes_touched\n";
  for (const auto& r : rs)
    os << mechanism_name(r.mechanism) << ',' << r.n_s << ',' << r.n_m << ',' << r.d << ',' << r.flops_analytic << ','
       << static_cast<std::uint64_t>(r.wall_ns + 0.5) << ',' << r.bytes_touched << '\n';
}

}  // namespace sw::bench
