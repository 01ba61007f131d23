#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <vector>

#include <corrprune/geometry.hpp>
#include <corrprune/layers.hpp>
#include <corrprune/ops.hpp>

// Attention primitives and the motion-injection block. The flow variant
// routes information through per-channel source/sink capacities so cost
// stays O(N d^2); the dense variant is the O(N^2 d) softmax baseline kept
// for ablations and benchmarks.

namespace corrprune {

enum class AttentionKind { flow, dense };

// Per-correspondence motion vectors: coordinate differences between the
// two views, (x - u, y - v).
inline Tensor compute_motion(const std::vector<Correspondence>& c) {
  const int64_t n = int64_t(c.size());
  Tensor m = Tensor::zeros({n, 2}, false);
  double* p = m.data();
  for (int64_t i = 0; i < n; ++i) {
    p[i * 2 + 0] = c[size_t(i)].x - c[size_t(i)].u;
    p[i * 2 + 1] = c[size_t(i)].y - c[size_t(i)].v;
  }
  return m;
}

// Conserved-flow attention. With phi = elu+1 (nonnegative):
//   incoming  I = phi(Q) colsum(phi(K))            per sink
//   outgoing  O = phi(K) colsum(phi(Q)/I)          per source
//   competed  Vhat = softmax(O) (*) V              over the source axis
//   aggregated A = (phi(Q)/I) (phi(K)^T Vhat)
//   allocated  out = sigmoid(phi(Q) colsum(phi(K)/O)) (*) A
// Source-side sums are taken first; nothing of size Nq x Nk is ever built.
// eps guards the two divisions against zero flow.
inline Tensor flow_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             double eps = 1e-9) {
  CP_CHECK(q.cols() == k.cols(), "flow_attention: q/k channel mismatch");
  CP_CHECK(k.rows() == v.rows(), "flow_attention: k/v row mismatch");
  Tensor phi_q = elu1p(q);
  Tensor phi_k = elu1p(k);
  Tensor incoming = add_scalar(matvec(phi_q, sum_axis(phi_k, 0)), eps);
  Tensor q_norm = div_colvec(phi_q, incoming);
  Tensor outgoing = add_scalar(matvec(phi_k, sum_axis(q_norm, 0)), eps);
  Tensor competed = mul_colvec(v, softmax1d(outgoing));
  Tensor aggregated = matmul(q_norm, matmul(phi_k, competed, true, false));
  Tensor allocation = matvec(phi_q, sum_axis(div_colvec(phi_k, outgoing), 0));
  return mul_colvec(aggregated, sigmoid(allocation));
}

// softmax(Q K^T / sqrt(d)) V. When no graph is being recorded the scores
// are streamed row by row, so memory stays O(N d) even at benchmark sizes.
inline Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  CP_CHECK(q.cols() == k.cols(), "dense_attention: q/k channel mismatch");
  CP_CHECK(k.rows() == v.rows(), "dense_attention: k/v row mismatch");
  const double scale = 1.0 / std::sqrt(double(q.cols()));
  if (!grad_mode()) {
    const int64_t nq = q.rows(), nk = k.rows(), d = q.cols(), dv = v.cols();
    Tensor out = Tensor::zeros({nq, dv}, false);
    const double *pq = q.data(), *pk = k.data(), *pv = v.data();
    double* po = out.data();
    std::vector<double> row(static_cast<size_t>(nk));
    for (int64_t i = 0; i < nq; ++i) {
      double mx = -HUGE_VAL;
      for (int64_t j = 0; j < nk; ++j) {
        double s = 0.0;
        for (int64_t c = 0; c < d; ++c) s += pq[i * d + c] * pk[j * d + c];
        row[size_t(j)] = s * scale;
        mx = std::max(mx, row[size_t(j)]);
      }
      double z = 0.0;
      for (int64_t j = 0; j < nk; ++j) {
        row[size_t(j)] = std::exp(row[size_t(j)] - mx);
        z += row[size_t(j)];
      }
      const double inv = 1.0 / z;
      for (int64_t j = 0; j < nk; ++j) {
        const double w = row[size_t(j)] * inv;
        for (int64_t c = 0; c < dv; ++c) po[i * dv + c] += w * pv[j * dv + c];
      }
    }
    return out;
  }
  return matmul(softmax_rows(mul_scalar(matmul(q, k, false, true), scale)), v);
}

// Multi-head wrapper: per-head channel slices run the configured attention
// kind; heads concatenate back in index order through an output projection.
struct MultiHeadAttention {
  int64_t d = 0, heads = 1, d_h = 0;
  AttentionKind kind = AttentionKind::flow;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(int64_t d_, int64_t heads_, AttentionKind kind_, Rng& rng)
      : d(d_), heads(heads_), d_h(d_ / heads_), kind(kind_),
        wq(d_, d_, rng), wk(d_, d_, rng), wv(d_, d_, rng), wo(d_, d_, rng) {
    CP_CHECK(d_ % heads_ == 0, "MultiHeadAttention: heads must divide d");
  }

  Tensor forward(const Tensor& x_q, const Tensor& x_kv) const {
    Tensor q = wq.forward(x_q), k = wk.forward(x_kv), v = wv.forward(x_kv);
    Tensor cat;
    for (int64_t h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(q, h * d_h, (h + 1) * d_h);
      Tensor kh = slice_cols(k, h * d_h, (h + 1) * d_h);
      Tensor vh = slice_cols(v, h * d_h, (h + 1) * d_h);
      Tensor oh = kind == AttentionKind::flow ? flow_attention(qh, kh, vh)
                                              : dense_attention(qh, kh, vh);
      cat = h == 0 ? oh : concat_cols(cat, oh);
    }
    return wo.forward(cat);
  }

  void collect(ParamMap& pm, const std::string& p) {
    wq.collect(pm, p + ".wq");
    wk.collect(pm, p + ".wk");
    wv.collect(pm, p + ".wv");
    wo.collect(pm, p + ".wo");
  }
};

// Position-wise feed-forward: d -> 2d -> d with ReLU.
struct FeedForward {
  Linear l1, l2;

  FeedForward() = default;
  FeedForward(int64_t d, Rng& rng) : l1(d, 2 * d, rng), l2(2 * d, d, rng) {}

  Tensor forward(const Tensor& x) const { return l2.forward(relu(l1.forward(x))); }

  void collect(ParamMap& pm, const std::string& p) {
    l1.collect(pm, p + ".l1");
    l2.collect(pm, p + ".l2");
  }
};

// Iterated interaction block: self-attention, then cross-attention against
// the embedded motion field, then feed-forward, each with an additive
// residual, repeated l_m times with per-iteration weights. With
// with_motion=false the cross-attention step is dropped entirely and the
// block degenerates to self-interaction only.
struct MotionInjection {
  int64_t d = 0, l_m = 2;
  bool with_motion = true;
  std::vector<MultiHeadAttention> self_attn, cross_attn;
  std::vector<FeedForward> ffn;

  MotionInjection() = default;
  MotionInjection(int64_t d_, int64_t l_m_, int64_t heads, AttentionKind kind,
                  bool with_motion_, Rng& rng)
      : d(d_), l_m(l_m_), with_motion(with_motion_) {
    CP_CHECK(l_m_ >= 1, "MotionInjection: l_m must be >= 1");
    for (int64_t l = 0; l < l_m_; ++l) {
      self_attn.emplace_back(d_, heads, kind, rng);
      if (with_motion) cross_attn.emplace_back(d_, heads, kind, rng);
      ffn.emplace_back(d_, rng);
    }
  }

  // m_hat is the already-embedded motion [n x d]; the 2 -> d projection is
  // shared between the two branches of a pruning block, so it lives with
  // the caller. With with_motion=false the cross step disappears and the
  // stack degenerates to self-attention plus feed-forward.
  Tensor forward(const Tensor& f, const Tensor& m_hat) const {
    if (with_motion) {
      CP_CHECK(m_hat.defined() && m_hat.rows() == f.rows() &&
                   m_hat.cols() == d,
               "MotionInjection: m_hat must be [n x d] matching f");
    }
    Tensor h = f;
    for (int64_t l = 0; l < l_m; ++l) {
      h = add(h, self_attn[size_t(l)].forward(h, h));
      if (with_motion) h = add(h, cross_attn[size_t(l)].forward(h, m_hat));
      h = add(h, ffn[size_t(l)].forward(h));
    }
    return h;
  }

  void collect(ParamMap& pm, const std::string& p) {
    for (int64_t l = 0; l < l_m; ++l) {
      const std::string s = p + ".iter" + std::to_string(l);
      self_attn[size_t(l)].collect(pm, s + ".sa");
      if (with_motion) cross_attn[size_t(l)].collect(pm, s + ".ca");
      ffn[size_t(l)].collect(pm, s + ".ffn");
    }
  }
};

// Wall-clock timing of one attention kind at [n x d], median and 90th
// percentile over `runs` timed calls after one warmup.
struct BenchResult {
  double median_ms = 0.0, p90_ms = 0.0;
};

inline BenchResult bench_attention(AttentionKind kind, int64_t n, int64_t d,
                                   int runs = 5, uint64_t seed = 99) {
  NoGradGuard ng;
  Rng rng(seed);
  Tensor q = Tensor::zeros({n, d}, false);
  Tensor k = Tensor::zeros({n, d}, false);
  Tensor v = Tensor::zeros({n, d}, false);
  for (Tensor* t : {&q, &k, &v}) {
    double* p = t->data();
    for (int64_t i = 0; i < n * d; ++i) p[i] = rng.normal();
  }
  auto once = [&] {
    Tensor out = kind == AttentionKind::flow ? flow_attention(q, k, v)
                                             : dense_attention(q, k, v);
    return out.at(0, 0);
  };
  volatile double sink = once();  // warmup
  std::vector<double> ms;
  for (int r = 0; r < runs; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    sink = once();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  (void)sink;
  std::sort(ms.begin(), ms.end());
  BenchResult b;
  b.median_ms = ms[ms.size() / 2];
  b.p90_ms = ms[size_t(std::ceil(0.9 * double(ms.size()))) - 1];
  return b;
}

}  // namespace corrprune
