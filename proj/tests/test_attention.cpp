#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <corrprune/attention.hpp>
#include <corrprune/gradcheck.hpp>

#include "support/test_util.hpp"

using namespace corrprune;
using cptest::max_abs_diff;
using cptest::random_tensor;

namespace {

std::vector<Tensor> grad_params(ParamMap& pm) {
  std::vector<Tensor> out;
  for (auto& [name, t] : pm.items)
    if (t.requires_grad()) out.push_back(t);
  return out;
}

// Quadratic-order reference of the conserved-flow formula: materializes the
// full source/sink interaction matrix and reduces it with plain loops.
Tensor flow_reference(const Tensor& q, const Tensor& k, const Tensor& v,
                      double eps = 1e-9) {
  const int64_t nq = q.rows(), nk = k.rows(), d = q.cols(), dv = v.cols();
  auto phi = [](double x) { return x > 0.0 ? x + 1.0 : std::exp(x); };
  std::vector<double> p(static_cast<size_t>(nq * nk));
  for (int64_t i = 0; i < nq; ++i)
    for (int64_t j = 0; j < nk; ++j) {
      double s = 0.0;
      for (int64_t c = 0; c < d; ++c) s += phi(q.at(i, c)) * phi(k.at(j, c));
      p[size_t(i * nk + j)] = s;
    }
  std::vector<double> incoming(static_cast<size_t>(nq), eps);
  for (int64_t i = 0; i < nq; ++i)
    for (int64_t j = 0; j < nk; ++j) incoming[size_t(i)] += p[size_t(i * nk + j)];
  std::vector<double> outgoing(static_cast<size_t>(nk), eps);
  for (int64_t j = 0; j < nk; ++j)
    for (int64_t i = 0; i < nq; ++i)
      outgoing[size_t(j)] += p[size_t(i * nk + j)] / incoming[size_t(i)];
  // softmax over sources, then competition-scaled values
  double mx = outgoing[0];
  for (int64_t j = 1; j < nk; ++j) mx = std::max(mx, outgoing[size_t(j)]);
  std::vector<double> w(static_cast<size_t>(nk));
  double z = 0.0;
  for (int64_t j = 0; j < nk; ++j) {
    w[size_t(j)] = std::exp(outgoing[size_t(j)] - mx);
    z += w[size_t(j)];
  }
  for (int64_t j = 0; j < nk; ++j) w[size_t(j)] /= z;
  Tensor out = Tensor::zeros({nq, dv}, false);
  for (int64_t i = 0; i < nq; ++i) {
    double alloc = 0.0;
    for (int64_t j = 0; j < nk; ++j) alloc += p[size_t(i * nk + j)] / outgoing[size_t(j)];
    const double gate = 1.0 / (1.0 + std::exp(-alloc));
    for (int64_t c = 0; c < dv; ++c) {
      double s = 0.0;
      for (int64_t j = 0; j < nk; ++j)
        s += p[size_t(i * nk + j)] / incoming[size_t(i)] * w[size_t(j)] * v.at(j, c);
      out.data()[i * dv + c] = gate * s;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("motion field is the coordinate difference between views") {
  std::vector<Correspondence> c{{0.3, -0.2, 0.3, -0.2}, {0.0, 0.0, 0.1, 0.2}};
  Tensor m = compute_motion(c);
  REQUIRE(m.rows() == 2);
  REQUIRE(m.cols() == 2);
  REQUIRE(m.at(0, 0) == 0.0);
  REQUIRE(m.at(0, 1) == 0.0);
  REQUIRE(m.at(1, 0) == -0.1);
  REQUIRE(m.at(1, 1) == -0.2);
}

TEST_CASE("pure translation at constant depth gives a constant motion field") {
  // X_B = X_A + (0.5, 0, 0) at depth 5: every motion vector is (-0.1, 0).
  std::vector<Correspondence> c;
  for (int i = 0; i < 10; ++i) {
    const double xw = 0.2 * i - 1.0, yw = 0.15 * i - 0.6, z = 5.0;
    c.push_back({xw / z, yw / z, (xw + 0.5) / z, yw / z});
  }
  Tensor m = compute_motion(c);
  for (int64_t i = 0; i < 10; ++i) {
    REQUIRE(std::abs(m.at(i, 0) - (-0.1)) < 1e-9);
    REQUIRE(std::abs(m.at(i, 1)) < 1e-9);
  }
}

TEST_CASE("flow attention of zero values is zero") {
  Rng rng(501);
  Tensor q = random_tensor(rng, {7, 5}, false);
  Tensor k = random_tensor(rng, {9, 5}, false);
  Tensor v = Tensor::zeros({9, 5}, false);
  Tensor out = flow_attention(q, k, v);
  REQUIRE(max_abs_diff(out, Tensor::zeros({7, 5}, false)) == 0.0);
}

TEST_CASE("flow attention matches the quadratic-order reference at N=64") {
  Rng rng(502);
  Tensor q = random_tensor(rng, {64, 8}, false);
  Tensor k = random_tensor(rng, {64, 8}, false);
  Tensor v = random_tensor(rng, {64, 8}, false);
  Tensor got = flow_attention(q, k, v);
  Tensor want = flow_reference(q, k, v);
  double worst = 0.0;
  for (int64_t i = 0; i < 64; ++i)
    for (int64_t c = 0; c < 8; ++c) {
      const double w = want.at(i, c);
      worst = std::max(worst, std::abs(got.at(i, c) - w) / std::max(1e-12, std::abs(w)));
    }
  REQUIRE(worst < 1e-5);
}

TEST_CASE("flow attention is invariant to joint source permutation") {
  Rng rng(503);
  Tensor q = random_tensor(rng, {6, 4}, false);
  Tensor k = random_tensor(rng, {8, 4}, false);
  Tensor v = random_tensor(rng, {8, 4}, false);
  std::vector<int64_t> perm{5, 2, 7, 0, 4, 1, 6, 3};
  Tensor a = flow_attention(q, k, v);
  Tensor b = flow_attention(q, gather_rows(k, perm), gather_rows(v, perm));
  REQUIRE(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("flow attention never allocates a quadratic block") {
  NoGradGuard ng;
  Rng rng(504);
  const int64_t n = 16384, d = 64;
  Tensor q = Tensor::zeros({n, d}, false);
  Tensor k = Tensor::zeros({n, d}, false);
  Tensor v = Tensor::zeros({n, d}, false);
  for (Tensor* t : {&q, &k, &v}) {
    double* p = t->data();
    for (int64_t i = 0; i < n * d; ++i) p[i] = rng.normal();
  }
  AllocStats::reset();
  Tensor out = flow_attention(q, k, v);
  REQUIRE(out.rows() == n);
  // Largest buffer the path may touch is [n x d]; n x n would be 2 GiB.
  REQUIRE(AllocStats::largest_block <= uint64_t(n) * uint64_t(d) * 8);
}

TEST_CASE("dense attention with a single source returns that value row") {
  Rng rng(505);
  Tensor q = random_tensor(rng, {1, 4}, false);
  Tensor k = random_tensor(rng, {1, 4}, false);
  Tensor v = random_tensor(rng, {1, 4}, false);
  REQUIRE(max_abs_diff(dense_attention(q, k, v), v) < 1e-15);
}

TEST_CASE("dense attention with uniform keys averages the values") {
  Rng rng(506);
  const int64_t n = 9, d = 4;
  Tensor q = random_tensor(rng, {n, d}, false);
  Tensor k = Tensor::zeros({n, d}, false);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < d; ++c) k.data()[i * d + c] = 0.7 - 0.1 * double(c);
  Tensor v = random_tensor(rng, {n, d}, false);
  Tensor out = dense_attention(q, k, v);
  for (int64_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += v.at(j, c);
    mean /= double(n);
    for (int64_t i = 0; i < n; ++i) REQUIRE(std::abs(out.at(i, c) - mean) < 1e-12);
  }
}

TEST_CASE("dense attention streamed and recorded paths agree") {
  Rng rng(507);
  Tensor q = random_tensor(rng, {11, 6}, false);
  Tensor k = random_tensor(rng, {13, 6}, false);
  Tensor v = random_tensor(rng, {13, 6}, false);
  Tensor streamed;
  {
    NoGradGuard ng;
    streamed = dense_attention(q, k, v);
  }
  Tensor qg = q;
  qg.node()->requires_grad = true;  // force the recorded path
  Tensor recorded = dense_attention(qg, k, v);
  REQUIRE(max_abs_diff(streamed, recorded) < 1e-12);
}

TEST_CASE("both attention kinds pass gradient checks") {
  Rng rng(508);
  Tensor q = random_tensor(rng, {5, 4}, true);
  Tensor k = random_tensor(rng, {6, 4}, true);
  Tensor v = random_tensor(rng, {6, 4}, true);
  REQUIRE(gradcheck([&] { return sum_all(flow_attention(q, k, v)); }, {q, k, v}) < 1e-4);
  REQUIRE(gradcheck([&] { return sum_all(dense_attention(q, k, v)); }, {q, k, v}) < 1e-4);
}

TEST_CASE("multi-head attention preserves shape and zero output projection kills it") {
  Rng rng(509);
  MultiHeadAttention mha(8, 4, AttentionKind::flow, rng);
  Tensor x = random_tensor(rng, {6, 8}, false);
  Tensor out = mha.forward(x, x);
  REQUIRE(out.rows() == 6);
  REQUIRE(out.cols() == 8);
  mha.wo.zero_init();
  REQUIRE(max_abs_diff(mha.forward(x, x), Tensor::zeros({6, 8}, false)) == 0.0);
}

TEST_CASE("multi-head attention rejects head counts that do not divide d") {
  Rng rng(510);
  REQUIRE_THROWS_AS(MultiHeadAttention(6, 4, AttentionKind::flow, rng), Error);
}

TEST_CASE("motion injection with zero output projections is the identity") {
  Rng rng(511);
  const int64_t n = 5, d = 8;
  MotionInjection mi(d, 2, 2, AttentionKind::flow, true, rng);
  for (auto& a : mi.self_attn) a.wo.zero_init();
  for (auto& a : mi.cross_attn) a.wo.zero_init();
  for (auto& f : mi.ffn) f.l2.zero_init();
  Tensor f = random_tensor(rng, {n, d}, false);
  Tensor m_hat = random_tensor(rng, {n, d}, false);
  REQUIRE(max_abs_diff(mi.forward(f, m_hat), f) == 0.0);
}

TEST_CASE("motion injection default iteration count is two") {
  Rng rng(512);
  MotionInjection mi(4, 2, 2, AttentionKind::flow, true, rng);
  REQUIRE(mi.l_m == 2);
  REQUIRE(mi.self_attn.size() == 2);
  REQUIRE(mi.cross_attn.size() == 2);
  REQUIRE(mi.ffn.size() == 2);
}

TEST_CASE("motion injection permutes with jointly permuted inputs") {
  Rng rng(513);
  const int64_t n = 7, d = 4;
  for (AttentionKind kind : {AttentionKind::flow, AttentionKind::dense}) {
    MotionInjection mi(d, 1, 2, kind, true, rng);
    Tensor f = random_tensor(rng, {n, d}, false);
    Tensor m_hat = random_tensor(rng, {n, d}, false);
    std::vector<int64_t> perm{3, 6, 0, 5, 1, 4, 2};
    Tensor a = mi.forward(f, m_hat);
    Tensor b = mi.forward(gather_rows(f, perm), gather_rows(m_hat, perm));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < d; ++c)
        REQUIRE(std::abs(b.at(i, c) - a.at(perm[size_t(i)], c)) < 1e-9);
  }
}

TEST_CASE("motion injection without motion runs self-interaction only") {
  Rng rng(514);
  const int64_t n = 5, d = 4;
  MotionInjection mi(d, 2, 2, AttentionKind::flow, false, rng);
  REQUIRE(mi.cross_attn.empty());
  Tensor f = random_tensor(rng, {n, d}, false);
  Tensor out = mi.forward(f, Tensor());
  REQUIRE(out.rows() == n);
  REQUIRE(out.cols() == d);
  ParamMap pm;
  mi.collect(pm, "mi");
  for (auto& [name, t] : pm.items) REQUIRE(name.find(".ca") == std::string::npos);
}

TEST_CASE("motion injection passes a gradient check at n=16 d=16") {
  Rng rng(515);
  const int64_t n = 16, d = 16;
  MotionInjection mi(d, 1, 4, AttentionKind::flow, true, rng);
  Linear embed(2, d, rng);
  Tensor f = random_tensor(rng, {n, d}, true);
  Tensor motion = random_tensor(rng, {n, 2}, true);
  ParamMap pm;
  mi.collect(pm, "mi");
  embed.collect(pm, "embed");
  auto ps = grad_params(pm);
  ps.push_back(f);
  ps.push_back(motion);
  REQUIRE(gradcheck([&] { return sum_all(mi.forward(f, embed.forward(motion))); }, ps, 1e-6, 4) < 1e-4);
}

TEST_CASE("flow attention scales linearly while dense scales quadratically") {
  const double f1 = bench_attention(AttentionKind::flow, 1024, 64, 3).median_ms;
  const double f4 = bench_attention(AttentionKind::flow, 4096, 64, 3).median_ms;
  const double d1 = bench_attention(AttentionKind::dense, 1024, 64, 3).median_ms;
  const double d4 = bench_attention(AttentionKind::dense, 4096, 64, 3).median_ms;
  REQUIRE(f4 / f1 <= 6.0);
  REQUIRE(d4 / d1 >= 8.0);
}
