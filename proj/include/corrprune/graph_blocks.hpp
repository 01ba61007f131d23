#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include <corrprune/layers.hpp>
#include <corrprune/ops.hpp>

// Local-context blocks. The explicit branch builds a k-nearest-neighbor
// graph in feature space, gates its edge features with three sequential
// attention maps, and collapses the neighbor axis with grouped ring
// aggregation. The implicit branch soft-assigns points to clusters, refines
// the cluster graph, and scatters it back. [N x k x C] tensors are stored
// flat as [N*k x C] with neighbor-major rows (row i*k + j holds neighbor j
// of point i).

namespace corrprune {

// k nearest rows of f per row, by squared Euclidean distance, self
// excluded, ties broken by lower index. Returns row-major [n x k] indices.
inline std::vector<int64_t> knn_feature_graph(const Tensor& f, int64_t k) {
  const int64_t n = f.rows(), d = f.cols();
  CP_CHECK(k >= 1 && k < n, "knn_feature_graph: need 1 <= k < n, got k=" << k << " n=" << n);
  const double* p = f.data();
  std::vector<int64_t> out(static_cast<size_t>(n * k));
  std::vector<double> d2(static_cast<size_t>(n));
  std::vector<int64_t> ord(static_cast<size_t>(n - 1));
  for (int64_t i = 0; i < n; ++i) {
    const double* fi = p + i * d;
    for (int64_t j = 0; j < n; ++j) {
      const double* fj = p + j * d;
      double s = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double t = fi[c] - fj[c];
        s += t * t;
      }
      d2[size_t(j)] = s;
    }
    int64_t m = 0;
    for (int64_t j = 0; j < n; ++j)
      if (j != i) ord[size_t(m++)] = j;
    std::partial_sort(ord.begin(), ord.begin() + k, ord.end(),
                      [&d2](int64_t a, int64_t b) {
                        if (d2[size_t(a)] != d2[size_t(b)]) return d2[size_t(a)] < d2[size_t(b)];
                        return a < b;
                      });
    std::copy(ord.begin(), ord.begin() + k, out.begin() + i * k);
  }
  return out;
}

// Edge features [f_i || f_i - f_ij] for each neighbor j of i: [n*k x 2d].
inline Tensor edge_features(const Tensor& f, const std::vector<int64_t>& neighbor_idx,
                            int64_t k) {
  const int64_t n = f.rows();
  CP_CHECK(int64_t(neighbor_idx.size()) == n * k, "edge_features: index count mismatch");
  std::vector<int64_t> self_idx(static_cast<size_t>(n * k));
  for (int64_t i = 0; i < n; ++i)
    std::fill(self_idx.begin() + i * k, self_idx.begin() + (i + 1) * k, i);
  Tensor fi = gather_rows(f, std::move(self_idx));
  Tensor fj = gather_rows(f, neighbor_idx);
  return concat_cols(fi, sub(fi, fj));
}

// Neighbor graph bundle: indices plus their edge features.
struct LocalGraph {
  int64_t n = 0, k = 0;
  std::vector<int64_t> neighbor_idx;  // [n x k] row-major
  Tensor edge_feats;                  // [n*k x 2d]
};

inline LocalGraph build_local_graph(const Tensor& f, int64_t k) {
  LocalGraph g;
  g.n = f.rows();
  g.k = k;
  g.neighbor_idx = knn_feature_graph(f, k);
  g.edge_feats = edge_features(f, g.neighbor_idx, k);
  return g;
}

// Shared residual-gate template: transform with a point unit, derive a
// sigmoid gate from pooled descriptors, scale, add the block input back.

// Gate per (point, neighbor) element, pooled over the channel axis.
struct SpatialGate {
  PointUnit pcn;
  GateMlp mlp;  // scalar descriptor -> scalar gate

  SpatialGate() = default;
  SpatialGate(int64_t c, Rng& rng) : pcn(c, c, rng), mlp(1, 4, 1, rng) {}

  Tensor forward(const Tensor& g, bool training) const {
    const int64_t r = g.rows();
    Tensor gh = pcn.forward(g, training);
    Tensor desc = add(mean_axis(gh, 1), max_axis(gh, 1));
    Tensor gate = sigmoid(view(mlp.forward(view(desc, {r, 1})), {r}));
    return add(mul_colvec(gh, gate), g);
  }

  void collect(ParamMap& pm, const std::string& p) {
    pcn.collect(pm, p + ".pcn");
    mlp.collect(pm, p + ".mlp");
  }
};

// Gate per neighbor slot, pooled over points and channels.
struct NeighborGate {
  int64_t k = 0;
  PointUnit pcn;
  GateMlp mlp;  // k -> k/4 -> k

  NeighborGate() = default;
  NeighborGate(int64_t k_, int64_t c, Rng& rng)
      : k(k_), pcn(c, c, rng), mlp(k_, std::max<int64_t>(1, k_ / 4), k_, rng) {}

  Tensor forward(const Tensor& g, int64_t n, bool training) const {
    CP_CHECK(g.rows() == n * k, "NeighborGate: rows != n*k");
    Tensor gh = pcn.forward(g, training);
    Tensor slot_mean = mean_axis(view(mean_axis(gh, 1), {n, k}), 0);
    Tensor slot_max = max_axis(view(max_axis(gh, 1), {n, k}), 0);
    Tensor gate = sigmoid(view(mlp.forward(view(add(slot_mean, slot_max), {1, k})), {k}));
    std::vector<int64_t> tile(static_cast<size_t>(n * k));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < k; ++j) tile[size_t(i * k + j)] = j;
    Tensor gate_rows = view(gather_rows(view(gate, {k, 1}), std::move(tile)), {n * k});
    return add(mul_colvec(gh, gate_rows), g);
  }

  void collect(ParamMap& pm, const std::string& p) {
    pcn.collect(pm, p + ".pcn");
    mlp.collect(pm, p + ".mlp");
  }
};

// Gate per channel, pooled over points and neighbors.
struct ChannelGate {
  PointUnit pcn;
  GateMlp mlp;  // c -> c/4 -> c

  ChannelGate() = default;
  ChannelGate(int64_t c, Rng& rng)
      : pcn(c, c, rng), mlp(c, std::max<int64_t>(1, c / 4), c, rng) {}

  Tensor forward(const Tensor& g, bool training) const {
    const int64_t c = g.cols();
    Tensor gh = pcn.forward(g, training);
    Tensor desc = add(mean_axis(gh, 0), max_axis(gh, 0));
    Tensor gate = sigmoid(view(mlp.forward(view(desc, {1, c})), {c}));
    return add(mul_rowvec(gh, gate), g);
  }

  void collect(ParamMap& pm, const std::string& p) {
    pcn.collect(pm, p + ".pcn");
    mlp.collect(pm, p + ".mlp");
  }
};

// First-stage ring width: 3 when it divides k, else the smallest factor.
inline int64_t ring_group(int64_t k) {
  if (k <= 1) return 1;
  if (k % 3 == 0) return 3;
  for (int64_t g = 2; g * g <= k; ++g)
    if (k % g == 0) return g;
  return k;
}

// Collapses the neighbor axis k -> 1 with two grouped linear stages: rings
// of g1 consecutive neighbors merge first, then the ring outputs merge.
// Both stages are plain reshapes of the flat layout, so grouping costs
// nothing beyond the linear maps.
struct RingAggregate {
  int64_t k = 0, g1 = 1, k2 = 1;
  PointUnit s1;  // g1*c_in -> c_out on [n*k2 rows]
  PointUnit s2;  // k2*c_out -> c_out on [n rows]

  RingAggregate() = default;
  RingAggregate(int64_t k_, int64_t c_in, int64_t c_out, Rng& rng)
      : k(k_), g1(ring_group(k_)), k2(k_ / ring_group(k_)),
        s1(ring_group(k_) * c_in, c_out, rng), s2((k_ / ring_group(k_)) * c_out, c_out, rng) {}

  Tensor forward(const Tensor& g, int64_t n, bool training) const {
    CP_CHECK(g.rows() == n * k, "RingAggregate: rows != n*k");
    const int64_t c_in = g.cols();
    Tensor h = s1.forward(view(g, {n * k2, g1 * c_in}), training);
    return s2.forward(view(h, {n, k2 * h.cols()}), training);
  }

  void collect(ParamMap& pm, const std::string& p) {
    s1.collect(pm, p + ".s1");
    s2.collect(pm, p + ".s2");
  }
};

// Explicit branch: neighbor graph -> edge features -> spatial, neighbor,
// channel gates in sequence -> ring aggregation back to [n x d].
struct ExplicitBlock {
  int64_t d = 0, k = 0;
  SpatialGate sa;
  NeighborGate na;
  ChannelGate ca;
  RingAggregate agg;

  ExplicitBlock() = default;
  ExplicitBlock(int64_t d_, int64_t k_, Rng& rng)
      : d(d_), k(k_), sa(2 * d_, rng), na(k_, 2 * d_, rng), ca(2 * d_, rng),
        agg(k_, 2 * d_, d_, rng) {}

  Tensor forward(const Tensor& f, bool training) const {
    const int64_t n = f.rows();
    LocalGraph g = build_local_graph(f, k);
    Tensor h = sa.forward(g.edge_feats, training);
    h = na.forward(h, n, training);
    h = ca.forward(h, training);
    return agg.forward(h, n, training);
  }

  void collect(ParamMap& pm, const std::string& p) {
    sa.collect(pm, p + ".sa");
    na.collect(pm, p + ".na");
    ca.collect(pm, p + ".ca");
    agg.collect(pm, p + ".agg");
  }
};

// Soft assignment of n points to m_c clusters. s rows are a softmax over
// clusters; cluster features are assignment-weighted means (column-sum
// normalized, epsilon-guarded so empty clusters stay finite).
struct PoolResult {
  Tensor clusters;    // [m_c x d]
  Tensor assignment;  // [n x m_c]
};

struct SoftPool {
  int64_t m_c = 0;
  Linear score;  // d -> m_c

  SoftPool() = default;
  SoftPool(int64_t d, int64_t m_c_, Rng& rng) : m_c(m_c_), score(d, m_c_, rng) {}

  PoolResult forward(const Tensor& f) const {
    CP_CHECK(m_c <= f.rows(), "SoftPool: cluster count " << m_c << " exceeds point count " << f.rows());
    Tensor s = softmax_rows(score.forward(f));
    Tensor mass = add_scalar(sum_axis(s, 0), 1e-9);
    Tensor g = div_colvec(matmul(s, f, true, false), mass);
    return {g, s};
  }

  void collect(ParamMap& pm, const std::string& p) { score.collect(pm, p + ".score"); }
};

// Residual refinement of the cluster graph: a point unit mixes channels,
// then one linear layer mixes across the cluster axis on the transposed
// view. Zero mixing weights make the block an exact identity.
struct ClusterFilter {
  PointUnit pcn;  // d -> d
  Linear mix;     // m_c -> m_c across clusters

  ClusterFilter() = default;
  ClusterFilter(int64_t d, int64_t m_c, Rng& rng) : pcn(d, d, rng), mix(m_c, m_c, rng) {}

  Tensor forward(const Tensor& g, bool training) const {
    Tensor h = pcn.forward(g, training);
    return add(g, transpose(mix.forward(transpose(h))));
  }

  void collect(ParamMap& pm, const std::string& p) {
    pcn.collect(pm, p + ".pcn");
    mix.collect(pm, p + ".mix");
  }
};

// Scatter cluster features back to points: each row a convex combination
// of cluster rows under its assignment weights.
inline Tensor unpool(const Tensor& clusters, const Tensor& assignment) {
  CP_CHECK(assignment.cols() == clusters.rows(),
           "unpool: assignment columns " << assignment.cols() << " != clusters " << clusters.rows());
  return matmul(assignment, clusters);
}

// Implicit branch: pool -> cluster filter -> unpool, [n x d] -> [n x d].
struct ImplicitBlock {
  SoftPool pool;
  ClusterFilter filter;

  ImplicitBlock() = default;
  ImplicitBlock(int64_t d, int64_t m_c, Rng& rng)
      : pool(d, m_c, rng), filter(d, m_c, rng) {}

  Tensor forward(const Tensor& f, bool training) const {
    PoolResult pr = pool.forward(f);
    return unpool(filter.forward(pr.clusters, training), pr.assignment);
  }

  void collect(ParamMap& pm, const std::string& p) {
    pool.collect(pm, p + ".pool");
    filter.collect(pm, p + ".filter");
  }
};

}  // namespace corrprune
