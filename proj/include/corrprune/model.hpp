#pragma once
// Correspondence-pruning model: a shared stem embedding feeds per-block
// dual-branch local context (explicit neighborhood graph + implicit soft
// clustering), motion-aware interaction, elementwise-sum fusion, a scoring
// head, and hard top-k pruning. The surviving candidates drive a
// differentiable weighted eight-point pose estimate, plus the losses that
// supervise both paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "corrprune/attention.hpp"
#include "corrprune/checkpoint.hpp"
#include "corrprune/common.hpp"
#include "corrprune/geometry.hpp"
#include "corrprune/graph_blocks.hpp"
#include "corrprune/layers.hpp"
#include "corrprune/ops.hpp"
#include "corrprune/rng.hpp"
#include "corrprune/tensor.hpp"

namespace corrprune {

struct CorrAdaptorConfig {
  std::vector<int64_t> k_per_block{9, 6};
  int64_t d = 128;
  int64_t clusters = 250;
  int64_t l_m = 2;
  int64_t l_p = 2;
  int64_t l_fusion = 1;
  int64_t heads = 4;
  double alpha = 0.5;
  double lambda = 0.5;
  AttentionKind attention = AttentionKind::flow;
  bool explicit_only = false;
  bool implicit_only = false;
  bool motion_off = false;
  bool plain_attention = false;  // forces the quadratic attention path
  bool shared_motion = false;    // one interaction stack serves both branches
  std::string omega_mode = "ones";  // per-element loss weight hook

  AttentionKind effective_attention() const {
    return plain_attention ? AttentionKind::dense : attention;
  }

  void validate() const {
    CP_CHECK(l_p >= 1 && size_t(l_p) == k_per_block.size(),
             "config: l_p must equal the length of k_per_block");
    for (int64_t k : k_per_block) CP_CHECK(k >= 1, "config: k must be >= 1");
    CP_CHECK(alpha > 0.0 && alpha <= 1.0, "config: alpha must be in (0,1]");
    CP_CHECK(d >= 1 && heads >= 1 && d % heads == 0,
             "config: heads must divide d");
    CP_CHECK(clusters >= 2, "config: clusters must be >= 2");
    CP_CHECK(l_m >= 1, "config: l_m must be >= 1");
    CP_CHECK(l_fusion >= 1, "config: l_fusion must be >= 1");
    CP_CHECK(lambda >= 0.0, "config: lambda must be >= 0");
    CP_CHECK(!(explicit_only && implicit_only),
             "config: explicit_only and implicit_only are mutually exclusive");
    CP_CHECK(omega_mode == "ones", "config: unknown omega mode: " + omega_mode);
  }
};

struct PruneState {
  int64_t stage = 0;
  std::vector<int64_t> incoming_idx;  // original indices scored at this stage
  std::vector<int64_t> kept_idx;      // kept original indices, ascending
  Tensor logits;                      // [|incoming_idx|]
  Tensor weights;                     // tanh(relu(logits)), same shape
};

struct ModelOutput {
  std::vector<PruneState> prune_states;
  std::vector<int64_t> final_idx;  // candidates fed to the pose path
  Tensor final_weights;            // [|final_idx|], differentiable
  bool pose_ok = false;  // degenerate weights can defeat the pose path
  Tensor e_vec;          // [9] row-major essential estimate when pose_ok
  EssentialMatrix e_hat{};
  std::vector<double> distances;     // per original row when pose_ok
  std::vector<uint8_t> inlier_mask;  // verification at tau when pose_ok
};

// Top ceil(alpha * n) selection by score, ties broken toward the lower
// index. Returns local row positions in descending-score order.
inline std::vector<int64_t> prune_select(const double* score, int64_t n,
                                         double alpha) {
  CP_CHECK(alpha > 0.0 && alpha <= 1.0, "prune: alpha must be in (0,1]");
  CP_CHECK(n >= 1, "prune: empty candidate set");
  const auto keep = int64_t(std::ceil(alpha * double(n)));
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                    [score](int64_t a, int64_t b) {
                      if (score[a] != score[b]) return score[a] > score[b];
                      return a < b;
                    });
  order.resize(size_t(keep));
  return order;
}

inline std::pair<std::vector<Correspondence>, std::vector<int64_t>> prune(
    const Tensor& logits, const std::vector<Correspondence>& c, double alpha) {
  CP_CHECK(logits.rank() == 1 && logits.dim(0) == int64_t(c.size()),
           "prune: logits must be [n] matching the candidate list");
  std::vector<int64_t> sel = prune_select(logits.data(), logits.dim(0), alpha);
  std::vector<Correspondence> kept(sel.size());
  for (size_t i = 0; i < sel.size(); ++i) kept[i] = c[size_t(sel[i])];
  return {std::move(kept), std::move(sel)};
}

// Inlier weights for the pose path: logits map to [0,1) and negatives
// contribute nothing.
inline Tensor inlier_weights(const Tensor& logits) {
  return tanh_t(relu(logits));
}

// Differentiable weighted eight-point core: the smallest eigenvector of
// sum_i w_i x_i x_i^T over epipolar constraint rows, unit norm with the
// same sign convention as the plain geometry path.
inline Tensor essential_from_weights(const std::vector<Correspondence>& c,
                                     const Tensor& w) {
  const int64_t n = int64_t(c.size());
  CP_CHECK(n >= 8, "essential_from_weights: need at least 8 candidates");
  CP_CHECK(w.defined() && w.rank() == 1 && w.dim(0) == n,
           "essential_from_weights: weights must be [n]");
  std::vector<double> rows(size_t(n) * 9);
  for (int64_t i = 0; i < n; ++i)
    epipolar_row(c[size_t(i)], rows.data() + 9 * i);
  Tensor x = Tensor::from(std::move(rows), {n, 9}, false);
  Tensor m = matmul(x, mul_colvec(x, w), true, false);  // [9 x 9]
  return smallest_eigvec(m);
}

struct CorrAdaptor {
  CorrAdaptorConfig cfg;
  PointUnit stem_in;
  ResidualPointBlock stem_r1, stem_r2;

  struct Block {
    Linear motion_embed;  // one 2 -> d projection shared by both branches
    ExplicitBlock exp;
    ImplicitBlock imp;
    MotionInjection mi_exp, mi_imp;
    Linear head;  // d -> 1
  };
  std::vector<Block> blocks;

  CorrAdaptor() = default;

  CorrAdaptor(const CorrAdaptorConfig& config, uint64_t seed) : cfg(config) {
    cfg.validate();
    Rng rng(seed);
    const AttentionKind kind = cfg.effective_attention();
    stem_in = PointUnit(4, cfg.d, rng);
    stem_r1 = ResidualPointBlock(cfg.d, rng);
    stem_r2 = ResidualPointBlock(cfg.d, rng);
    for (int64_t b = 0; b < cfg.l_p; ++b) {
      Block blk;
      if (!cfg.motion_off) blk.motion_embed = Linear(2, cfg.d, rng);
      if (use_explicit()) {
        blk.exp = ExplicitBlock(cfg.d, cfg.k_per_block[size_t(b)], rng);
        blk.mi_exp = MotionInjection(cfg.d, cfg.l_m, cfg.heads, kind,
                                     !cfg.motion_off, rng);
      }
      if (use_implicit()) {
        blk.imp = ImplicitBlock(cfg.d, cfg.clusters, rng);
        if (!(cfg.shared_motion && use_explicit()))
          blk.mi_imp = MotionInjection(cfg.d, cfg.l_m, cfg.heads, kind,
                                       !cfg.motion_off, rng);
      }
      blk.head = Linear(cfg.d, 1, rng);
      blocks.push_back(std::move(blk));
    }
  }

  bool use_explicit() const { return !cfg.implicit_only; }
  bool use_implicit() const { return !cfg.explicit_only; }

  void collect(ParamMap& pm) {
    stem_in.collect(pm, "stem.in");
    stem_r1.collect(pm, "stem.res1");
    stem_r2.collect(pm, "stem.res2");
    for (size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b);
      Block& blk = blocks[b];
      if (!cfg.motion_off) blk.motion_embed.collect(pm, p + ".motion_embed");
      if (use_explicit()) {
        blk.exp.collect(pm, p + ".explicit");
        blk.mi_exp.collect(pm, p + ".motion_exp");
      }
      if (use_implicit()) {
        blk.imp.collect(pm, p + ".implicit");
        if (!(cfg.shared_motion && use_explicit()))
          blk.mi_imp.collect(pm, p + ".motion_imp");
      }
      blk.head.collect(pm, p + ".head");
    }
  }

  ModelOutput forward(const std::vector<Correspondence>& c,
                      bool training) const {
    const int64_t n0 = int64_t(c.size());
    CP_CHECK(n0 >= 8, "forward: need at least 8 correspondences");
    constexpr double kTau = 1e-4;

    std::vector<double> raw(size_t(n0) * 4);
    for (int64_t i = 0; i < n0; ++i) {
      raw[size_t(i) * 4 + 0] = c[size_t(i)].x;
      raw[size_t(i) * 4 + 1] = c[size_t(i)].y;
      raw[size_t(i) * 4 + 2] = c[size_t(i)].u;
      raw[size_t(i) * 4 + 3] = c[size_t(i)].v;
    }
    Tensor f0 = Tensor::from(std::move(raw), {n0, 4}, false);
    // Stem runs once over all rows; blocks gather the surviving subset.
    Tensor stem = stem_r2.forward(
        stem_r1.forward(stem_in.forward(f0, training), training), training);

    ModelOutput out;
    std::vector<int64_t> idx(static_cast<size_t>(n0));
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<int64_t> last_sel;  // kept local positions, ascending

    for (size_t b = 0; b < blocks.size(); ++b) {
      const Block& blk = blocks[b];
      const int64_t nb = int64_t(idx.size());
      Tensor f = gather_rows(stem, idx);
      std::vector<Correspondence> cb(static_cast<size_t>(nb));
      for (int64_t i = 0; i < nb; ++i) cb[size_t(i)] = c[size_t(idx[size_t(i)])];

      // Motion is recomputed on the pruned subset so rows stay aligned.
      Tensor m_hat;
      if (!cfg.motion_off) m_hat = blk.motion_embed.forward(compute_motion(cb));

      for (int64_t it = 0; it < cfg.l_fusion; ++it) {
        Tensor fe, fi;
        if (use_explicit())
          fe = blk.mi_exp.forward(blk.exp.forward(f, training), m_hat);
        if (use_implicit()) {
          const MotionInjection& mi =
              cfg.shared_motion && use_explicit() ? blk.mi_exp : blk.mi_imp;
          fi = mi.forward(blk.imp.forward(f, training), m_hat);
        }
        f = use_explicit() && use_implicit() ? add(fe, fi)
                                             : (use_explicit() ? fe : fi);
      }

      Tensor logits = view(blk.head.forward(f), {nb});
      Tensor weights = inlier_weights(logits);
      std::vector<int64_t> sel = prune_select(logits.data(), nb, cfg.alpha);
      std::sort(sel.begin(), sel.end());  // idx is ascending, so this sorts
                                          // the kept set by original index
      std::vector<int64_t> kept(sel.size());
      for (size_t i = 0; i < sel.size(); ++i)
        kept[i] = idx[size_t(sel[i])];

      PruneState st;
      st.stage = int64_t(b);
      st.incoming_idx = idx;
      st.kept_idx = kept;
      st.logits = logits;
      st.weights = weights;
      out.prune_states.push_back(std::move(st));
      last_sel = std::move(sel);
      idx = std::move(kept);
    }

    CP_CHECK(int64_t(idx.size()) >= 8,
             "forward: fewer than 8 candidates reach the pose stage");
    out.final_idx = idx;
    const PruneState& last = out.prune_states.back();
    out.final_weights =
        view(gather_rows(view(last.weights,
                              {int64_t(last.incoming_idx.size()), 1}),
                         last_sel),
             {int64_t(idx.size())});

    std::vector<Correspondence> final_c(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) final_c[i] = c[size_t(idx[i])];
    try {
      out.e_vec = essential_from_weights(final_c, out.final_weights);
      Mat3 eh;
      for (int i = 0; i < 9; ++i) eh.m[i] = out.e_vec.at(i);
      out.e_hat = canonicalize_essential(eh);
      out.pose_ok = true;
    } catch (const Error&) {
      // Early in training every weight can be zero, which leaves the
      // constraint matrix degenerate; callers skip the pose terms then.
      out.pose_ok = false;
    }
    if (out.pose_ok) {
      out.distances.resize(size_t(n0));
      out.inlier_mask.resize(size_t(n0));
      for (int64_t i = 0; i < n0; ++i) {
        const double dist = symmetric_epipolar_distance(out.e_hat, c[size_t(i)]);
        out.distances[size_t(i)] = dist;
        out.inlier_mask[size_t(i)] = dist < kTau ? 1 : 0;
      }
    }
    return out;
  }
};

// Per-stage binary cross entropy on pre-selection logits, averaged within a
// stage and summed across stages. Labels are gathered through each stage's
// incoming candidate set. omega optionally scales the logits per element
// before the loss (default all-ones).
inline Tensor classification_loss(const std::vector<PruneState>& states,
                                  const std::vector<uint8_t>& y_full,
                                  const std::vector<Tensor>* omega = nullptr) {
  CP_CHECK(!states.empty(), "classification_loss: no stages");
  if (omega)
    CP_CHECK(omega->size() == states.size(),
             "classification_loss: omega must have one entry per stage");
  Tensor total;
  for (size_t s = 0; s < states.size(); ++s) {
    const PruneState& st = states[s];
    const int64_t nb = int64_t(st.incoming_idx.size());
    CP_CHECK(st.logits.defined() && st.logits.rank() == 1 &&
                 st.logits.dim(0) == nb,
             "classification_loss: stage logits malformed");
    std::vector<double> yb(static_cast<size_t>(nb));
    for (int64_t i = 0; i < nb; ++i) {
      const int64_t gi = st.incoming_idx[size_t(i)];
      CP_CHECK(gi >= 0 && size_t(gi) < y_full.size(),
               "classification_loss: stage index outside the label range");
      yb[size_t(i)] = y_full[size_t(gi)] ? 1.0 : 0.0;
    }
    Tensor y = Tensor::from(std::move(yb), {nb}, false);
    Tensor o = st.logits;
    if (omega) {
      const Tensor& w = (*omega)[s];
      CP_CHECK(w.defined() && w.rank() == 1 && w.dim(0) == nb,
               "classification_loss: omega shape mismatch");
      o = mul(o, w);
    }
    // Elementwise cross entropy with logits: softplus(o) - o * y.
    Tensor stage_loss = mean_all(sub(softplus(o), mul(o, y)));
    total = s == 0 ? stage_loss : add(total, stage_loss);
  }
  return total;
}

// Mean epipolar ratio over virtual correspondences drawn from the GT pose.
// The denominators use the ground-truth matrix, so the loss is the
// quadratic form e^T G e with a constant G; only the estimate needs grads.
inline Tensor regression_loss(const Tensor& e_vec, const EssentialMatrix& e_gt,
                              int64_t n_virtual = 100) {
  CP_CHECK(e_vec.defined() && e_vec.rank() == 1 && e_vec.dim(0) == 9,
           "regression_loss: estimate must be a 9-vector");
  VirtualCorrespondences vc = virtual_correspondences(e_gt, n_virtual);
  std::vector<double> g(81, 0.0);
  double row[9];
  const double inv_n = 1.0 / double(vc.pairs.size());
  for (const Correspondence& pq : vc.pairs) {
    epipolar_row(pq, row);
    const Vec3 p{{pq.x, pq.y, 1.0}};
    const Vec3 q{{pq.u, pq.v, 1.0}};
    const Vec3 ep = matvec3(e_gt.e, p);
    const Vec3 etq = matvec3(transpose3(e_gt.e), q);
    const double den = ep[0] * ep[0] + ep[1] * ep[1] + etq[0] * etq[0] +
                       etq[1] * etq[1] + 1e-12;
    const double scale = inv_n / den;
    for (int a = 0; a < 9; ++a)
      for (int b = 0; b < 9; ++b)
        g[size_t(a) * 9 + size_t(b)] += scale * row[a] * row[b];
  }
  Tensor gmat = Tensor::from(std::move(g), {9, 9}, false);
  Tensor e_col = view(e_vec, {9, 1});
  Tensor quad = matmul(e_col, matmul(gmat, e_col), true, false);  // [1 x 1]
  return view(quad, {1});
}

inline Tensor hybrid_loss(const Tensor& cls, const Tensor& reg,
                          double lambda) {
  CP_CHECK(lambda >= 0.0, "hybrid_loss: lambda must be >= 0");
  CP_CHECK(cls.defined() && reg.defined() && cls.numel() == 1 &&
               reg.numel() == 1,
           "hybrid_loss: inputs must be scalar losses");
  return add(cls, mul_scalar(reg, lambda));
}

}  // namespace corrprune
