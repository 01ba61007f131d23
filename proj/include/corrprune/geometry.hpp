#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include <corrprune/common.hpp>
#include <corrprune/rng.hpp>
#include <corrprune/small_eig.hpp>

namespace corrprune {

// One putative match in intrinsics-normalized image-plane coordinates.
struct Correspondence {
  double x, y;  // view A
  double u, v;  // view B
};

struct CameraIntrinsics {
  double fx, fy, cx, cy;
};

struct Vec3 {
  double v[3];
  double& operator[](int i) { return v[i]; }
  double operator[](int i) const { return v[i]; }
};

struct Mat3 {
  double m[9];  // row-major
  double& operator()(int r, int c) { return m[r * 3 + c]; }
  double operator()(int r, int c) const { return m[r * 3 + c]; }
};

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
           a[0] * b[1] - a[1] * b[0]}};
}
inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
  double n = norm(a);
  CP_CHECK(n > 0, "normalized: zero vector");
  return {{a[0] / n, a[1] / n, a[2] / n}};
}
inline Vec3 matvec3(const Mat3& m, const Vec3& x) {
  Vec3 r;
  for (int i = 0; i < 3; ++i)
    r[i] = m(i, 0) * x[0] + m(i, 1) * x[1] + m(i, 2) * x[2];
  return r;
}
inline Mat3 matmul3(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      r(i, j) = s;
    }
  return r;
}
inline Mat3 transpose3(const Mat3& a) {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = a(j, i);
  return r;
}
inline double det3(const Mat3& a) {
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
         a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

inline Mat3 rot_axis_angle(const Vec3& axis, double angle_rad) {
  Vec3 a = normalized(axis);
  const double c = std::cos(angle_rad), s = std::sin(angle_rad);
  const double t = 1.0 - c;
  Mat3 r;
  r(0, 0) = c + a[0] * a[0] * t;
  r(0, 1) = a[0] * a[1] * t - a[2] * s;
  r(0, 2) = a[0] * a[2] * t + a[1] * s;
  r(1, 0) = a[1] * a[0] * t + a[2] * s;
  r(1, 1) = c + a[1] * a[1] * t;
  r(1, 2) = a[1] * a[2] * t - a[0] * s;
  r(2, 0) = a[2] * a[0] * t - a[1] * s;
  r(2, 1) = a[2] * a[1] * t + a[0] * s;
  r(2, 2) = c + a[2] * a[2] * t;
  return r;
}

// Camera model: X_B = R * X_A + t. Translation is direction-only (|t| = 1).
struct RelativePose {
  Mat3 rotation;
  Vec3 translation;
};

struct EssentialMatrix {
  Mat3 e;
};

// Unit Frobenius norm, sign fixed by the largest-magnitude entry.
inline EssentialMatrix canonicalize_essential(const Mat3& raw) {
  double fro = 0;
  for (double x : raw.m) fro += x * x;
  fro = std::sqrt(fro);
  CP_CHECK(fro > 0, "canonicalize_essential: zero matrix");
  EssentialMatrix out;
  for (int i = 0; i < 9; ++i) out.e.m[i] = raw.m[i] / fro;
  canonicalize_sign(out.e.m, 9);
  return out;
}

// ---------------------------------------------------------------------------
// Intrinsics normalization.

inline void normalize_keypoints(const double* px, const double* py,
                                const CameraIntrinsics& k, size_t n,
                                double* nx, double* ny) {
  CP_CHECK(k.fx > 0 && k.fy > 0, "normalize_keypoints: fx, fy must be > 0");
  for (size_t i = 0; i < n; ++i) {
    nx[i] = (px[i] - k.cx) / k.fx;
    ny[i] = (py[i] - k.cy) / k.fy;
  }
}

inline void denormalize_keypoints(const double* nx, const double* ny,
                                  const CameraIntrinsics& k, size_t n,
                                  double* px, double* py) {
  CP_CHECK(k.fx > 0 && k.fy > 0, "denormalize_keypoints: fx, fy must be > 0");
  for (size_t i = 0; i < n; ++i) {
    px[i] = nx[i] * k.fx + k.cx;
    py[i] = ny[i] * k.fy + k.cy;
  }
}

// ---------------------------------------------------------------------------
// E = [t]x R, canonicalized.

inline EssentialMatrix compose_essential(const RelativePose& pose) {
  const Vec3& t = pose.translation;
  Mat3 tx{};
  tx(0, 1) = -t[2]; tx(0, 2) = t[1];
  tx(1, 0) = t[2];  tx(1, 2) = -t[0];
  tx(2, 0) = -t[1]; tx(2, 1) = t[0];
  return canonicalize_essential(matmul3(tx, pose.rotation));
}

// ---------------------------------------------------------------------------
// Symmetric epipolar distance, eps-guarded denominator.

inline double symmetric_epipolar_distance(const EssentialMatrix& E,
                                          const Correspondence& c) {
  const Vec3 p{{c.x, c.y, 1.0}};
  const Vec3 q{{c.u, c.v, 1.0}};
  const Vec3 Ep = matvec3(E.e, p);
  const Vec3 Etq = matvec3(transpose3(E.e), q);
  const double num = dot(q, Ep);
  const double den =
      Ep[0] * Ep[0] + Ep[1] * Ep[1] + Etq[0] * Etq[0] + Etq[1] * Etq[1] + 1e-12;
  return num * num / den;
}

inline std::vector<uint8_t> full_size_verification(
    const EssentialMatrix& E, const std::vector<Correspondence>& c,
    double tau = 1e-4) {
  CP_CHECK(tau >= 0, "full_size_verification: tau must be >= 0");
  std::vector<uint8_t> mask(c.size());
  for (size_t i = 0; i < c.size(); ++i)
    mask[i] = symmetric_epipolar_distance(E, c[i]) < tau ? 1 : 0;
  return mask;
}

// Ground-truth labels are the same predicate applied with the GT essential
// matrix; kept as a named alias so callers state intent.
inline std::vector<uint8_t> inlier_labels(const std::vector<Correspondence>& c,
                                          const EssentialMatrix& e_gt,
                                          double tau = 1e-4) {
  return full_size_verification(e_gt, c, tau);
}

// ---------------------------------------------------------------------------
// Weighted eight-point: smallest eigenvector of X^T W X, where row i of X is
// the Kronecker construction [u x, u y, u, v x, v y, v, x, y, 1] matching
// row-major vec(E) in q^T E p.

inline void epipolar_row(const Correspondence& c, double* row) {
  row[0] = c.u * c.x; row[1] = c.u * c.y; row[2] = c.u;
  row[3] = c.v * c.x; row[4] = c.v * c.y; row[5] = c.v;
  row[6] = c.x;       row[7] = c.y;       row[8] = 1.0;
}

inline EssentialMatrix weighted_eight_point(
    const std::vector<Correspondence>& cands,
    const std::vector<double>& weights) {
  const size_t n = cands.size();
  CP_CHECK(n >= 8, "weighted_eight_point: need at least 8 candidates");
  CP_CHECK(weights.size() == n, "weighted_eight_point: weight count mismatch");
  size_t pos = 0;
  for (double w : weights) {
    CP_CHECK(w >= 0, "weighted_eight_point: negative weight");
    if (w > 0) ++pos;
  }
  CP_CHECK(pos >= 8, "weighted_eight_point: fewer than 8 positive weights");

  double M[81] = {0};
  double row[9];
  for (size_t i = 0; i < n; ++i) {
    if (weights[i] == 0) continue;
    epipolar_row(cands[i], row);
    const double w = weights[i];
    for (int a = 0; a < 9; ++a) {
      const double wa = w * row[a];
      for (int b = 0; b < 9; ++b) M[a * 9 + b] += wa * row[b];
    }
  }
  std::vector<double> evals, evecs;
  eig_sym_jacobi(M, 9, evals, evecs);
  CP_CHECK(evals[1] - evals[0] > 1e-12 * std::max(1.0, evals[8]),
           "weighted_eight_point: degenerate eigenproblem");
  Mat3 e;
  for (int i = 0; i < 9; ++i) e.m[i] = evecs[size_t(i) * 9 + 0];
  return canonicalize_essential(e);
}

inline EssentialMatrix eight_point(const std::vector<Correspondence>& cands) {
  return weighted_eight_point(cands, std::vector<double>(cands.size(), 1.0));
}

// ---------------------------------------------------------------------------
// SVD-style decomposition of E into the four (R, t) candidates, then
// cheirality: the candidate putting the most inliers in front of both
// cameras wins (ties by candidate index); no positive-depth majority is a
// flagged error.

namespace detail_geom {

// U, V with positive determinants such that E ~ U diag(s1, s2, ~0) V^T.
inline void essential_uv(const EssentialMatrix& E, Mat3& U, Mat3& V) {
  Mat3 ete = matmul3(transpose3(E.e), E.e);
  std::vector<double> evals, evecs;
  eig_sym_jacobi(ete.m, 3, evals, evecs);
  // Ascending eigenvalues; columns of V take descending singular values.
  Vec3 v1{{evecs[2], evecs[5], evecs[8]}};
  Vec3 v2{{evecs[1], evecs[4], evecs[7]}};
  const double s1 = std::sqrt(std::max(0.0, evals[2]));
  const double s2 = std::sqrt(std::max(0.0, evals[1]));
  CP_CHECK(s1 > 0 && s2 > 0, "essential decomposition: rank < 2");
  Vec3 u1 = matvec3(E.e, v1);
  for (int i = 0; i < 3; ++i) u1[i] /= s1;
  Vec3 u2 = matvec3(E.e, v2);
  for (int i = 0; i < 3; ++i) u2[i] /= s2;
  Vec3 u3 = cross(u1, u2);
  Vec3 v3 = cross(v1, v2);
  for (int i = 0; i < 3; ++i) {
    U(i, 0) = u1[i]; U(i, 1) = u2[i]; U(i, 2) = u3[i];
    V(i, 0) = v1[i]; V(i, 1) = v2[i]; V(i, 2) = v3[i];
  }
  // u3, v3 from cross products already give det +1.
}

// Depth of the view-A point for pose (R, t); positive in both views = true.
inline bool depths_positive(const Mat3& R, const Vec3& t,
                            const Correspondence& c) {
  const Vec3 p{{c.x, c.y, 1.0}};
  const Vec3 q{{c.u, c.v, 1.0}};
  const Vec3 Rp = matvec3(R, p);
  const Vec3 a = cross(q, Rp);
  const Vec3 b = cross(q, t);
  const double denom = dot(a, a);
  if (denom < 1e-18) return false;
  const double z1 = -dot(a, b) / denom;
  if (z1 <= 0) return false;
  const double z2 = z1 * Rp[2] + t[2];
  return z2 > 0;
}

}  // namespace detail_geom

inline std::array<RelativePose, 4> essential_pose_candidates(
    const EssentialMatrix& E) {
  Mat3 U, V;
  detail_geom::essential_uv(E, U, V);
  Mat3 W{};
  W(0, 1) = -1; W(1, 0) = 1; W(2, 2) = 1;
  Mat3 R1 = matmul3(matmul3(U, W), transpose3(V));
  Mat3 R2 = matmul3(matmul3(U, transpose3(W)), transpose3(V));
  Vec3 t{{U(0, 2), U(1, 2), U(2, 2)}};
  Vec3 tn{{-t[0], -t[1], -t[2]}};
  return {RelativePose{R1, t}, RelativePose{R1, tn}, RelativePose{R2, t},
          RelativePose{R2, tn}};
}

inline RelativePose decompose_essential(const EssentialMatrix& E,
                                        const std::vector<Correspondence>& inliers) {
  CP_CHECK(!inliers.empty(), "decompose_essential: need at least 1 inlier");
  auto cands = essential_pose_candidates(E);
  int best = -1;
  size_t best_count = 0;
  for (int k = 0; k < 4; ++k) {
    size_t cnt = 0;
    for (const Correspondence& c : inliers)
      if (detail_geom::depths_positive(cands[size_t(k)].rotation,
                                       cands[size_t(k)].translation, c))
        ++cnt;
    if (best < 0 || cnt > best_count) {
      best = k;
      best_count = cnt;
    }
  }
  CP_CHECK(best_count * 2 > inliers.size(),
           "decompose_essential: no candidate has a positive-depth majority");
  return cands[size_t(best)];
}

// ---------------------------------------------------------------------------
// Angular pose errors in degrees; translation is sign-invariant.

inline std::pair<double, double> pose_error(const RelativePose& est,
                                            const RelativePose& gt) {
  Mat3 rtr = matmul3(transpose3(est.rotation), gt.rotation);
  double tr = rtr(0, 0) + rtr(1, 1) + rtr(2, 2);
  double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  double rot_err = std::acos(c) * 180.0 / 3.14159265358979323846;
  double td = std::abs(dot(normalized(est.translation), normalized(gt.translation)));
  double trans_err = std::acos(std::clamp(td, 0.0, 1.0)) * 180.0 / 3.14159265358979323846;
  return {rot_err, trans_err};
}

// ---------------------------------------------------------------------------
// Virtual correspondences: project a 13x13 image-plane grid through a pose
// recovered from E (any candidate satisfies the epipolar identity), at depths
// alternating in [4, 8]. Exact constraint satisfaction by construction.

struct VirtualCorrespondences {
  std::vector<Correspondence> pairs;  // p = (x, y, 1), q = (u, v, 1)
};

inline VirtualCorrespondences virtual_correspondences(const EssentialMatrix& E,
                                                      size_t count) {
  // Twisted-pair candidates put the grid behind view B, so try the four
  // decompositions in order and keep the first that fills the quota.
  auto cands = essential_pose_candidates(E);
  VirtualCorrespondences best;
  for (const RelativePose& pose : cands) {
    VirtualCorrespondences out;
    out.pairs.reserve(count);
    const int G = 13;
    const double depths[5] = {4.0, 8.0, 6.0, 5.0, 7.0};
    for (int layer = 0; layer < 5 && out.pairs.size() < count; ++layer) {
      for (int gi = 0; gi < G && out.pairs.size() < count; ++gi) {
        for (int gj = 0; gj < G && out.pairs.size() < count; ++gj) {
          const double gx = -0.35 + 0.70 * double(gi) / double(G - 1);
          const double gy = -0.35 + 0.70 * double(gj) / double(G - 1);
          const double z = depths[layer];
          const Vec3 xa{{gx * z, gy * z, z}};
          Vec3 xb = matvec3(pose.rotation, xa);
          for (int i = 0; i < 3; ++i) xb[i] += pose.translation[i];
          if (xb[2] < 0.1) continue;  // behind or grazing view B
          out.pairs.push_back({gx, gy, xb[0] / xb[2], xb[1] / xb[2]});
        }
      }
    }
    if (out.pairs.size() == count) return out;
    if (out.pairs.size() > best.pairs.size()) best = std::move(out);
  }
  CP_CHECK(best.pairs.size() == count,
           "virtual_correspondences: grid exhausted at " << best.pairs.size());
  return best;
}

// ---------------------------------------------------------------------------
// RANSAC with the 8-point minimal solver. Deterministic for a fixed seed:
// hypotheses are scored in order, ties keep the lowest hypothesis index, and
// the final model is refit on the winning consensus set. Each new best model
// triggers a local-optimization pass: minimal samples drawn from its own
// consensus, where the inlier fraction is far higher than in the full set, so
// a fixed iteration budget survives unlucky global sampling.

struct RansacResult {
  EssentialMatrix e;
  std::vector<uint8_t> mask;
  size_t inlier_count = 0;
  int best_iter = -1;
};

inline RansacResult ransac_essential(const std::vector<Correspondence>& c,
                                     int iters, double tau, uint64_t seed) {
  CP_CHECK(c.size() >= 8, "ransac_essential: need at least 8 correspondences");
  CP_CHECK(iters > 0, "ransac_essential: iters must be > 0");
  Rng rng(seed);
  Rng lo_rng = rng.split(0x4c4f);  // distinct stream keeps outer draws stable
  const size_t n = c.size();
  std::vector<Correspondence> sample(8);
  std::vector<uint8_t> best_mask;
  size_t best_count = 0;
  int best_iter = -1;

  auto score = [&](const EssentialMatrix& hyp, int it) {
    std::vector<uint8_t> mask = full_size_verification(hyp, c, tau);
    size_t count = 0;
    for (uint8_t m : mask) count += m;
    if (count > best_count) {
      best_count = count;
      best_mask = std::move(mask);
      best_iter = it;
      return true;
    }
    return false;
  };

  for (int it = 0; it < iters; ++it) {
    auto idx = rng.sample_without_replacement(int64_t(n), 8);
    for (int j = 0; j < 8; ++j) sample[size_t(j)] = c[size_t(idx[size_t(j)])];
    EssentialMatrix hyp;
    try {
      hyp = eight_point(sample);
    } catch (const Error&) {
      continue;  // degenerate minimal sample
    }
    if (!score(hyp, it)) continue;

    for (int round = 0; round < 20 && best_count >= 9; ++round) {
      std::vector<size_t> cons;
      cons.reserve(best_count);
      for (size_t i = 0; i < n; ++i)
        if (best_mask[i]) cons.push_back(i);
      auto pick = lo_rng.sample_without_replacement(int64_t(cons.size()), 8);
      for (int j = 0; j < 8; ++j) sample[size_t(j)] = c[cons[size_t(pick[size_t(j)])]];
      try {
        score(eight_point(sample), it);
      } catch (const Error&) {
      }
    }
  }
  CP_CHECK(best_count >= 8, "ransac_essential: no hypothesis reached 8 inliers");
  std::vector<Correspondence> consensus;
  consensus.reserve(best_count);
  for (size_t i = 0; i < n; ++i)
    if (best_mask[i]) consensus.push_back(c[i]);
  RansacResult out;
  out.e = eight_point(consensus);
  out.mask = full_size_verification(out.e, c, tau);
  out.inlier_count = 0;
  for (uint8_t m : out.mask) out.inlier_count += m;
  out.best_iter = best_iter;
  return out;
}

}  // namespace corrprune
