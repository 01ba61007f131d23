#pragma once
// Synthetic two-view scene generation with exact ground truth.
//
// Points are drawn uniformly in the first camera's viewing frustum and
// projected exactly into both views, so the ground-truth essential matrix
// satisfies q^T E p = 0 to machine precision before noise. Outliers keep
// their view-A location and receive a uniformly resampled view-B location,
// rejection-sampled to stay clearly outside the epipolar band so that
// construction labels and re-derived labels agree.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "corrprune/common.hpp"
#include "corrprune/geometry.hpp"
#include "corrprune/rng.hpp"

namespace corrprune {

struct ScenePair {
  RelativePose pose;
  EssentialMatrix e_gt;
  std::vector<Correspondence> correspondences;
  std::vector<uint8_t> labels;
  double noise_sigma = 0.0;
  double outlier_ratio = 0.0;
  uint64_t seed = 0;
};

// Random relative pose: rotation of at most max_angle_rad about a random
// axis, unit-length baseline.
inline RelativePose random_pose(Rng& rng, double max_angle_rad) {
  Vec3 axis;
  do {
    axis = Vec3{{rng.normal(), rng.normal(), rng.normal()}};
  } while (norm(axis) < 1e-6);
  const double angle = rng.uniform(0.0, max_angle_rad);
  Vec3 t;
  do {
    t = Vec3{{rng.normal(), rng.normal(), rng.normal()}};
  } while (norm(t) < 1e-6);
  RelativePose pose;
  pose.rotation = rot_axis_angle(axis, angle);
  pose.translation = normalized(t);
  return pose;
}

inline ScenePair synth_scene(int64_t n, double outlier_ratio,
                             double noise_sigma, uint64_t seed) {
  CP_CHECK(n >= 16, "synth_scene: n must be at least 16");
  CP_CHECK(outlier_ratio >= 0.0 && outlier_ratio < 1.0,
           "synth_scene: outlier_ratio must be in [0,1)");
  CP_CHECK(noise_sigma >= 0.0, "synth_scene: noise_sigma must be >= 0");

  constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
  constexpr double kTau = 1e-4;

  Rng rng(seed);
  ScenePair s;
  s.noise_sigma = noise_sigma;
  s.outlier_ratio = outlier_ratio;
  s.seed = seed;
  s.pose = random_pose(rng, 30.0 * kDegToRad);
  s.e_gt = compose_essential(s.pose);

  // Exact projections of frustum points visible in both views.
  s.correspondences.resize(static_cast<size_t>(n));
  std::vector<uint8_t> planned(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Correspondence c;
    for (;;) {
      const double ax = rng.uniform(-0.35, 0.35);
      const double ay = rng.uniform(-0.35, 0.35);
      const double z = rng.uniform(4.0, 8.0);
      const Vec3 xa{{ax * z, ay * z, z}};
      const Vec3 rx = matvec3(s.pose.rotation, xa);
      const Vec3 xb{{rx[0] + s.pose.translation[0],
                     rx[1] + s.pose.translation[1],
                     rx[2] + s.pose.translation[2]}};
      if (xb[2] < 0.1) continue;
      c = Correspondence{ax, ay, xb[0] / xb[2], xb[1] / xb[2]};
      break;
    }
    s.correspondences[static_cast<size_t>(i)] = c;
    planned[static_cast<size_t>(i)] = rng.uniform() < outlier_ratio ? 0 : 1;
  }

  // View-B bounding box over planned inliers; falls back to all rows when a
  // small scene draws no inliers at all.
  double ulo = 0, uhi = 0, vlo = 0, vhi = 0;
  bool box_set = false;
  for (int pass = 0; pass < 2 && !box_set; ++pass) {
    for (int64_t i = 0; i < n; ++i) {
      if (pass == 0 && !planned[static_cast<size_t>(i)]) continue;
      const Correspondence& c = s.correspondences[static_cast<size_t>(i)];
      if (!box_set) {
        ulo = uhi = c.u;
        vlo = vhi = c.v;
        box_set = true;
      } else {
        ulo = std::min(ulo, c.u);
        uhi = std::max(uhi, c.u);
        vlo = std::min(vlo, c.v);
        vhi = std::max(vhi, c.v);
      }
    }
  }

  // Outliers: uniformly resampled view-B coordinates, rejected while they
  // land within twice the verification threshold of the epipolar band. A
  // view-A point near the epipole zeroes E p, which keeps every view-B draw
  // inside the band, so after too many rejections the view-A point is
  // redrawn as well.
  for (int64_t i = 0; i < n; ++i) {
    if (planned[static_cast<size_t>(i)]) continue;
    Correspondence& c = s.correspondences[static_cast<size_t>(i)];
    for (bool placed = false; !placed;) {
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        c.u = rng.uniform(ulo, uhi);
        c.v = rng.uniform(vlo, vhi);
        placed = symmetric_epipolar_distance(s.e_gt, c) >= 2.0 * kTau;
      }
      if (!placed) {
        c.x = rng.uniform(-0.35, 0.35);
        c.y = rng.uniform(-0.35, 0.35);
      }
    }
  }

  // Gaussian perturbation of inlier coordinates in both views.
  if (noise_sigma > 0.0) {
    for (int64_t i = 0; i < n; ++i) {
      if (!planned[static_cast<size_t>(i)]) continue;
      Correspondence& c = s.correspondences[static_cast<size_t>(i)];
      c.x += rng.normal(0.0, noise_sigma);
      c.y += rng.normal(0.0, noise_sigma);
      c.u += rng.normal(0.0, noise_sigma);
      c.v += rng.normal(0.0, noise_sigma);
    }
  }

  // Labels re-derived from geometry so borderline noisy rows stay consistent
  // with the verification predicate.
  s.labels = inlier_labels(s.correspondences, s.e_gt, kTau);
  return s;
}

}  // namespace corrprune
