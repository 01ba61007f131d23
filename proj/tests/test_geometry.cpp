#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include <corrprune/geometry.hpp>
#include <corrprune/rng.hpp>

using namespace corrprune;

namespace {

// Test-side scene generator: exact projections through a random pose.
struct ExactScene {
  RelativePose pose;
  EssentialMatrix e;
  std::vector<Correspondence> corr;
};

ExactScene make_exact_scene(uint64_t seed, size_t n, double max_angle = 0.5) {
  Rng rng(seed);
  Vec3 axis{{rng.normal(), rng.normal(), rng.normal()}};
  Mat3 R = rot_axis_angle(axis, rng.uniform(0.1, max_angle));
  Vec3 t = normalized({{rng.normal(), rng.normal(), rng.normal()}});
  ExactScene s;
  s.pose = {R, t};
  s.e = compose_essential(s.pose);
  while (s.corr.size() < n) {
    double x = rng.uniform(-0.4, 0.4), y = rng.uniform(-0.4, 0.4);
    double z = rng.uniform(4.0, 8.0);
    Vec3 xa{{x * z, y * z, z}};
    Vec3 xb = matvec3(R, xa);
    for (int i = 0; i < 3; ++i) xb[i] += t[i];
    if (xb[2] < 0.1) continue;
    s.corr.push_back({x, y, xb[0] / xb[2], xb[1] / xb[2]});
  }
  return s;
}

double fro_diff(const EssentialMatrix& a, const EssentialMatrix& b) {
  double s = 0;
  for (int i = 0; i < 9; ++i) {
    double d = a.e.m[i] - b.e.m[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("normalize_keypoints maps principal point to origin") {
  CameraIntrinsics k{800, 600, 320, 240};
  double px[2] = {320, 320 + 800};
  double py[2] = {240, 240 + 600};
  double nx[2], ny[2];
  normalize_keypoints(px, py, k, 2, nx, ny);
  REQUIRE(nx[0] == 0.0);
  REQUIRE(ny[0] == 0.0);
  REQUIRE(nx[1] == 1.0);
  REQUIRE(ny[1] == 1.0);
}

TEST_CASE("normalize/denormalize round-trip within 1e-12") {
  CameraIntrinsics k{731.5, 719.25, 301.125, 255.75};
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    double px = rng.uniform(0, 640), py = rng.uniform(0, 480);
    double nx, ny, bx, by;
    normalize_keypoints(&px, &py, k, 1, &nx, &ny);
    denormalize_keypoints(&nx, &ny, k, 1, &bx, &by);
    REQUIRE(std::abs(bx - px) < 1e-12);
    REQUIRE(std::abs(by - py) < 1e-12);
  }
}

TEST_CASE("normalize_keypoints rejects non-positive focal lengths") {
  CameraIntrinsics bad{0, 1, 0, 0};
  double x = 1, y = 1, nx, ny;
  REQUIRE_THROWS_AS(normalize_keypoints(&x, &y, bad, 1, &nx, &ny), Error);
}

TEST_CASE("compose_essential of pure x/z translations") {
  Mat3 I{};
  I(0, 0) = I(1, 1) = I(2, 2) = 1;
  // t = (1,0,0): E proportional to [[0,0,0],[0,0,-1],[0,1,0]]; the canonical
  // sign flip makes the first largest-magnitude entry positive.
  EssentialMatrix ex = compose_essential({I, {{1, 0, 0}}});
  const double s = 1.0 / std::sqrt(2.0);
  double want_x[9] = {0, 0, 0, 0, 0, s, 0, -s, 0};
  for (int i = 0; i < 9; ++i) REQUIRE(ex.e.m[i] == Catch::Approx(want_x[i]).margin(1e-15));
  // t = (0,0,1): E proportional to [[0,-1,0],[1,0,0],[0,0,0]].
  EssentialMatrix ez = compose_essential({I, {{0, 0, 1}}});
  double want_z[9] = {0, s, 0, -s, 0, 0, 0, 0, 0};
  for (int i = 0; i < 9; ++i) REQUIRE(ez.e.m[i] == Catch::Approx(want_z[i]).margin(1e-15));
}

TEST_CASE("exact projections satisfy the epipolar constraint below 1e-10") {
  for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    ExactScene s = make_exact_scene(seed, 64);
    for (const Correspondence& c : s.corr) {
      Vec3 p{{c.x, c.y, 1}}, q{{c.u, c.v, 1}};
      REQUIRE(std::abs(dot(q, matvec3(s.e.e, p))) < 1e-10);
    }
  }
}

TEST_CASE("composed essential matrices have the rank-2 equal-singular structure") {
  ExactScene s = make_exact_scene(17, 8);
  Eigen::Matrix3d E;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) E(i, j) = s.e.e(i, j);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(E);
  auto sv = svd.singularValues();
  REQUIRE(std::abs(sv(0) - sv(1)) < 1e-6);
  REQUIRE(sv(2) < 1e-6);
  double fro = 0;
  for (int i = 0; i < 9; ++i) fro += s.e.e.m[i] * s.e.e.m[i];
  REQUIRE(std::sqrt(fro) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("weighted eight-point recovers E from 16 exact inliers") {
  ExactScene s = make_exact_scene(7, 16);
  EssentialMatrix est = weighted_eight_point(s.corr, std::vector<double>(16, 1.0));
  REQUIRE(fro_diff(est, s.e) < 1e-6);
}

TEST_CASE("zero-weight outliers do not affect the estimate") {
  ExactScene s = make_exact_scene(9, 24);
  std::vector<Correspondence> with_outliers = s.corr;
  std::vector<double> w(24, 1.0);
  Rng rng(100);
  for (int i = 0; i < 12; ++i) {
    with_outliers.push_back({rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                             rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)});
    w.push_back(0.0);
  }
  EssentialMatrix masked = weighted_eight_point(with_outliers, w);
  EssentialMatrix clean = weighted_eight_point(s.corr, std::vector<double>(24, 1.0));
  REQUIRE(fro_diff(masked, clean) < 1e-9);
}

TEST_CASE("uniform weights match the classical SVD eight-point oracle") {
  ExactScene s = make_exact_scene(11, 16);
  EssentialMatrix core = weighted_eight_point(s.corr, std::vector<double>(16, 1.0));
  // Oracle route: full SVD of the stacked constraint matrix (Eigen).
  Eigen::MatrixXd X(16, 9);
  for (int i = 0; i < 16; ++i) {
    const Correspondence& c = s.corr[size_t(i)];
    X.row(i) << c.u * c.x, c.u * c.y, c.u, c.v * c.x, c.v * c.y, c.v, c.x, c.y, 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeFullV);
  Eigen::VectorXd v = svd.matrixV().col(8);
  Mat3 raw;
  for (int i = 0; i < 9; ++i) raw.m[i] = v(i);
  EssentialMatrix oracle = canonicalize_essential(raw);
  REQUIRE(fro_diff(core, oracle) < 1e-9);
}

TEST_CASE("weighted eight-point is invariant to positive weight rescaling") {
  ExactScene s = make_exact_scene(13, 20);
  Rng rng(14);
  std::vector<double> w(20);
  for (double& x : w) x = rng.uniform(0.1, 1.0);
  std::vector<double> w5(w);
  for (double& x : w5) x *= 537.25;
  EssentialMatrix a = weighted_eight_point(s.corr, w);
  EssentialMatrix b = weighted_eight_point(s.corr, w5);
  REQUIRE(fro_diff(a, b) < 1e-9);
}

TEST_CASE("weighted eight-point contract errors") {
  ExactScene s = make_exact_scene(15, 10);
  std::vector<double> w(10, 1.0);
  w[0] = w[1] = w[2] = 0.0;  // 7 positive
  REQUIRE_THROWS_AS(weighted_eight_point(s.corr, w), Error);
  REQUIRE_THROWS_AS(weighted_eight_point(
                        std::vector<Correspondence>(s.corr.begin(), s.corr.begin() + 7),
                        std::vector<double>(7, 1.0)),
                    Error);
  std::vector<double> wn(10, 1.0);
  wn[3] = -0.5;
  REQUIRE_THROWS_AS(weighted_eight_point(s.corr, wn), Error);
  // Degenerate: all correspondences identical.
  std::vector<Correspondence> degen(10, s.corr[0]);
  REQUIRE_THROWS_AS(weighted_eight_point(degen, std::vector<double>(10, 1.0)), Error);
}

TEST_CASE("symmetric epipolar distance: exact inliers, sign invariance, oracle") {
  ExactScene s = make_exact_scene(21, 32);
  for (const Correspondence& c : s.corr)
    REQUIRE(symmetric_epipolar_distance(s.e, c) < 1e-16);

  EssentialMatrix neg = s.e;
  for (double& x : neg.e.m) x = -x;
  Rng rng(22);
  for (int i = 0; i < 20; ++i) {
    Correspondence c{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    double d1 = symmetric_epipolar_distance(s.e, c);
    double d2 = symmetric_epipolar_distance(neg, c);
    REQUIRE(d1 == Catch::Approx(d2).epsilon(1e-14));
    // Independent oracle: same formula through Eigen.
    Eigen::Matrix3d E;
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) E(r, k) = s.e.e(r, k);
    Eigen::Vector3d p(c.x, c.y, 1.0), q(c.u, c.v, 1.0);
    double num = q.dot(E * p);
    Eigen::Vector3d Ep = E * p, Etq = E.transpose() * q;
    double den = Ep(0) * Ep(0) + Ep(1) * Ep(1) + Etq(0) * Etq(0) + Etq(1) * Etq(1) + 1e-12;
    double want = num * num / den;
    REQUIRE(d1 == Catch::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("full-size verification masks noise-free scenes correctly") {
  ExactScene s = make_exact_scene(25, 40);
  auto mask = full_size_verification(s.e, s.corr, 1e-4);
  for (uint8_t m : mask) REQUIRE(m == 1);
  // tau = 0: strict inequality empties the mask.
  auto none = full_size_verification(s.e, s.corr, 0.0);
  for (uint8_t m : none) REQUIRE(m == 0);
  REQUIRE_THROWS_AS(full_size_verification(s.e, s.corr, -1.0), Error);
}

TEST_CASE("decompose_essential round-trips a random pose") {
  // Tolerance: 1e-6 rad. The degree-valued error cannot go below ~2e-6 even
  // for exact recovery, because acos near 1 amplifies rounding by sqrt.
  const double tol_deg = 1e-6 * 180.0 / 3.14159265358979323846;
  for (uint64_t seed : {31ULL, 32ULL, 33ULL, 34ULL}) {
    ExactScene s = make_exact_scene(seed, 24);
    RelativePose est = decompose_essential(s.e, s.corr);
    auto [rot_err, trans_err] = pose_error(est, s.pose);
    REQUIRE(rot_err < tol_deg);
    REQUIRE(trans_err < tol_deg);
  }
}

TEST_CASE("cheirality picks the candidate matching the observations") {
  // Same E, two scenes with opposite translations: decomposition follows
  // whichever side the observations came from.
  Rng rng(35);
  Mat3 R = rot_axis_angle({{0.2, -0.7, 0.4}}, 0.3);
  Vec3 t = normalized({{0.3, 0.9, 0.1}});
  Vec3 tn{{-t[0], -t[1], -t[2]}};
  auto project = [&](const Vec3& tt, size_t n) {
    std::vector<Correspondence> corr;
    Rng r2(36);
    while (corr.size() < n) {
      double x = r2.uniform(-0.3, 0.3), y = r2.uniform(-0.3, 0.3);
      double z = r2.uniform(4, 8);
      Vec3 xa{{x * z, y * z, z}};
      Vec3 xb = matvec3(R, xa);
      for (int i = 0; i < 3; ++i) xb[i] += tt[i];
      if (xb[2] < 0.1) continue;
      corr.push_back({x, y, xb[0] / xb[2], xb[1] / xb[2]});
    }
    return corr;
  };
  EssentialMatrix e = compose_essential({R, t});
  RelativePose fwd = decompose_essential(e, project(t, 20));
  RelativePose bwd = decompose_essential(e, project(tn, 20));
  REQUIRE(dot(fwd.translation, bwd.translation) < -0.99);
  const double tol_deg = 1e-6 * 180.0 / 3.14159265358979323846;
  auto [re1, te1] = pose_error(fwd, {R, t});
  auto [re2, te2] = pose_error(bwd, {R, tn});
  REQUIRE(re1 < tol_deg);
  REQUIRE(te1 < tol_deg);
  REQUIRE(re2 < tol_deg);
  REQUIRE(te2 < tol_deg);
}

TEST_CASE("decompose_essential needs inliers and a depth majority") {
  ExactScene s = make_exact_scene(37, 12);
  REQUIRE_THROWS_AS(decompose_essential(s.e, {}), Error);
}

TEST_CASE("pose_error basics") {
  // Identical poses measure ~0; the acos floor keeps it near 2e-6 degrees.
  ExactScene s = make_exact_scene(41, 8);
  auto [re, te] = pose_error(s.pose, s.pose);
  REQUIRE(re < 5e-6);
  REQUIRE(te < 5e-6);
  RelativePose flipped = s.pose;
  for (int i = 0; i < 3; ++i) flipped.translation[i] = -flipped.translation[i];
  auto [re2, te2] = pose_error(flipped, s.pose);
  REQUIRE(te2 < 5e-6);
  REQUIRE(re2 < 5e-6);
  // 10 degrees about z.
  Mat3 I{};
  I(0, 0) = I(1, 1) = I(2, 2) = 1;
  Mat3 Rz = rot_axis_angle({{0, 0, 1}}, 10.0 * 3.14159265358979323846 / 180.0);
  auto [re3, te3] = pose_error({Rz, {{1, 0, 0}}}, {I, {{1, 0, 0}}});
  REQUIRE(re3 == Catch::Approx(10.0).margin(1e-9));
  REQUIRE(te3 == 0.0);
}

TEST_CASE("virtual correspondences satisfy the constraint exactly") {
  ExactScene s = make_exact_scene(43, 8);
  VirtualCorrespondences vc = virtual_correspondences(s.e, 169);
  REQUIRE(vc.pairs.size() == 169);
  for (const Correspondence& c : vc.pairs) {
    Vec3 p{{c.x, c.y, 1}}, q{{c.u, c.v, 1}};
    REQUIRE(std::abs(dot(q, matvec3(s.e.e, p))) < 1e-10);
  }
  // Spread: distinct grid cells give distinct p.
  for (size_t i = 0; i < vc.pairs.size(); ++i)
    for (size_t j = i + 1; j < vc.pairs.size(); ++j) {
      double dx = vc.pairs[i].x - vc.pairs[j].x;
      double dy = vc.pairs[i].y - vc.pairs[j].y;
      REQUIRE(dx * dx + dy * dy > 0.0);
    }
}

TEST_CASE("ransac on a noise-free all-inlier set recovers E") {
  ExactScene s = make_exact_scene(47, 50);
  RansacResult r = ransac_essential(s.corr, 16, 1e-4, 123);
  REQUIRE(fro_diff(r.e, s.e) < 1e-6);
  REQUIRE(r.inlier_count == 50);
}

TEST_CASE("ransac handles 50 percent outliers with high recall") {
  ExactScene s = make_exact_scene(53, 100);
  std::vector<Correspondence> mixed = s.corr;
  Rng rng(54);
  for (int i = 0; i < 100; ++i) {
    Correspondence c;
    do {
      c = {rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
           rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
    } while (symmetric_epipolar_distance(s.e, c) < 2e-4);
    mixed.push_back(c);
  }
  RansacResult r = ransac_essential(mixed, 1000, 1e-4, 77);
  size_t recovered = 0;
  for (size_t i = 0; i < 100; ++i) recovered += r.mask[i];
  REQUIRE(double(recovered) / 100.0 >= 0.99);
}

TEST_CASE("ransac is bit-reproducible for a fixed seed and errors on iters=0") {
  ExactScene s = make_exact_scene(59, 40);
  RansacResult a = ransac_essential(s.corr, 32, 1e-4, 9);
  RansacResult b = ransac_essential(s.corr, 32, 1e-4, 9);
  REQUIRE(a.mask == b.mask);
  for (int i = 0; i < 9; ++i) REQUIRE(a.e.e.m[i] == b.e.e.m[i]);
  REQUIRE(a.best_iter == b.best_iter);
  REQUIRE_THROWS_AS(ransac_essential(s.corr, 0, 1e-4, 9), Error);
}
