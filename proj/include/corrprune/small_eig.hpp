#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <corrprune/common.hpp>

namespace corrprune {

// Cyclic Jacobi eigensolver for small dense symmetric matrices (n <= ~32).
// Input is symmetrized as (M + M^T)/2. Eigenvalues come back ascending;
// eigenvector k is the k-th column of V (row-major), each of unit norm.
// Deterministic: fixed sweep order, fixed sweep cap.
inline void eig_sym_jacobi(const double* M, int n, std::vector<double>& evals,
                           std::vector<double>& evecs) {
  CP_CHECK(n >= 1, "eig_sym_jacobi: n must be positive");
  std::vector<double> B(size_t(n) * size_t(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      B[size_t(i) * n + j] = 0.5 * (M[size_t(i) * n + j] + M[size_t(j) * n + i]);

  std::vector<double> V(size_t(n) * size_t(n), 0.0);
  for (int i = 0; i < n; ++i) V[size_t(i) * n + i] = 1.0;

  double fro = 0.0;
  for (double x : B) fro += x * x;
  const double tol = 1e-28 * (fro > 0 ? fro : 1.0);

  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += 2.0 * B[size_t(p) * n + q] * B[size_t(p) * n + q];
    if (off <= tol) break;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = B[size_t(p) * n + q];
        if (apq == 0.0) continue;
        double app = B[size_t(p) * n + p];
        double aqq = B[size_t(q) * n + q];
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int k = 0; k < n; ++k) {
          double bkp = B[size_t(k) * n + p];
          double bkq = B[size_t(k) * n + q];
          B[size_t(k) * n + p] = c * bkp - s * bkq;
          B[size_t(k) * n + q] = s * bkp + c * bkq;
        }
        for (int k = 0; k < n; ++k) {
          double bpk = B[size_t(p) * n + k];
          double bqk = B[size_t(q) * n + k];
          B[size_t(p) * n + k] = c * bpk - s * bqk;
          B[size_t(q) * n + k] = s * bpk + c * bqk;
        }
        B[size_t(p) * n + q] = 0.0;
        B[size_t(q) * n + p] = 0.0;
        for (int k = 0; k < n; ++k) {
          double vkp = V[size_t(k) * n + p];
          double vkq = V[size_t(k) * n + q];
          V[size_t(k) * n + p] = c * vkp - s * vkq;
          V[size_t(k) * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<int> ord(static_cast<size_t>(n));
  std::iota(ord.begin(), ord.end(), 0);
  std::vector<double> d(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) d[size_t(i)] = B[size_t(i) * n + i];
  std::stable_sort(ord.begin(), ord.end(),
                   [&](int a, int b) { return d[size_t(a)] < d[size_t(b)]; });

  evals.assign(size_t(n), 0.0);
  evecs.assign(size_t(n) * size_t(n), 0.0);
  for (int k = 0; k < n; ++k) {
    evals[size_t(k)] = d[size_t(ord[size_t(k)])];
    for (int i = 0; i < n; ++i)
      evecs[size_t(i) * n + k] = V[size_t(i) * n + ord[size_t(k)]];
  }
}

// Sign convention shared by every eigenvector consumer: the entry of largest
// magnitude (first such index on ties) is made non-negative.
inline void canonicalize_sign(double* v, int n) {
  int best = 0;
  double besta = std::abs(v[0]);
  for (int i = 1; i < n; ++i) {
    double a = std::abs(v[i]);
    if (a > besta) {
      besta = a;
      best = i;
    }
  }
  if (v[best] < 0.0)
    for (int i = 0; i < n; ++i) v[i] = -v[i];
}

}  // namespace corrprune
