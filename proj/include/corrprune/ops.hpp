#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <corrprune/common.hpp>
#include <corrprune/small_eig.hpp>
#include <corrprune/tensor.hpp>

namespace corrprune {
namespace detail {

// Register-blocked GEMM kernels, single-threaded, deterministic summation
// order (k ascending for every output element). All kernels accumulate.

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(double* C, const double* A, const double* B, int64_t M,
                    int64_t K, int64_t N) {
  int64_t i = 0;
  for (; i + 4 <= M; i += 4) {
    double* c0 = C + (i + 0) * N;
    double* c1 = C + (i + 1) * N;
    double* c2 = C + (i + 2) * N;
    double* c3 = C + (i + 3) * N;
    for (int64_t k = 0; k < K; ++k) {
      const double a0 = A[(i + 0) * K + k];
      const double a1 = A[(i + 1) * K + k];
      const double a2 = A[(i + 2) * K + k];
      const double a3 = A[(i + 3) * K + k];
      const double* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) {
        c0[j] += a0 * b[j];
        c1[j] += a1 * b[j];
        c2[j] += a2 * b[j];
        c3[j] += a3 * b[j];
      }
    }
  }
  for (; i < M; ++i) {
    double* c = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const double a = A[i * K + k];
      const double* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T (rows of B are dotted with rows of A)
inline void gemm_nt(double* C, const double* A, const double* B, int64_t M,
                    int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    for (int64_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
      int64_t k = 0;
      for (; k + 8 <= K; k += 8)
        for (int l = 0; l < 8; ++l) lane[l] += a[k + l] * b[k + l];
      double s = ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
                 ((lane[4] + lane[5]) + (lane[6] + lane[7]));
      for (; k < K; ++k) s += a[k] * b[k];
      C[i * N + j] += s;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(double* C, const double* A, const double* B, int64_t M,
                    int64_t K, int64_t N) {
  for (int64_t k = 0; k < K; ++k) {
    const double* b = B + k * N;
    int64_t i = 0;
    for (; i + 4 <= M; i += 4) {
      const double a0 = A[k * M + i + 0];
      const double a1 = A[k * M + i + 1];
      const double a2 = A[k * M + i + 2];
      const double a3 = A[k * M + i + 3];
      double* c0 = C + (i + 0) * N;
      double* c1 = C + (i + 1) * N;
      double* c2 = C + (i + 2) * N;
      double* c3 = C + (i + 3) * N;
      for (int64_t j = 0; j < N; ++j) {
        c0[j] += a0 * b[j];
        c1[j] += a1 * b[j];
        c2[j] += a2 * b[j];
        c3[j] += a3 * b[j];
      }
    }
    for (; i < M; ++i) {
      const double a = A[k * M + i];
      double* c = C + i * N;
      for (int64_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape).

inline Tensor add(const Tensor& a, const Tensor& b) {
  CP_CHECK(a.shape() == b.shape(), "add: shape mismatch");
  Tensor out = make_op("add", a.shape(), {a, b});
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (out.requires_grad()) {
    out.node()->backward = [a, b](Node& self) {
      const double* g = self.grad->v.data();
      const int64_t n = self.numel();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      if (double* gb = grad_sink(b))
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  CP_CHECK(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out = make_op("sub", a.shape(), {a, b});
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (out.requires_grad()) {
    out.node()->backward = [a, b](Node& self) {
      const double* g = self.grad->v.data();
      const int64_t n = self.numel();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      if (double* gb = grad_sink(b))
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  CP_CHECK(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out = make_op("mul", a.shape(), {a, b});
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (out.requires_grad()) {
    out.node()->backward = [a, b](Node& self) {
      const double* g = self.grad->v.data();
      const int64_t n = self.numel();
      if (double* ga = grad_sink(a)) {
        const double* pb = b.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
      }
      if (double* gb = grad_sink(b)) {
        const double* pa = a.data();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
      }
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  CP_CHECK(a.shape() == b.shape(), "div: shape mismatch");
  Tensor out = make_op("div", a.shape(), {a, b});
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  if (out.requires_grad()) {
    out.node()->backward = [a, b, out](Node& self) {
      const double* g = self.grad->v.data();
      const double* pb = b.data();
      const double* pc = out.data();
      const int64_t n = self.numel();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] / pb[i];
      if (double* gb = grad_sink(b))
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i] * pc[i] / pb[i];
    };
  }
  finalize_op(out);
  return out;
}

// ---------------------------------------------------------------------------
// Scalar and unary ops.

inline Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = make_op("add_scalar", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + s;
  if (out.requires_grad()) {
    out.node()->backward = [a](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < self.numel(); ++i) ga[i] += g[i];
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = make_op("mul_scalar", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (out.requires_grad()) {
    out.node()->backward = [a, s](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < self.numel(); ++i) ga[i] += g[i] * s;
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor relu(const Tensor& a) {
  Tensor out = make_op("relu", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  if (out.requires_grad()) {
    out.node()->backward = [a](Node& self) {
      const double* g = self.grad->v.data();
      const double* pa = a.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < self.numel(); ++i)
          if (pa[i] > 0.0) ga[i] += g[i];
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor tanh_t(const Tensor& a) {
  Tensor out = make_op("tanh", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
  if (out.requires_grad()) {
    out.node()->backward = [a, out](Node& self) {
      const double* g = self.grad->v.data();
      const double* y = out.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < self.numel(); ++i)
          ga[i] += g[i] * (1.0 - y[i] * y[i]);
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out = make_op("sigmoid", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double x = pa[i];
    if (x >= 0.0) {
      po[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      po[i] = e / (1.0 + e);
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, out](Node& self) {
      const double* g = self.grad->v.data();
      const double* y = out.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < self.numel(); ++i)
          ga[i] += g[i] * y[i] * (1.0 - y[i]);
    };
  }
  finalize_op(out);
  return out;
}

// elu(x) + 1: positive everywhere, C1-continuous; feature map of the
// conserved-flow attention.
inline Tensor elu1p(const Tensor& a) {
  Tensor out = make_op("elu1p", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i)
    po[i] = pa[i] > 0.0 ? pa[i] + 1.0 : std::exp(pa[i]);
  if (out.requires_grad()) {
    out.node()->backward = [a, out](Node& self) {
      const double* g = self.grad->v.data();
      const double* pa = a.data();
      const double* y = out.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < self.numel(); ++i)
          ga[i] += g[i] * (pa[i] > 0.0 ? 1.0 : y[i]);
    };
  }
  finalize_op(out);
  return out;
}

// Numerically stable log(1 + exp(x)).
inline Tensor softplus(const Tensor& a) {
  Tensor out = make_op("softplus", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double x = pa[i];
    po[i] = (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  if (out.requires_grad()) {
    out.node()->backward = [a](Node& self) {
      const double* g = self.grad->v.data();
      const double* pa = a.data();
      if (double* ga = grad_sink(a)) {
        for (int64_t i = 0; i < self.numel(); ++i) {
          const double x = pa[i];
          double sig;
          if (x >= 0.0) {
            sig = 1.0 / (1.0 + std::exp(-x));
          } else {
            const double e = std::exp(x);
            sig = e / (1.0 + e);
          }
          ga[i] += g[i] * sig;
        }
      }
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor exp_t(const Tensor& a) {
  Tensor out = make_op("exp", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::exp(pa[i]);
  if (out.requires_grad()) {
    out.node()->backward = [a, out](Node& self) {
      const double* g = self.grad->v.data();
      const double* y = out.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < self.numel(); ++i) ga[i] += g[i] * y[i];
    };
  }
  finalize_op(out);
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops. view() shares the value buffer (and later the grad buffer), so
// it costs nothing; transpose() makes a reordered copy.

inline Tensor view(const Tensor& a, std::vector<int64_t> shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  CP_CHECK(n == a.numel(), "view: numel mismatch");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->val = a.handle()->val;
  node->op = "view";
  if (grad_mode() && a.requires_grad()) {
    node->requires_grad = true;
    node->is_view = true;
    node->parents = {a};
  }
  return Tensor(node);
}

inline Tensor transpose(const Tensor& a) {
  const int64_t R = a.rows(), C = a.cols();
  Tensor out = make_op("transpose", {C, R}, {a});
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < C; ++j) po[j * R + i] = pa[i * C + j];
  if (out.requires_grad()) {
    out.node()->backward = [a, R, C](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < C; ++j) ga[i * C + j] += g[j * R + i];
    };
  }
  finalize_op(out);
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast ops over rows/columns of a rank-2 tensor.

inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  const int64_t R = a.rows(), C = a.cols();
  CP_CHECK(b.rank() == 1 && b.dim(0) == C, "add_rowvec: want length-" << C);
  Tensor out = make_op("add_rowvec", a.shape(), {a, b});
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < C; ++j) po[i * C + j] = pa[i * C + j] + pb[j];
  if (out.requires_grad()) {
    out.node()->backward = [a, b, R, C](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < R * C; ++i) ga[i] += g[i];
      if (double* gb = grad_sink(b))
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < C; ++j) gb[j] += g[i * C + j];
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor mul_rowvec(const Tensor& a, const Tensor& b) {
  const int64_t R = a.rows(), C = a.cols();
  CP_CHECK(b.rank() == 1 && b.dim(0) == C, "mul_rowvec: want length-" << C);
  Tensor out = make_op("mul_rowvec", a.shape(), {a, b});
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < C; ++j) po[i * C + j] = pa[i * C + j] * pb[j];
  if (out.requires_grad()) {
    out.node()->backward = [a, b, R, C](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a)) {
        const double* pb = b.data();
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < C; ++j) ga[i * C + j] += g[i * C + j] * pb[j];
      }
      if (double* gb = grad_sink(b)) {
        const double* pa = a.data();
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < C; ++j) gb[j] += g[i * C + j] * pa[i * C + j];
      }
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor mul_colvec(const Tensor& a, const Tensor& b) {
  const int64_t R = a.rows(), C = a.cols();
  CP_CHECK(b.rank() == 1 && b.dim(0) == R, "mul_colvec: want length-" << R);
  Tensor out = make_op("mul_colvec", a.shape(), {a, b});
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < R; ++i) {
    const double s = pb[i];
    for (int64_t j = 0; j < C; ++j) po[i * C + j] = pa[i * C + j] * s;
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, b, R, C](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a)) {
        const double* pb = b.data();
        for (int64_t i = 0; i < R; ++i) {
          const double s = pb[i];
          for (int64_t j = 0; j < C; ++j) ga[i * C + j] += g[i * C + j] * s;
        }
      }
      if (double* gb = grad_sink(b)) {
        const double* pa = a.data();
        for (int64_t i = 0; i < R; ++i) {
          double s = 0.0;
          for (int64_t j = 0; j < C; ++j) s += g[i * C + j] * pa[i * C + j];
          gb[i] += s;
        }
      }
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor div_colvec(const Tensor& a, const Tensor& b) {
  const int64_t R = a.rows(), C = a.cols();
  CP_CHECK(b.rank() == 1 && b.dim(0) == R, "div_colvec: want length-" << R);
  Tensor out = make_op("div_colvec", a.shape(), {a, b});
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < R; ++i) {
    const double s = 1.0 / pb[i];
    for (int64_t j = 0; j < C; ++j) po[i * C + j] = pa[i * C + j] * s;
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, b, out, R, C](Node& self) {
      const double* g = self.grad->v.data();
      const double* pb = b.data();
      if (double* ga = grad_sink(a)) {
        for (int64_t i = 0; i < R; ++i) {
          const double s = 1.0 / pb[i];
          for (int64_t j = 0; j < C; ++j) ga[i * C + j] += g[i * C + j] * s;
        }
      }
      if (double* gb = grad_sink(b)) {
        const double* pc = out.data();
        for (int64_t i = 0; i < R; ++i) {
          double s = 0.0;
          for (int64_t j = 0; j < C; ++j) s += g[i * C + j] * pc[i * C + j];
          gb[i] -= s / pb[i];
        }
      }
    };
  }
  finalize_op(out);
  return out;
}

// ---------------------------------------------------------------------------
// Matmul with transpose flags (never both).

inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false,
                     bool tb = false) {
  CP_CHECK(!(ta && tb), "matmul: ta and tb both set is unsupported");
  CP_CHECK(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 inputs required");
  int64_t M, K, N;
  if (!ta && !tb) {
    M = a.rows(); K = a.cols(); N = b.cols();
    CP_CHECK(b.rows() == K, "matmul nn: inner dim mismatch");
  } else if (!ta && tb) {
    M = a.rows(); K = a.cols(); N = b.rows();
    CP_CHECK(b.cols() == K, "matmul nt: inner dim mismatch");
  } else {
    M = a.cols(); K = a.rows(); N = b.cols();
    CP_CHECK(b.rows() == K, "matmul tn: inner dim mismatch");
  }
  Tensor out = make_op("matmul", {M, N}, {a, b});
  if (!ta && !tb)
    detail::gemm_nn(out.data(), a.data(), b.data(), M, K, N);
  else if (!ta && tb)
    detail::gemm_nt(out.data(), a.data(), b.data(), M, K, N);
  else
    detail::gemm_tn(out.data(), a.data(), b.data(), M, K, N);
  if (out.requires_grad()) {
    out.node()->backward = [a, b, ta, tb, M, K, N](Node& self) {
      const double* g = self.grad->v.data();
      if (!ta && !tb) {
        // gA = gC B^T, gB = A^T gC
        if (double* ga = grad_sink(a)) detail::gemm_nt(ga, g, b.data(), M, N, K);
        if (double* gb = grad_sink(b)) detail::gemm_tn(gb, a.data(), g, K, M, N);
      } else if (!ta && tb) {
        // gA = gC B, gB = gC^T A
        if (double* ga = grad_sink(a)) detail::gemm_nn(ga, g, b.data(), M, N, K);
        if (double* gb = grad_sink(b)) detail::gemm_tn(gb, g, a.data(), N, M, K);
      } else {  // ta: gA = B gC^T, gB = A gC
        if (double* ga = grad_sink(a)) detail::gemm_nt(ga, b.data(), g, K, N, M);
        if (double* gb = grad_sink(b)) detail::gemm_nn(gb, a.data(), g, K, M, N);
      }
    };
  }
  finalize_op(out);
  return out;
}

// A[M,K] (or A^T) times a vector, via views; returns rank-1.
inline Tensor matvec(const Tensor& a, const Tensor& x, bool ta = false) {
  CP_CHECK(x.rank() == 1, "matvec: x must be rank-1");
  Tensor xc = view(x, {x.dim(0), 1});
  Tensor y = matmul(a, xc, ta, false);
  return view(y, {y.rows()});
}

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum_all(const Tensor& a) {
  Tensor out = make_op("sum_all", {1}, {a});
  const double* pa = a.data();
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += pa[i];
  out.data()[0] = s;
  if (out.requires_grad()) {
    out.node()->backward = [a](Node& self) {
      const double g = self.grad->v[0];
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / double(a.numel()));
}

// axis 0: reduce over rows -> [C]; axis 1: reduce over cols -> [R].
inline Tensor sum_axis(const Tensor& a, int axis) {
  const int64_t R = a.rows(), C = a.cols();
  CP_CHECK(axis == 0 || axis == 1, "sum_axis: axis must be 0 or 1");
  Tensor out = make_op("sum_axis", {axis == 0 ? C : R}, {a});
  const double* pa = a.data();
  double* po = out.data();
  if (axis == 0) {
    for (int64_t i = 0; i < R; ++i)
      for (int64_t j = 0; j < C; ++j) po[j] += pa[i * C + j];
  } else {
    for (int64_t i = 0; i < R; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < C; ++j) s += pa[i * C + j];
      po[i] = s;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, axis, R, C](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a)) {
        if (axis == 0) {
          for (int64_t i = 0; i < R; ++i)
            for (int64_t j = 0; j < C; ++j) ga[i * C + j] += g[j];
        } else {
          for (int64_t i = 0; i < R; ++i)
            for (int64_t j = 0; j < C; ++j) ga[i * C + j] += g[i];
        }
      }
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor mean_axis(const Tensor& a, int axis) {
  const double inv = 1.0 / double(axis == 0 ? a.rows() : a.cols());
  return mul_scalar(sum_axis(a, axis), inv);
}

// Max along an axis; ties resolve to the lowest index.
inline Tensor max_axis(const Tensor& a, int axis) {
  const int64_t R = a.rows(), C = a.cols();
  CP_CHECK(axis == 0 || axis == 1, "max_axis: axis must be 0 or 1");
  const int64_t n_out = axis == 0 ? C : R;
  Tensor out = make_op("max_axis", {n_out}, {a});
  const double* pa = a.data();
  double* po = out.data();
  std::vector<int64_t> arg(static_cast<size_t>(n_out));
  if (axis == 0) {
    for (int64_t j = 0; j < C; ++j) {
      double best = pa[j];
      int64_t bi = 0;
      for (int64_t i = 1; i < R; ++i)
        if (pa[i * C + j] > best) { best = pa[i * C + j]; bi = i; }
      po[j] = best;
      arg[size_t(j)] = bi;
    }
  } else {
    for (int64_t i = 0; i < R; ++i) {
      const double* row = pa + i * C;
      double best = row[0];
      int64_t bj = 0;
      for (int64_t j = 1; j < C; ++j)
        if (row[j] > best) { best = row[j]; bj = j; }
      po[i] = best;
      arg[size_t(i)] = bj;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, axis, C, arg = std::move(arg)](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a)) {
        const int64_t n_out = self.numel();
        for (int64_t o = 0; o < n_out; ++o) {
          const int64_t i = axis == 0 ? arg[size_t(o)] : o;
          const int64_t j = axis == 0 ? o : arg[size_t(o)];
          ga[i * C + j] += g[o];
        }
      }
    };
  }
  finalize_op(out);
  return out;
}

// ---------------------------------------------------------------------------
// Softmax (stable, row-wise over the last axis; 1-D helper included).

inline Tensor softmax_rows(const Tensor& a) {
  const int64_t R = a.rows(), C = a.cols();
  Tensor out = make_op("softmax_rows", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < R; ++i) {
    const double* x = pa + i * C;
    double* y = po + i * C;
    double m = x[0];
    for (int64_t j = 1; j < C; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (int64_t j = 0; j < C; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    const double inv = 1.0 / s;
    for (int64_t j = 0; j < C; ++j) y[j] *= inv;
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, out, R, C](Node& self) {
      const double* g = self.grad->v.data();
      const double* y = out.data();
      if (double* ga = grad_sink(a)) {
        for (int64_t i = 0; i < R; ++i) {
          double dot = 0.0;
          for (int64_t j = 0; j < C; ++j) dot += g[i * C + j] * y[i * C + j];
          for (int64_t j = 0; j < C; ++j)
            ga[i * C + j] += y[i * C + j] * (g[i * C + j] - dot);
        }
      }
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor softmax1d(const Tensor& a) {
  CP_CHECK(a.rank() == 1, "softmax1d: rank-1 input required");
  return view(softmax_rows(view(a, {1, a.dim(0)})), {a.dim(0)});
}

// ---------------------------------------------------------------------------
// Gather / concat / slice.

inline Tensor gather_rows(const Tensor& a, std::vector<int64_t> idx) {
  const int64_t R = a.rows(), C = a.cols();
  const int64_t n = int64_t(idx.size());
  for (int64_t i : idx) CP_CHECK(i >= 0 && i < R, "gather_rows: index " << i << " out of range");
  Tensor out = make_op("gather_rows", {n, C}, {a});
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t r = 0; r < n; ++r)
    std::copy(pa + idx[size_t(r)] * C, pa + (idx[size_t(r)] + 1) * C, po + r * C);
  if (out.requires_grad()) {
    out.node()->backward = [a, C, idx = std::move(idx)](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a)) {
        const int64_t n = int64_t(idx.size());
        for (int64_t r = 0; r < n; ++r) {
          double* dst = ga + idx[size_t(r)] * C;
          const double* src = g + r * C;
          for (int64_t j = 0; j < C; ++j) dst[j] += src[j];
        }
      }
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const int64_t R = a.rows(), Ca = a.cols(), Cb = b.cols();
  CP_CHECK(b.rows() == R, "concat_cols: row mismatch");
  Tensor out = make_op("concat_cols", {R, Ca + Cb}, {a, b});
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < R; ++i) {
    std::copy(pa + i * Ca, pa + (i + 1) * Ca, po + i * (Ca + Cb));
    std::copy(pb + i * Cb, pb + (i + 1) * Cb, po + i * (Ca + Cb) + Ca);
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, b, R, Ca, Cb](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a))
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < Ca; ++j) ga[i * Ca + j] += g[i * (Ca + Cb) + j];
      if (double* gb = grad_sink(b))
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < Cb; ++j)
            gb[i * Cb + j] += g[i * (Ca + Cb) + Ca + j];
    };
  }
  finalize_op(out);
  return out;
}

inline Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
  const int64_t R = a.rows(), C = a.cols();
  CP_CHECK(0 <= c0 && c0 < c1 && c1 <= C, "slice_cols: bad range");
  const int64_t W = c1 - c0;
  Tensor out = make_op("slice_cols", {R, W}, {a});
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < R; ++i)
    std::copy(pa + i * C + c0, pa + i * C + c1, po + i * W);
  if (out.requires_grad()) {
    out.node()->backward = [a, C, c0, W](Node& self) {
      const double* g = self.grad->v.data();
      if (double* ga = grad_sink(a)) {
        const int64_t R = self.shape[0];
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < W; ++j) ga[i * C + c0 + j] += g[i * W + j];
      }
    };
  }
  finalize_op(out);
  return out;
}

// ---------------------------------------------------------------------------
// Normalizations with hand-derived backwards.

// Per-channel zero-mean unit-variance over the row (correspondence) axis.
// Population variance, eps inside the sqrt small enough that the unit-variance
// postcondition holds to 1e-6.
inline Tensor context_norm(const Tensor& a, double eps = 1e-10) {
  const int64_t R = a.rows(), C = a.cols();
  CP_CHECK(R >= 2, "context_norm needs at least 2 rows");
  Tensor out = make_op("context_norm", a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  std::vector<double> inv_s(static_cast<size_t>(C));
  for (int64_t j = 0; j < C; ++j) {
    double mu = 0.0;
    for (int64_t i = 0; i < R; ++i) mu += pa[i * C + j];
    mu /= double(R);
    double var = 0.0;
    for (int64_t i = 0; i < R; ++i) {
      const double d = pa[i * C + j] - mu;
      var += d * d;
    }
    var /= double(R);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_s[size_t(j)] = is;
    for (int64_t i = 0; i < R; ++i) po[i * C + j] = (pa[i * C + j] - mu) * is;
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, out, R, C, inv_s = std::move(inv_s)](Node& self) {
      const double* g = self.grad->v.data();
      const double* y = out.data();
      if (double* ga = grad_sink(a)) {
        for (int64_t j = 0; j < C; ++j) {
          double gm = 0.0, gym = 0.0;
          for (int64_t i = 0; i < R; ++i) {
            gm += g[i * C + j];
            gym += g[i * C + j] * y[i * C + j];
          }
          gm /= double(R);
          gym /= double(R);
          const double is = inv_s[size_t(j)];
          for (int64_t i = 0; i < R; ++i)
            ga[i * C + j] += is * (g[i * C + j] - gm - y[i * C + j] * gym);
        }
      }
    };
  }
  finalize_op(out);
  return out;
}

// Batch norm over the row axis with affine parameters and running stats.
// Training mode uses batch moments (population variance, matching
// context_norm at gamma=1, beta=0) and updates the running buffers in place.
inline Tensor batch_norm(const Tensor& a, const Tensor& gamma,
                         const Tensor& beta, Tensor& running_mean,
                         Tensor& running_var, bool training,
                         double momentum = 0.1, double eps = 1e-5) {
  const int64_t R = a.rows(), C = a.cols();
  CP_CHECK(gamma.rank() == 1 && gamma.dim(0) == C, "batch_norm: gamma shape");
  CP_CHECK(beta.rank() == 1 && beta.dim(0) == C, "batch_norm: beta shape");
  Tensor out = make_op("batch_norm", a.shape(), {a, gamma, beta});
  const double* pa = a.data();
  const double *pg = gamma.data(), *pb = beta.data();
  double* po = out.data();
  std::vector<double> xhat(size_t(R) * size_t(C));
  std::vector<double> inv_s(static_cast<size_t>(C));
  if (training) {
    CP_CHECK(R >= 2, "batch_norm training needs at least 2 rows");
    double* rm = running_mean.data();
    double* rv = running_var.data();
    for (int64_t j = 0; j < C; ++j) {
      double mu = 0.0;
      for (int64_t i = 0; i < R; ++i) mu += pa[i * C + j];
      mu /= double(R);
      double var = 0.0;
      for (int64_t i = 0; i < R; ++i) {
        const double d = pa[i * C + j] - mu;
        var += d * d;
      }
      var /= double(R);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_s[size_t(j)] = is;
      for (int64_t i = 0; i < R; ++i) {
        const double xh = (pa[i * C + j] - mu) * is;
        xhat[size_t(i * C + j)] = xh;
        po[i * C + j] = pg[j] * xh + pb[j];
      }
      rm[j] = (1.0 - momentum) * rm[j] + momentum * mu;
      rv[j] = (1.0 - momentum) * rv[j] + momentum * var;
    }
  } else {
    const double* rm = running_mean.data();
    const double* rv = running_var.data();
    for (int64_t j = 0; j < C; ++j) {
      const double is = 1.0 / std::sqrt(rv[j] + eps);
      inv_s[size_t(j)] = is;
      for (int64_t i = 0; i < R; ++i) {
        const double xh = (pa[i * C + j] - rm[j]) * is;
        xhat[size_t(i * C + j)] = xh;
        po[i * C + j] = pg[j] * xh + pb[j];
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, gamma, beta, training, R, C,
                            xhat = std::move(xhat),
                            inv_s = std::move(inv_s)](Node& self) {
      const double* g = self.grad->v.data();
      const double* pg = gamma.data();
      if (double* gb = grad_sink(beta))
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < C; ++j) gb[j] += g[i * C + j];
      if (double* gg = grad_sink(gamma))
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < C; ++j)
            gg[j] += g[i * C + j] * xhat[size_t(i * C + j)];
      if (double* ga = grad_sink(a)) {
        if (training) {
          for (int64_t j = 0; j < C; ++j) {
            double gm = 0.0, gxm = 0.0;
            for (int64_t i = 0; i < R; ++i) {
              gm += g[i * C + j];
              gxm += g[i * C + j] * xhat[size_t(i * C + j)];
            }
            gm /= double(R);
            gxm /= double(R);
            const double k = pg[j] * inv_s[size_t(j)];
            for (int64_t i = 0; i < R; ++i)
              ga[i * C + j] +=
                  k * (g[i * C + j] - gm - xhat[size_t(i * C + j)] * gxm);
          }
        } else {
          for (int64_t j = 0; j < C; ++j) {
            const double k = pg[j] * inv_s[size_t(j)];
            for (int64_t i = 0; i < R; ++i) ga[i * C + j] += k * g[i * C + j];
          }
        }
      }
    };
  }
  finalize_op(out);
  return out;
}

// ---------------------------------------------------------------------------
// Eigenvector of the smallest eigenvalue of a symmetric matrix (the matrix is
// symmetrized on entry). Differentiable via first-order perturbation theory;
// a degenerate gap between the two smallest eigenvalues is an error, since
// the eigenvector (and its derivative) stops being well-defined there.
inline Tensor smallest_eigvec(const Tensor& m, double min_gap = 1e-12) {
  CP_CHECK(m.rank() == 2 && m.rows() == m.cols(), "smallest_eigvec: square input");
  const int n = int(m.rows());
  std::vector<double> evals, evecs;
  eig_sym_jacobi(m.data(), n, evals, evecs);
  CP_CHECK(n >= 2, "smallest_eigvec: n >= 2 required");
  CP_CHECK(evals[1] - evals[0] >= min_gap,
           "smallest_eigvec: degenerate eigengap " << (evals[1] - evals[0]));
  Tensor out = make_op("smallest_eigvec", {n}, {m});
  double* po = out.data();
  for (int i = 0; i < n; ++i) po[i] = evecs[size_t(i) * n + 0];
  canonicalize_sign(po, n);
  // The backward formula contracts against the emitted vector, so keep the
  // stored column 0 equal to the (possibly sign-flipped) output.
  for (int i = 0; i < n; ++i) evecs[size_t(i) * n + 0] = po[i];
  if (out.requires_grad()) {
    out.node()->backward = [m, n, evals = std::move(evals),
                            evecs = std::move(evecs)](Node& self) {
      const double* g = self.grad->v.data();
      if (double* gm = grad_sink(m)) {
        // dL/dM = sym( sum_{k>0} (v_k . g)/(l_0 - l_k) v_k v_0^T )
        std::vector<double> acc(size_t(n) * size_t(n), 0.0);
        for (int k = 1; k < n; ++k) {
          double dot = 0.0;
          for (int i = 0; i < n; ++i) dot += evecs[size_t(i) * n + k] * g[i];
          const double c = dot / (evals[0] - evals[size_t(k)]);
          for (int i = 0; i < n; ++i) {
            const double vki = evecs[size_t(i) * n + k];
            for (int j = 0; j < n; ++j)
              acc[size_t(i) * n + j] += c * vki * evecs[size_t(j) * n + 0];
          }
        }
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            gm[i * n + j] += 0.5 * (acc[size_t(i) * n + j] + acc[size_t(j) * n + i]);
      }
    };
  }
  finalize_op(out);
  return out;
}

}  // namespace corrprune
