#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <corrprune/checkpoint.hpp>
#include <corrprune/ops.hpp>
#include <corrprune/rng.hpp>
#include <corrprune/tensor.hpp>

// Learnable building blocks. Every layer owns its parameter tensors
// (requires_grad set at construction) and registers them into a ParamMap
// under a caller-supplied prefix; registration order is the canonical
// parameter order used by the optimizer and the checkpoint format.

namespace corrprune {

// y = x W + b, W: [in x out], b: [out].
struct Linear {
  int64_t in = 0, out = 0;
  Tensor W, b;

  Linear() = default;
  Linear(int64_t in_, int64_t out_, Rng& rng) : in(in_), out(out_) {
    W = Tensor::zeros({in, out}, true);
    b = Tensor::zeros({out}, true);
    const double s = 1.0 / std::sqrt(double(in));
    double* w = W.data();
    for (int64_t i = 0; i < in * out; ++i) w[i] = s * rng.normal();
  }

  Tensor forward(const Tensor& x) const {
    return add_rowvec(matmul(x, W), b);
  }

  void zero_init() {
    std::fill(W.data(), W.data() + W.numel(), 0.0);
    std::fill(b.data(), b.data() + b.numel(), 0.0);
  }

  void collect(ParamMap& pm, const std::string& p) {
    pm.add(p + ".W", W);
    pm.add(p + ".b", b);
  }
};

// Per-channel batch normalization over the row axis. gamma/beta learn;
// running stats are plain buffers carried in checkpoints but never updated
// by the optimizer.
struct BatchNorm {
  int64_t c = 0;
  Tensor gamma, beta, running_mean, running_var;

  BatchNorm() = default;
  explicit BatchNorm(int64_t c_) : c(c_) {
    gamma = Tensor::zeros({c}, true);
    beta = Tensor::zeros({c}, true);
    running_mean = Tensor::zeros({c}, false);
    running_var = Tensor::zeros({c}, false);
    std::fill(gamma.data(), gamma.data() + c, 1.0);
    std::fill(running_var.data(), running_var.data() + c, 1.0);
  }

  Tensor forward(const Tensor& x, bool training) const {
    auto& self = const_cast<BatchNorm&>(*this);
    return batch_norm(x, gamma, beta, self.running_mean, self.running_var,
                      training);
  }

  void collect(ParamMap& pm, const std::string& p) {
    pm.add(p + ".gamma", gamma);
    pm.add(p + ".beta", beta);
    pm.add(p + ".running_mean", running_mean);
    pm.add(p + ".running_var", running_var);
  }
};

// Per-point unit: linear map, normalization across the point axis, batch
// norm, ReLU. The workhorse block for permutation-equivariant point stacks.
struct PointUnit {
  Linear lin;
  BatchNorm bn;

  PointUnit() = default;
  PointUnit(int64_t in, int64_t out, Rng& rng) : lin(in, out, rng), bn(out) {}

  Tensor forward(const Tensor& x, bool training) const {
    return relu(bn.forward(context_norm(lin.forward(x)), training));
  }

  void collect(ParamMap& pm, const std::string& p) {
    lin.collect(pm, p + ".lin");
    bn.collect(pm, p + ".bn");
  }
};

// Two stacked point units with an additive skip; channel count preserved.
struct ResidualPointBlock {
  PointUnit u1, u2;

  ResidualPointBlock() = default;
  ResidualPointBlock(int64_t c, Rng& rng) : u1(c, c, rng), u2(c, c, rng) {}

  Tensor forward(const Tensor& x, bool training) const {
    return add(x, u2.forward(u1.forward(x, training), training));
  }

  void collect(ParamMap& pm, const std::string& p) {
    u1.collect(pm, p + ".u1");
    u2.collect(pm, p + ".u2");
  }
};

// Two-layer perceptron used by the attention gates: in -> hidden (ReLU)
// -> out, no output activation (callers apply sigmoid).
struct GateMlp {
  Linear l1, l2;

  GateMlp() = default;
  GateMlp(int64_t in, int64_t hidden, int64_t out, Rng& rng)
      : l1(in, hidden, rng), l2(hidden, out, rng) {}

  Tensor forward(const Tensor& x) const {
    return l2.forward(relu(l1.forward(x)));
  }

  void zero_init() {
    l1.zero_init();
    l2.zero_init();
  }

  void collect(ParamMap& pm, const std::string& p) {
    l1.collect(pm, p + ".l1");
    l2.collect(pm, p + ".l2");
  }
};

}  // namespace corrprune
