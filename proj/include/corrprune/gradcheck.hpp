#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include <corrprune/tensor.hpp>

namespace corrprune {

// Central-difference gradient verification. `f` rebuilds the scalar loss from
// the current parameter values on every call; parameters are perturbed in
// place. Returns the worst relative error over all checked coordinates.
// `max_per_param` limits coordinates per tensor (evenly strided, so the
// selection is deterministic); 0 checks every coordinate.
inline double gradcheck(const std::function<Tensor()>& f,
                        const std::vector<Tensor>& params, double h = 1e-6,
                        int64_t max_per_param = 0) {
  for (const Tensor& p : params) {
    CP_CHECK(p.requires_grad(), "gradcheck: param without requires_grad");
    const_cast<Tensor&>(p).zero_grad();
  }
  Tensor loss = f();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    CP_CHECK(p.has_grad(), "gradcheck: param received no gradient");
    analytic.emplace_back(p.grad(), p.grad() + p.numel());
  }

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    double* pd = p.data();
    const int64_t n = p.numel();
    int64_t stride = 1;
    if (max_per_param > 0 && n > max_per_param)
      stride = (n + max_per_param - 1) / max_per_param;
    for (int64_t i = 0; i < n; i += stride) {
      const double keep = pd[i];
      pd[i] = keep + h;
      const double lp = f().item();
      pd[i] = keep - h;
      const double lm = f().item();
      pd[i] = keep;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[pi][size_t(i)];
      // Relative error as |analytic - central| / max(1, |central|).
      worst = std::max(worst, std::abs(fd - an) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace corrprune
