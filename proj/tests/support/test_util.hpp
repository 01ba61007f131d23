#pragma once

#include <cmath>
#include <vector>

#include <corrprune/rng.hpp>
#include <corrprune/tensor.hpp>

namespace cptest {

inline corrprune::Tensor random_tensor(corrprune::Rng& rng,
                                       std::vector<int64_t> shape,
                                       bool requires_grad = false,
                                       double scale = 1.0) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& x : data) x = scale * rng.normal();
  return corrprune::Tensor::from(std::move(data), std::move(shape), requires_grad);
}

inline double max_abs_diff(const corrprune::Tensor& a,
                           const corrprune::Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

inline double max_abs_diff(const double* a, const double* b, size_t n) {
  double m = 0.0;
  for (size_t i = 0; i < n; ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace cptest
