#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <corrprune/common.hpp>

namespace corrprune {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// mt19937_64 supplies bits; the uniform/normal transforms are hand-rolled so
// streams are pinned to this code, not to a library's distribution objects.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

  uint64_t seed() const { return seed_; }

  // Child stream decorrelated from the parent by splitmix64 mixing.
  Rng split(uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x51ed2701ULL)));
  }

  uint64_t bits() { return eng_(); }

  // [0, 1), 53-bit resolution.
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection on the top bits.
  uint64_t randint(uint64_t n) {
    CP_CHECK(n > 0, "randint needs n > 0");
    uint64_t mask = ~uint64_t(0);
    uint64_t pow2 = n - 1;
    pow2 |= pow2 >> 1; pow2 |= pow2 >> 2; pow2 |= pow2 >> 4;
    pow2 |= pow2 >> 8; pow2 |= pow2 >> 16; pow2 |= pow2 >> 32;
    mask = pow2;
    for (;;) {
      uint64_t r = eng_() & mask;
      if (r < n) return r;
    }
  }

  // Box-Muller; the second value is cached so draws come in pinned pairs.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = double((eng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = double(eng_() >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(randint(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), ascending draw order preserved as-is.
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    CP_CHECK(k <= n, "sample_without_replacement: k > n");
    std::vector<int64_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[size_t(i)] = i;
    std::vector<int64_t> out(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) {
      uint64_t j = randint(uint64_t(n - i));
      out[size_t(i)] = pool[size_t(j)];
      pool[size_t(j)] = pool[size_t(n - 1 - i)];
    }
    return out;
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace corrprune
