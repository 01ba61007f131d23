#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace corrprune {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invariant violations and contract breaches throw; nothing is reported by
// silent NaN propagation or return codes.
#define CP_CHECK(cond, msg)                                     \
  do {                                                          \
    if (!(cond)) {                                              \
      std::ostringstream cp_oss_;                               \
      cp_oss_ << "corrprune: " << msg << " [" << #cond << "]";  \
      throw ::corrprune::Error(cp_oss_.str());                  \
    }                                                           \
  } while (0)

// x - x is 0 for finite x, NaN for NaN/Inf; the sum stays 0 iff all finite.
// Vectorizes to two flops per element, unlike a branchy isfinite loop.
inline bool all_finite(const double* p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += p[i] - p[i];
  return s == 0.0;
}

}  // namespace corrprune
