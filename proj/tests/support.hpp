#pragma once

#include <cmath>
#include <complex>
#include <span>

#include "icleq/channel.hpp"
#include "icleq/numerics.hpp"
#include "icleq/rng.hpp"

namespace icleq::testing {

inline CMatrix random_cmatrix(std::size_t rows, std::size_t cols, RngStream& rng) {
  CMatrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = standard_complex_normal(rng);
  }
  return m;
}

inline double max_abs_diff(std::span<const Complex> a, std::span<const Complex> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double ulp_distance(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  const double ulp = std::nextafter(scale, INFINITY) - scale;
  return std::abs(a - b) / ulp;
}

// Fixed channel shared with the Python oracle script.
inline CMatrix oracle_channel() {
  return CMatrix{{{0.3, 0.8}, {-0.5, 0.1}}, {{1.1, -0.4}, {0.2, 0.6}}};
}

}  // namespace icleq::testing
