#include "icleq/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace icleq {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kLogHalf = -0.69314718055994530942;

void require_finite(std::span<const Complex> entries) {
  for (const auto& z : entries) {
    if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) {
      throw std::invalid_argument("CMatrix: non-finite entry");
    }
  }
}

// Continued fraction for exp(x²)erfc(x), valid for moderately large x.
double erfcx_continued_fraction(double x) {
  // erfc(x) e^{x²} √π = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
  constexpr int kDepth = 120;
  double tail = x;
  for (int n = kDepth; n >= 1; --n) {
    tail = x + (0.5 * n) / tail;
  }
  return 1.0 / (tail * std::sqrt(std::numbers::pi));
}

// log Q(t) for the standard normal upper tail, t ≥ 0 finite.
double log_upper_tail(double t) {
  const double s = t * kInvSqrt2;
  return kLogHalf + std::log(erfcx(s)) - s * s;
}

// log(Q(a) − Q(b)) for 0 ≤ a < b ≤ +∞ in standard units; `width` = b − a
// computed from the unscaled bounds to avoid cancellation in narrow cells.
double log_upper_cell(double a, double b, double width) {
  const double log_qa = log_upper_tail(a);
  if (std::isinf(b)) return log_qa;
  const double sa = a * kInvSqrt2;
  const double sb = b * kInvSqrt2;
  const double sw = width * kInvSqrt2;
  // log(Q(b)/Q(a))
  const double log_ratio =
      std::log(erfcx(sb)) - std::log(erfcx(sa)) - sw * (sa + sb);
  return log_qa + std::log(-std::expm1(log_ratio));
}

}  // namespace

CMatrix::CMatrix(std::size_t rows, std::size_t cols, std::vector<Complex> entries)
    : rows_(rows), cols_(cols), data_(std::move(entries)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("CMatrix: entry count does not match shape");
  }
  require_finite(data_);
}

CMatrix::CMatrix(std::initializer_list<std::initializer_list<Complex>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& row : rows) {
    if (row.size() != cols_) throw DimensionError("CMatrix: ragged initializer");
    data_.insert(data_.end(), row.begin(), row.end());
  }
  require_finite(data_);
}

CMatrix CMatrix::identity(std::size_t n) {
  CMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

CMatrix cmatmul(const CMatrix& a, const CMatrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("cmatmul: inner dimensions differ (" +
                         std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
  }
  CMatrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const Complex aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

CVector cmatvec(const CMatrix& a, std::span<const Complex> x) {
  if (a.cols() != x.size()) throw DimensionError("cmatvec: dimension mismatch");
  CVector out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    Complex acc = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * x[k];
    out[i] = acc;
  }
  return out;
}

CMatrix hermitian(const CMatrix& a) {
  CMatrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = std::conj(a(i, j));
  }
  return out;
}

CMatrix operator+(const CMatrix& a, const CMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("CMatrix +: shape mismatch");
  }
  CMatrix out = a;
  auto dst = out.entries();
  auto src = b.entries();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  return out;
}

CMatrix operator-(const CMatrix& a, const CMatrix& b) { return a + (-1.0) * b; }

CMatrix operator*(double s, const CMatrix& a) {
  CMatrix out = a;
  for (auto& z : out.entries()) z *= s;
  return out;
}

double frobenius_norm(const CMatrix& a) { return std::sqrt(squared_norm(a.entries())); }

double squared_norm(std::span<const Complex> v) {
  double acc = 0.0;
  for (const auto& z : v) acc += std::norm(z);
  return acc;
}

CMatrix solve_hpd(const CMatrix& a, const CMatrix& b) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw DimensionError("solve_hpd: matrix not square");
  if (b.rows() != n) throw DimensionError("solve_hpd: right-hand side rows differ");

  // a = L·Lᴴ, L lower triangular with real positive diagonal.
  CMatrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j).real();
    for (std::size_t k = 0; k < j; ++k) diag -= std::norm(l(j, k));
    if (!(diag > 0.0)) {
      throw SingularMatrixError("solve_hpd: non-positive pivot at row " +
                                std::to_string(j));
    }
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      Complex acc = a(i, j);
      for (std::size_t k = 0; k < j; ++k) acc -= l(i, k) * std::conj(l(j, k));
      l(i, j) = acc / ljj;
    }
  }

  CMatrix x = b;
  for (std::size_t c = 0; c < b.cols(); ++c) {
    // forward: L·w = b
    for (std::size_t i = 0; i < n; ++i) {
      Complex acc = x(i, c);
      for (std::size_t k = 0; k < i; ++k) acc -= l(i, k) * x(k, c);
      x(i, c) = acc / l(i, i).real();
    }
    // backward: Lᴴ·x = w
    for (std::size_t i = n; i-- > 0;) {
      Complex acc = x(i, c);
      for (std::size_t k = i + 1; k < n; ++k) acc -= std::conj(l(k, i)) * x(k, c);
      x(i, c) = acc / l(i, i).real();
    }
  }
  return x;
}

double erfcx(double x) {
  if (std::isnan(x)) return x;
  if (x < 0.0) {
    // erfcx(−t) = 2e^{t²} − erfcx(t)
    if (x < -26.0) return std::numeric_limits<double>::infinity();
    return 2.0 * std::exp(x * x) - erfcx(-x);
  }
  if (x < 6.0) return std::exp(x * x) * std::erfc(x);
  if (std::isinf(x)) return 0.0;
  return erfcx_continued_fraction(x);
}

double gauss_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

double log_gauss_cell_prob(double lo, double hi, double mean, double std) {
  if (!(lo < hi)) throw std::invalid_argument("log_gauss_cell_prob: requires lo < hi");
  if (!(std > 0.0)) throw std::invalid_argument("log_gauss_cell_prob: requires std > 0");
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (lo == -inf && hi == inf) return 0.0;

  const double a = (lo - mean) / std;
  const double b = (hi - mean) / std;
  const double width = (std::isinf(lo) || std::isinf(hi)) ? inf : (hi - lo) / std;

  if (a >= 0.0) return log_upper_cell(a, b, width);
  if (b <= 0.0) return log_upper_cell(-b, -a, width);

  // Straddles the mean: both erf terms are positive, no cancellation.
  const double upper = std::isinf(b) ? 1.0 : std::erf(b * kInvSqrt2);
  const double lower = std::isinf(a) ? 1.0 : std::erf(-a * kInvSqrt2);
  return std::log(0.5 * (upper + lower));
}

double logsumexp(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("logsumexp: empty input");
  const double m = *std::max_element(v.begin(), v.end());
  if (std::isinf(m)) return m;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

}  // namespace icleq
