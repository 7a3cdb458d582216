#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace icleq {

using Complex = std::complex<double>;
using CVector = std::vector<Complex>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense complex matrix, row-major.
class CMatrix {
 public:
  CMatrix() = default;
  CMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols) {}
  CMatrix(std::size_t rows, std::size_t cols, std::vector<Complex> entries);
  CMatrix(std::initializer_list<std::initializer_list<Complex>> rows);

  static CMatrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  Complex& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const Complex& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<const Complex> entries() const { return data_; }
  std::span<Complex> entries() { return data_; }

  bool operator==(const CMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Complex> data_;
};

CMatrix cmatmul(const CMatrix& a, const CMatrix& b);
CVector cmatvec(const CMatrix& a, std::span<const Complex> x);
CMatrix hermitian(const CMatrix& a);
CMatrix operator+(const CMatrix& a, const CMatrix& b);
CMatrix operator-(const CMatrix& a, const CMatrix& b);
CMatrix operator*(double s, const CMatrix& a);

/// Frobenius norm.
double frobenius_norm(const CMatrix& a);
double squared_norm(std::span<const Complex> v);

/// Solves a·x = b for Hermitian positive definite `a` by Cholesky
/// factorization. Throws SingularMatrixError on a non-positive pivot.
CMatrix solve_hpd(const CMatrix& a, const CMatrix& b);

/// Scaled complementary error function exp(x²)·erfc(x).
double erfcx(double x);

/// Standard normal CDF.
double gauss_cdf(double x);

/// log(Φ((hi−mean)/std) − Φ((lo−mean)/std)); lo and hi may be ±infinity.
/// Cells lying entirely on one side of the mean are evaluated as a ratio
/// of scaled complementary error functions on that side, so the result
/// stays finite far into the tail.
double log_gauss_cell_prob(double lo, double hi, double mean, double std);

double logsumexp(std::span<const double> v);

}  // namespace icleq
