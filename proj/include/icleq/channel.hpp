#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "icleq/numerics.hpp"
#include "icleq/rng.hpp"

namespace icleq {

/// Per-antenna QAM alphabet and the enumerated joint input set.
struct Constellation {
  int n_t = 0;
  std::vector<Complex> per_antenna_symbols;
  /// Lexicographic in per-antenna symbol index, antenna 0 most significant.
  std::vector<CVector> joint_inputs;

  /// 4-QAM with symbols (±1 ± i)/√(2·n_t), ordered (+,+), (+,−), (−,+), (−,−).
  static Constellation qam4(int n_t);

  std::size_t size() const { return joint_inputs.size(); }
  const CVector& operator[](std::size_t i) const { return joint_inputs[i]; }
  /// Largest absolute real or imaginary coordinate over all symbols.
  double max_coordinate() const;
};

struct Task {
  CMatrix h;
  double sigma2 = 1.0;
};

double snr_of(const Task& task);
double db_to_linear(double db);
double linear_to_db(double value);

struct QuantizedValue {
  int level_index;
  double level_value;
};

struct CellBounds {
  double lo;
  double hi;
};

/// Mid-rise uniform quantizer with saturating extreme cells.
class Quantizer {
 public:
  static Quantizer unquantized();
  explicit Quantizer(int bits, double range_lo = -4.0, double range_hi = 4.0);

  bool is_quantized() const { return bits_.has_value(); }
  std::optional<int> bits() const { return bits_; }
  int levels() const;
  double step() const;
  double range_lo() const { return range_lo_; }
  double range_hi() const { return range_hi_; }

  QuantizedValue quantize(double v) const;
  CellBounds cell_bounds(int level_index) const;
  double level_value(int level_index) const;
  /// Index of the level equal to `v`; nullopt when `v` is not an output level.
  std::optional<int> level_of(double v) const;

  bool operator==(const Quantizer&) const = default;

 private:
  Quantizer() = default;

  std::optional<int> bits_;
  double range_lo_ = -4.0;
  double range_hi_ = 4.0;
};

struct Pilot {
  CVector x;
  CVector y;
  /// Index of x in the constellation's joint inputs.
  std::size_t x_index = 0;
};

struct ContextSet {
  std::vector<Pilot> pairs;
  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

/// Task law: i.i.d. CN(0,1) channel entries and σ² log-uniform in dB.
struct TaskDistribution {
  int n_t = 2;
  int n_r = 2;
  double sigma2_db_min = -10.0;
  double sigma2_db_max = -10.0;

  void validate() const;
  bool operator==(const TaskDistribution&) const = default;
};

Task sample_task(const TaskDistribution& dist, RngStream& rng);
CMatrix sample_channel(int n_r, int n_t, RngStream& rng);

CVector apply_channel(const Task& task, const Quantizer& q, std::span<const Complex> x,
                      RngStream& rng);

/// log P(y | x, task). A probability for finite bits, a density otherwise.
double log_likelihood(const Task& task, const Quantizer& q, std::span<const Complex> x,
                      std::span<const Complex> y);

/// Same as log_likelihood with the noiseless response h·x precomputed.
double log_likelihood_from_mean(std::span<const Complex> hx, double sigma2,
                                const Quantizer& q, std::span<const Complex> y);

ContextSet sample_context(const Task& task, const Quantizer& q,
                          const Constellation& constellation, std::size_t n, RngStream& rng);

}  // namespace icleq
