#include "icleq/channel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace icleq {

Constellation Constellation::qam4(int n_t) {
  if (n_t < 1) throw std::invalid_argument("qam4: n_t must be positive");
  Constellation c;
  c.n_t = n_t;
  const double a = 1.0 / std::sqrt(2.0 * n_t);
  c.per_antenna_symbols = {{a, a}, {a, -a}, {-a, a}, {-a, -a}};

  const std::size_t q = c.per_antenna_symbols.size();
  std::size_t total = 1;
  for (int i = 0; i < n_t; ++i) total *= q;
  c.joint_inputs.reserve(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    CVector x(n_t);
    std::size_t rem = idx;
    for (int ant = n_t - 1; ant >= 0; --ant) {
      x[ant] = c.per_antenna_symbols[rem % q];
      rem /= q;
    }
    c.joint_inputs.push_back(std::move(x));
  }
  return c;
}

double Constellation::max_coordinate() const {
  double m = 0.0;
  for (const auto& s : per_antenna_symbols) {
    m = std::max({m, std::abs(s.real()), std::abs(s.imag())});
  }
  return m;
}

double snr_of(const Task& task) { return 1.0 / task.sigma2; }

double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

double linear_to_db(double value) { return 10.0 * std::log10(value); }

Quantizer Quantizer::unquantized() { return Quantizer(); }

Quantizer::Quantizer(int bits, double range_lo, double range_hi)
    : bits_(bits), range_lo_(range_lo), range_hi_(range_hi) {
  if (bits < 1 || bits > 30) throw std::invalid_argument("Quantizer: bits must be in [1, 30]");
  if (!(range_lo < range_hi)) throw std::invalid_argument("Quantizer: empty range");
}

int Quantizer::levels() const {
  if (!bits_) throw std::logic_error("Quantizer: unquantized mode has no levels");
  return 1 << *bits_;
}

double Quantizer::step() const {
  return (range_hi_ - range_lo_) / static_cast<double>(levels());
}

double Quantizer::level_value(int level_index) const {
  return range_lo_ + step() * (level_index + 0.5);
}

QuantizedValue Quantizer::quantize(double v) const {
  if (!bits_) return {-1, v};
  const int top = levels() - 1;
  const double raw = std::floor((v - range_lo_) / step());
  const int k = raw < 0.0 ? 0 : (raw > top ? top : static_cast<int>(raw));
  return {k, level_value(k)};
}

CellBounds Quantizer::cell_bounds(int level_index) const {
  const int n = levels();
  if (level_index < 0 || level_index >= n) {
    throw std::out_of_range("Quantizer::cell_bounds: level " + std::to_string(level_index) +
                            " outside [0, " + std::to_string(n) + ")");
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  const double d = step();
  const double lo = level_index == 0 ? -inf : range_lo_ + d * level_index;
  const double hi = level_index == n - 1 ? inf : range_lo_ + d * (level_index + 1);
  return {lo, hi};
}

std::optional<int> Quantizer::level_of(double v) const {
  if (!bits_ || !std::isfinite(v)) return std::nullopt;
  const double pos = (v - range_lo_) / step() - 0.5;
  const double k = std::nearbyint(pos);
  if (k < 0.0 || k >= levels()) return std::nullopt;
  if (std::abs(pos - k) > 1e-9) return std::nullopt;
  return static_cast<int>(k);
}

void TaskDistribution::validate() const {
  if (n_t < 1 || n_r < 1) throw std::invalid_argument("TaskDistribution: antenna counts must be positive");
  if (!(sigma2_db_min <= sigma2_db_max)) {
    throw std::invalid_argument("TaskDistribution: sigma2_db_min exceeds sigma2_db_max");
  }
}

CMatrix sample_channel(int n_r, int n_t, RngStream& rng) {
  CMatrix h(n_r, n_t);
  for (auto& z : h.entries()) z = standard_complex_normal(rng);
  return h;
}

Task sample_task(const TaskDistribution& dist, RngStream& rng) {
  dist.validate();
  Task t;
  t.h = sample_channel(dist.n_r, dist.n_t, rng);
  // Always consume the draw so the stream layout does not depend on the range.
  const double u = rng.uniform();
  const double db = dist.sigma2_db_min + (dist.sigma2_db_max - dist.sigma2_db_min) * u;
  t.sigma2 = dist.sigma2_db_min == dist.sigma2_db_max ? db_to_linear(dist.sigma2_db_min)
                                                      : db_to_linear(db);
  return t;
}

CVector apply_channel(const Task& task, const Quantizer& q, std::span<const Complex> x,
                      RngStream& rng) {
  if (x.size() != task.h.cols()) throw DimensionError("apply_channel: x length differs from N_t");
  CVector y = cmatvec(task.h, x);
  const double noise_std = std::sqrt(task.sigma2);
  for (auto& v : y) {
    const Complex z = noise_std * standard_complex_normal(rng);
    v += z;
    if (q.is_quantized()) {
      v = {q.quantize(v.real()).level_value, q.quantize(v.imag()).level_value};
    }
  }
  return y;
}

double log_likelihood_from_mean(std::span<const Complex> hx, double sigma2,
                                const Quantizer& q, std::span<const Complex> y) {
  if (hx.size() != y.size()) throw DimensionError("log_likelihood: y length differs from N_r");
  if (!q.is_quantized()) {
    const double log_norm = -0.5 * std::log(std::numbers::pi * sigma2);
    double acc = 0.0;
    for (std::size_t r = 0; r < y.size(); ++r) {
      acc += 2.0 * log_norm - std::norm(y[r] - hx[r]) / sigma2;
    }
    return acc;
  }
  const double std_dim = std::sqrt(0.5 * sigma2);
  double acc = 0.0;
  auto add_dim = [&](double obs, double mean) {
    const auto level = q.level_of(obs);
    if (!level) {
      throw std::invalid_argument("log_likelihood: observation " + std::to_string(obs) +
                                  " is not a quantizer level");
    }
    const CellBounds cell = q.cell_bounds(*level);
    acc += log_gauss_cell_prob(cell.lo, cell.hi, mean, std_dim);
  };
  for (std::size_t r = 0; r < y.size(); ++r) {
    add_dim(y[r].real(), hx[r].real());
    add_dim(y[r].imag(), hx[r].imag());
  }
  return acc;
}

double log_likelihood(const Task& task, const Quantizer& q, std::span<const Complex> x,
                      std::span<const Complex> y) {
  const CVector hx = cmatvec(task.h, x);
  return log_likelihood_from_mean(hx, task.sigma2, q, y);
}

ContextSet sample_context(const Task& task, const Quantizer& q,
                          const Constellation& constellation, std::size_t n, RngStream& rng) {
  ContextSet ctx;
  ctx.pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Pilot p;
    p.x_index = rng.uniform_index(constellation.size());
    p.x = constellation[p.x_index];
    p.y = apply_channel(task, q, p.x, rng);
    ctx.pairs.push_back(std::move(p));
  }
  return ctx;
}

}  // namespace icleq
