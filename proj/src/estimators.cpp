#include "icleq/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace icleq {

namespace {

// Observation y resolved once against the quantizer so repeated likelihood
// evaluations skip the level lookup.
class ResolvedObservation {
 public:
  ResolvedObservation(const Quantizer& q, double sigma2, std::span<const Complex> y)
      : quantized_(q.is_quantized()), sigma2_(sigma2), std_dim_(std::sqrt(0.5 * sigma2)) {
    values_.reserve(2 * y.size());
    for (const auto& v : y) {
      values_.push_back(v.real());
      values_.push_back(v.imag());
    }
    if (quantized_) {
      cells_.reserve(values_.size());
      for (double v : values_) {
        const auto level = q.level_of(v);
        if (!level) {
          throw std::invalid_argument("observation " + std::to_string(v) +
                                      " is not a quantizer level");
        }
        cells_.push_back(q.cell_bounds(*level));
      }
    } else {
      log_norm_ = -0.5 * std::log(std::numbers::pi * sigma2);
    }
  }

  std::size_t n_r() const { return values_.size() / 2; }

  double log_likelihood(std::span<const Complex> hx) const {
    if (hx.size() * 2 != values_.size()) {
      throw DimensionError("log_likelihood: y length differs from N_r");
    }
    double acc = 0.0;
    if (!quantized_) {
      for (std::size_t r = 0; r < hx.size(); ++r) {
        const double dr = values_[2 * r] - hx[r].real();
        const double di = values_[2 * r + 1] - hx[r].imag();
        acc += 2.0 * log_norm_ - (dr * dr + di * di) / sigma2_;
      }
      return acc;
    }
    for (std::size_t r = 0; r < hx.size(); ++r) {
      const CellBounds& cr = cells_[2 * r];
      const CellBounds& ci = cells_[2 * r + 1];
      acc += log_gauss_cell_prob(cr.lo, cr.hi, hx[r].real(), std_dim_);
      acc += log_gauss_cell_prob(ci.lo, ci.hi, hx[r].imag(), std_dim_);
    }
    return acc;
  }

 private:
  bool quantized_;
  double sigma2_;
  double std_dim_;
  double log_norm_ = 0.0;
  std::vector<double> values_;
  std::vector<CellBounds> cells_;
};

std::vector<double> normalize_log(std::span<const double> log_w) {
  const double z = logsumexp(log_w);
  if (!std::isfinite(z)) {
    throw DegenerateEvidenceError("posterior normalizer is not finite (impossible observation)");
  }
  std::vector<double> p(log_w.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_w[i] - z);
  return p;
}

double effective_sample_size(std::span<const double> w) {
  double s2 = 0.0;
  for (double v : w) s2 += v * v;
  return 1.0 / s2;
}

std::vector<CVector> responses_for(const CMatrix& h, const Constellation& constellation) {
  std::vector<CVector> out;
  out.reserve(constellation.size());
  for (const auto& x : constellation.joint_inputs) out.push_back(cmatvec(h, x));
  return out;
}

class ResolvedContext {
 public:
  std::vector<const CVector*> inputs;
  std::vector<ResolvedObservation> observations;

  double log_weight(const CMatrix& h) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      acc += observations[i].log_likelihood(cmatvec(h, *inputs[i]));
    }
    return acc;
  }
};

ResolvedContext resolve_context(const ContextSet& context, const Quantizer& q, double sigma2) {
  ResolvedContext rc;
  rc.inputs.reserve(context.size());
  rc.observations.reserve(context.size());
  for (const auto& p : context.pairs) {
    rc.inputs.push_back(&p.x);
    rc.observations.emplace_back(q, sigma2, p.y);
  }
  return rc;
}

}  // namespace

std::vector<double> input_log_likelihoods(const Task& task, const Quantizer& q,
                                          const Constellation& constellation,
                                          std::span<const Complex> y) {
  const ResolvedObservation obs(q, task.sigma2, y);
  std::vector<double> ll;
  ll.reserve(constellation.size());
  for (const auto& x : constellation.joint_inputs) {
    ll.push_back(obs.log_likelihood(cmatvec(task.h, x)));
  }
  return ll;
}

InputPosterior input_posterior(const Task& task, const Quantizer& q,
                               const Constellation& constellation, std::span<const Complex> y) {
  return {normalize_log(input_log_likelihoods(task, q, constellation, y))};
}

CVector posterior_mean(std::span<const double> probs, const Constellation& constellation) {
  if (probs.size() != constellation.size()) {
    throw DimensionError("posterior_mean: probability count differs from constellation size");
  }
  CVector mean(constellation.n_t);
  for (std::size_t c = 0; c < probs.size(); ++c) {
    const auto& x = constellation[c];
    for (int j = 0; j < constellation.n_t; ++j) mean[j] += probs[c] * x[j];
  }
  return mean;
}

CVector mmse_known_task(const Task& task, const Quantizer& q, const Constellation& constellation,
                        std::span<const Complex> y) {
  return posterior_mean(input_posterior(task, q, constellation, y).probs, constellation);
}

CVector lmmse_known_task(const Task& task, std::span<const Complex> y, int n_t) {
  const CMatrix& h = task.h;
  if (y.size() != h.rows()) throw DimensionError("lmmse_known_task: y length differs from N_r");
  const CMatrix hh = hermitian(h);
  const CMatrix gram = cmatmul(hh, h);
  const CMatrix a = gram + (task.sigma2 * n_t) * CMatrix::identity(h.cols());
  CMatrix rhs(h.cols(), 1);
  const CVector hy = cmatvec(hh, y);
  for (std::size_t i = 0; i < hy.size(); ++i) rhs(i, 0) = hy[i];
  const CMatrix sol = solve_hpd(a, rhs);
  return CVector(sol.entries().begin(), sol.entries().end());
}

ChannelPrior ChannelPrior::continuous() { return ChannelPrior(Kind::continuous, {}); }

ChannelPrior ChannelPrior::discrete(std::vector<CMatrix> channels) {
  if (channels.empty()) throw std::invalid_argument("ChannelPrior::discrete: empty channel set");
  for (const auto& h : channels) {
    if (h.rows() != channels.front().rows() || h.cols() != channels.front().cols()) {
      throw DimensionError("ChannelPrior::discrete: channels differ in shape");
    }
  }
  return ChannelPrior(Kind::discrete, std::move(channels));
}

double channel_log_weight(const CMatrix& h, double sigma2, const Quantizer& q,
                          const ContextSet& context) {
  return resolve_context(context, q, sigma2).log_weight(h);
}

std::vector<double> channel_log_posterior_weights(const ChannelPrior& prior, double sigma2,
                                                  const Quantizer& q, const ContextSet& context) {
  if (prior.kind() != ChannelPrior::Kind::discrete) {
    throw std::invalid_argument("channel_log_posterior_weights: requires a discrete prior");
  }
  const ResolvedContext rc = resolve_context(context, q, sigma2);
  std::vector<double> w;
  w.reserve(prior.channels().size());
  for (const auto& h : prior.channels()) w.push_back(rc.log_weight(h));
  return w;
}

ChannelMixtureEqualizer::ChannelMixtureEqualizer(std::span<const CMatrix> channels,
                                                 std::span<const double> log_weights,
                                                 double sigma2, const Quantizer& q,
                                                 const Constellation& constellation,
                                                 ChannelWeighting weighting, double prune_nats)
    : sigma2_(sigma2), q_(q), constellation_(&constellation), weighting_(weighting) {
  if (channels.size() != log_weights.size() || channels.empty()) {
    throw std::invalid_argument("ChannelMixtureEqualizer: channel/weight count mismatch");
  }
  const double best = *std::max_element(log_weights.begin(), log_weights.end());
  if (!std::isfinite(best)) {
    throw DegenerateEvidenceError("ChannelMixtureEqualizer: no channel explains the context");
  }
  for (std::size_t m = 0; m < channels.size(); ++m) {
    if (log_weights[m] < best - prune_nats) continue;
    log_weights_.push_back(log_weights[m]);
    responses_.push_back(responses_for(channels[m], constellation));
  }
}

MixtureEstimate ChannelMixtureEqualizer::estimate(std::span<const Complex> y) const {
  const Constellation& cons = *constellation_;
  const ResolvedObservation obs(q_, sigma2_, y);
  const std::size_t n_classes = cons.size();
  const std::size_t n_channels = log_weights_.size();

  MixtureEstimate out;
  out.x_hat.assign(cons.n_t, 0.0);
  std::vector<double> channel_w(n_channels);

  if (weighting_ == ChannelWeighting::joint) {
    std::vector<double> joint(n_channels * n_classes);
    for (std::size_t m = 0; m < n_channels; ++m) {
      for (std::size_t c = 0; c < n_classes; ++c) {
        joint[m * n_classes + c] = log_weights_[m] + obs.log_likelihood(responses_[m][c]);
      }
    }
    const auto p = normalize_log(joint);
    for (std::size_t m = 0; m < n_channels; ++m) {
      double wm = 0.0;
      for (std::size_t c = 0; c < n_classes; ++c) {
        const double pc = p[m * n_classes + c];
        wm += pc;
        const auto& x = cons[c];
        for (int j = 0; j < cons.n_t; ++j) out.x_hat[j] += pc * x[j];
      }
      channel_w[m] = wm;
    }
  } else {
    channel_w = normalize_log(log_weights_);
    std::vector<double> ll(n_classes);
    for (std::size_t m = 0; m < n_channels; ++m) {
      for (std::size_t c = 0; c < n_classes; ++c) ll[c] = obs.log_likelihood(responses_[m][c]);
      const auto inner = normalize_log(ll);
      const CVector est = posterior_mean(inner, cons);
      for (int j = 0; j < cons.n_t; ++j) out.x_hat[j] += channel_w[m] * est[j];
    }
  }
  out.ess = effective_sample_size(channel_w);
  return out;
}

CVector bayes_mmse_discrete(const ChannelPrior& prior, double sigma2, const Quantizer& q,
                            const Constellation& constellation, const ContextSet& context,
                            std::span<const Complex> y, ChannelWeighting weighting) {
  const auto lw = channel_log_posterior_weights(prior, sigma2, q, context);
  const ChannelMixtureEqualizer eq(prior.channels(), lw, sigma2, q, constellation, weighting);
  return eq.estimate(y).x_hat;
}

ChannelMixtureEqualizer make_importance_sampler(double sigma2, const Quantizer& q,
                                                const Constellation& constellation,
                                                const ContextSet& context, int n_r,
                                                std::size_t k, RngStream& rng,
                                                ChannelWeighting weighting) {
  if (k == 0) throw std::invalid_argument("make_importance_sampler: k must be at least 1");
  const ResolvedContext rc = resolve_context(context, q, sigma2);
  std::vector<CMatrix> channels;
  std::vector<double> lw;
  channels.reserve(k);
  lw.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    channels.push_back(sample_channel(n_r, constellation.n_t, rng));
    lw.push_back(rc.log_weight(channels.back()));
  }
  return ChannelMixtureEqualizer(channels, lw, sigma2, q, constellation, weighting);
}

MixtureEstimate bayes_mmse_continuous_mc(double sigma2, const Quantizer& q,
                                         const Constellation& constellation,
                                         const ContextSet& context, std::span<const Complex> y,
                                         std::size_t k, RngStream& rng,
                                         ChannelWeighting weighting) {
  const auto eq = make_importance_sampler(sigma2, q, constellation, context,
                                          static_cast<int>(y.size()), k, rng, weighting);
  return eq.estimate(y);
}

GaussianPosteriorEqualizer::GaussianPosteriorEqualizer(double sigma2,
                                                       const Constellation& constellation,
                                                       const ContextSet& context, int n_r)
    : constellation_(&constellation) {
  const std::size_t n_t = constellation.n_t;
  const std::size_t n = context.size();

  // Pilot matrix X (N × N_t) and observations Y (N × N_r).
  CMatrix x(n, n_t);
  CMatrix y(n, n_r);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = context.pairs[i];
    if (p.x.size() != n_t || p.y.size() != static_cast<std::size_t>(n_r)) {
      throw DimensionError("GaussianPosteriorEqualizer: pilot dimensions differ");
    }
    for (std::size_t j = 0; j < n_t; ++j) x(i, j) = p.x[j];
    for (int r = 0; r < n_r; ++r) y(i, r) = p.y[r];
  }
  const CMatrix xh = hermitian(x);
  const CMatrix precision =
      CMatrix::identity(n_t) + (1.0 / sigma2) * (n == 0 ? CMatrix(n_t, n_t) : cmatmul(xh, x));
  covariance_ = solve_hpd(precision, CMatrix::identity(n_t));
  // Column r of `means` is μ_r = Σ Xᴴ y_r / σ².
  const CMatrix means =
      n == 0 ? CMatrix(n_t, n_r) : (1.0 / sigma2) * cmatmul(covariance_, cmatmul(xh, y));

  for (const auto& xc : constellation.joint_inputs) {
    CVector mean(n_r);
    for (int r = 0; r < n_r; ++r) {
      Complex acc = 0.0;
      for (std::size_t j = 0; j < n_t; ++j) acc += xc[j] * means(j, r);
      mean[r] = acc;
    }
    // y_r = xᵀh_r, so Var = xᵀ Σ x̄.
    double quad = 0.0;
    for (std::size_t i = 0; i < n_t; ++i) {
      for (std::size_t j = 0; j < n_t; ++j) {
        quad += (xc[i] * covariance_(i, j) * std::conj(xc[j])).real();
      }
    }
    predictive_means_.push_back(std::move(mean));
    predictive_vars_.push_back(sigma2 + quad);
  }
}

CVector GaussianPosteriorEqualizer::estimate(std::span<const Complex> y) const {
  const Constellation& cons = *constellation_;
  std::vector<double> ll(cons.size());
  for (std::size_t c = 0; c < cons.size(); ++c) {
    const double v = predictive_vars_[c];
    const auto& mean = predictive_means_[c];
    if (mean.size() != y.size()) throw DimensionError("GaussianPosteriorEqualizer: y length");
    double acc = 0.0;
    for (std::size_t r = 0; r < y.size(); ++r) {
      acc += -std::log(std::numbers::pi * v) - std::norm(y[r] - mean[r]) / v;
    }
    ll[c] = acc;
  }
  return posterior_mean(normalize_log(ll), cons);
}

CVector bayes_mmse_gaussian_exact(double sigma2, const Constellation& constellation,
                                  const ContextSet& context, std::span<const Complex> y) {
  const GaussianPosteriorEqualizer eq(sigma2, constellation, context,
                                      static_cast<int>(y.size()));
  return eq.estimate(y);
}

CVector bayes_mmse_gaussian_exact(double sigma2, const Quantizer& q,
                                  const Constellation& constellation, const ContextSet& context,
                                  std::span<const Complex> y) {
  if (q.is_quantized()) {
    throw std::invalid_argument("bayes_mmse_gaussian_exact: requires the unquantized model");
  }
  return bayes_mmse_gaussian_exact(sigma2, constellation, context, y);
}

}  // namespace icleq
