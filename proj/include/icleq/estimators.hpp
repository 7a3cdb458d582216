#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "icleq/channel.hpp"
#include "icleq/numerics.hpp"
#include "icleq/rng.hpp"

namespace icleq {

class DegenerateEvidenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Posterior over the joint inputs under a uniform input prior.
struct InputPosterior {
  std::vector<double> probs;
};

/// log P(y | x_c, task) for every joint input x_c.
std::vector<double> input_log_likelihoods(const Task& task, const Quantizer& q,
                                          const Constellation& constellation,
                                          std::span<const Complex> y);

InputPosterior input_posterior(const Task& task, const Quantizer& q,
                               const Constellation& constellation, std::span<const Complex> y);

/// Σ_c probs_c · x_c.
CVector posterior_mean(std::span<const double> probs, const Constellation& constellation);

/// Posterior-mean equalizer with the task known.
CVector mmse_known_task(const Task& task, const Quantizer& q, const Constellation& constellation,
                        std::span<const Complex> y);

/// (σ²·n_t·I + HᴴH)⁻¹Hᴴy, applied to y as received (quantizer ignored).
CVector lmmse_known_task(const Task& task, std::span<const Complex> y, int n_t);

class ChannelPrior {
 public:
  enum class Kind { continuous, discrete };

  /// i.i.d. CN(0,1) entries.
  static ChannelPrior continuous();
  /// Uniform over a finite channel set.
  static ChannelPrior discrete(std::vector<CMatrix> channels);

  Kind kind() const { return kind_; }
  const std::vector<CMatrix>& channels() const { return channels_; }

 private:
  ChannelPrior(Kind kind, std::vector<CMatrix> channels)
      : kind_(kind), channels_(std::move(channels)) {}

  Kind kind_;
  std::vector<CMatrix> channels_;
};

/// How the channel posterior is formed before averaging per-channel
/// posterior means.
enum class ChannelWeighting {
  /// Weights ∝ prior · P(context | H) · P(y | H): the exact posterior mean
  /// E[x | context, y].
  joint,
  /// Weights ∝ prior · P(context | H) only.
  context_only,
};

/// Unnormalized log posterior weight of each channel in a discrete prior
/// given the context (uniform prior weights omitted).
std::vector<double> channel_log_posterior_weights(const ChannelPrior& prior, double sigma2,
                                                  const Quantizer& q, const ContextSet& context);

/// Log weight of one channel given the context.
double channel_log_weight(const CMatrix& h, double sigma2, const Quantizer& q,
                          const ContextSet& context);

struct MixtureEstimate {
  CVector x_hat;
  /// Effective sample size 1/Σw̄² of the normalized channel weights.
  double ess = 0.0;
};

/// Mixture of known-task posterior means over a finite weighted channel
/// set. Construction precomputes everything that does not depend on the
/// test observation so one context can serve many test symbols.
class ChannelMixtureEqualizer {
 public:
  /// Channels whose log weight falls more than `prune_nats` below the best
  /// are dropped.
  ChannelMixtureEqualizer(std::span<const CMatrix> channels, std::span<const double> log_weights,
                          double sigma2, const Quantizer& q, const Constellation& constellation,
                          ChannelWeighting weighting, double prune_nats = 50.0);

  MixtureEstimate estimate(std::span<const Complex> y) const;
  std::size_t active_channels() const { return log_weights_.size(); }

 private:
  double sigma2_;
  Quantizer q_;
  const Constellation* constellation_;
  ChannelWeighting weighting_;
  std::vector<double> log_weights_;
  /// responses_[m][c] = H_m · x_c
  std::vector<std::vector<CVector>> responses_;
};

CVector bayes_mmse_discrete(const ChannelPrior& prior, double sigma2, const Quantizer& q,
                            const Constellation& constellation, const ContextSet& context,
                            std::span<const Complex> y,
                            ChannelWeighting weighting = ChannelWeighting::joint);

/// Self-normalized importance sampler with the continuous prior as proposal.
ChannelMixtureEqualizer make_importance_sampler(double sigma2, const Quantizer& q,
                                                const Constellation& constellation,
                                                const ContextSet& context, int n_r,
                                                std::size_t k, RngStream& rng,
                                                ChannelWeighting weighting = ChannelWeighting::joint);

MixtureEstimate bayes_mmse_continuous_mc(double sigma2, const Quantizer& q,
                                         const Constellation& constellation,
                                         const ContextSet& context, std::span<const Complex> y,
                                         std::size_t k, RngStream& rng,
                                         ChannelWeighting weighting = ChannelWeighting::joint);

/// Exact posterior-mean equalizer under the continuous prior for the
/// unquantized model. Each receive row h_r ~ CN(0, I) has a Gaussian
/// posterior given the pilots, which makes the predictive law of a new
/// observation Gaussian for every candidate input.
class GaussianPosteriorEqualizer {
 public:
  GaussianPosteriorEqualizer(double sigma2, const Constellation& constellation,
                             const ContextSet& context, int n_r);

  CVector estimate(std::span<const Complex> y) const;
  /// Posterior covariance of one channel row.
  const CMatrix& row_covariance() const { return covariance_; }

 private:
  const Constellation* constellation_;
  std::vector<CVector> predictive_means_;
  std::vector<double> predictive_vars_;
  CMatrix covariance_;
};

CVector bayes_mmse_gaussian_exact(double sigma2, const Constellation& constellation,
                                  const ContextSet& context, std::span<const Complex> y);

/// Same, rejecting quantized observation models.
CVector bayes_mmse_gaussian_exact(double sigma2, const Quantizer& q,
                                  const Constellation& constellation, const ContextSet& context,
                                  std::span<const Complex> y);

}  // namespace icleq
