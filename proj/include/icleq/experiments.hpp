#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "icleq/channel.hpp"
#include "icleq/config.hpp"
#include "icleq/estimators.hpp"
#include "icleq/training.hpp"
#include "icleq/transformer.hpp"

namespace icleq {

class IncompatibleEqualizerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class MalformedCsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalProtocol {
  std::size_t n_test_tasks = 500;
  std::size_t n_context = 20;
  std::size_t n_test_symbols = 64;
  std::optional<int> bits = 4;
  TaskDistribution tasks;
  std::uint64_t seed = 0;

  Quantizer quantizer() const;
  void validate() const;
};

/// One evaluation task: its channel, a context and the test pairs.
struct EvalTask {
  Task task;
  ContextSet context;
  std::vector<std::size_t> x_index;
  std::vector<CVector> x;
  std::vector<CVector> y;
};

struct EvalDraws {
  std::vector<EvalTask> tasks;
  /// Hash of every sampled number; equal hashes mean byte-identical draws.
  std::uint64_t hash = 0;

  std::size_t n_samples() const;
};

/// Fresh evaluation tasks. Throws std::logic_error if a sampled channel
/// coincides with one in `exclude` (the pre-training set).
EvalDraws sample_eval_draws(const EvalProtocol& protocol, std::span<const CMatrix> exclude = {});

std::uint64_t hash_draws(std::span<const EvalTask> tasks);

struct TaskEstimates {
  std::vector<CVector> x_hat;
  /// Per-symbol effective sample size; empty for estimators without one.
  std::vector<double> ess;
};

class Equalizer {
 public:
  virtual ~Equalizer() = default;
  virtual std::string id() const = 0;
  /// Throws IncompatibleEqualizerError if the protocol cannot be served.
  virtual void check_compatible(const EvalProtocol& protocol) const;
  /// Estimates for every test symbol of one task. `rng` is private to the
  /// task, so results do not depend on scheduling.
  virtual TaskEstimates estimate_task(const EvalTask& task, const Quantizer& q,
                                      const Constellation& constellation,
                                      RngStream& rng) const = 0;
};

std::unique_ptr<Equalizer> make_model_equalizer(std::string id, ModelParams params,
                                                ModelConfig config);
std::unique_ptr<Equalizer> make_mmse_known_task();
std::unique_ptr<Equalizer> make_lmmse_known_task();
std::unique_ptr<Equalizer> make_bayes_discrete(std::vector<CMatrix> channels,
                                               std::string id = "bayes_discrete");
std::unique_ptr<Equalizer> make_bayes_continuous_mc(std::size_t k,
                                                    std::string id = "bayes_continuous_mc");
std::unique_ptr<Equalizer> make_bayes_gaussian_exact(std::string id = "bayes_gaussian_exact");

/// Per-draw squared errors of one equalizer, task-major.
struct EstimatorErrors {
  std::string id;
  std::vector<double> sq_errors;
  std::vector<double> ess;
};

/// Runs every equalizer on the same draws. Tasks are spread over `threads`
/// workers; output does not depend on the thread count.
std::vector<EstimatorErrors> evaluate_paired(std::span<const Equalizer* const> equalizers,
                                             const EvalDraws& draws,
                                             const EvalProtocol& protocol, int threads = 1);

struct MeanCi {
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

/// Mean with a 95% normal-approximation interval.
MeanCi mean_ci95(std::span<const double> samples);

struct PairedComparison {
  double mean_diff = 0.0;  // mean(a − b)
  double ci_low = 0.0;
  double ci_high = 0.0;
  double z = 0.0;

  /// a has lower error than b at 95% confidence.
  bool a_better() const { return ci_high < 0.0; }
  /// b has lower error than a at 95% confidence.
  bool b_better() const { return ci_low > 0.0; }
};

PairedComparison paired_compare(std::span<const double> a, std::span<const double> b);

struct EvalResult {
  std::string sweep;
  std::string estimator;
  double value = 0.0;
  double mse = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n_samples = 0;
  /// Median effective sample size; NaN for estimators without one.
  double ess = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;

  bool operator==(const EvalResult&) const = default;
};

/// Suffix appended to the estimator name of rows whose median ESS is below
/// the flag threshold.
inline constexpr const char* kLowEssSuffix = "[low_ess]";

EvalResult summarize(const EstimatorErrors& errors, std::string sweep, double value,
                     std::uint64_t seed, double ess_flag_threshold = 50.0);

/// Single-equalizer convenience wrapper around evaluate_paired.
EvalResult evaluate(const Equalizer& equalizer, const EvalProtocol& protocol, int threads = 1);

inline constexpr const char* kCsvHeader =
    "sweep,estimator,value,mse,ci_low,ci_high,n_samples,ess,seed";

void write_csv(std::ostream& out, std::span<const EvalResult> rows);
std::vector<EvalResult> read_csv(std::istream& in);

/// Gnuplot-friendly blocks (separated by two blank lines), one per
/// (sweep, estimator) in order of first appearance.
std::string emit_plot_data(std::span<const EvalResult> rows);

struct ExperimentConfig {
  TrainConfig train;
  EvalProtocol eval;
  std::vector<double> m_grid = {1, 4, 16, 64, 256, 1024};
  std::vector<double> snr_grid_db = {0, 5, 10, 15, 20, 25, 30};
  std::vector<std::optional<int>> bits_grid = {1, 2, 3, 4, 6, 8, std::nullopt};
  /// Training SNR endpoints of the SNR sweep.
  double snr_low_db = 0.0;
  double snr_high_db = 30.0;
  /// Pre-training set size for the SNR and quantization sweeps.
  std::size_t sweep_m_tasks = 4096;
  double quant_snr_db = 10.0;
  std::size_t mc_samples = 16384;
  double ess_flag_threshold = 50.0;
  /// When set, trained models are cached here and reused if the stored
  /// training config matches.
  std::optional<std::filesystem::path> checkpoint_dir;
  int threads = 1;

  void set_seed(std::uint64_t seed);
  void validate() const;
};

/// Reads experiment and training keys; unknown keys are rejected.
ExperimentConfig experiment_config_from_map(const ConfigMap& map,
                                            const ExperimentConfig& defaults = {});
ConfigMap to_config_map(const ExperimentConfig& config);

using LogFn = std::function<void(const std::string&)>;

/// Trains (or loads from the checkpoint cache) one model.
ModelParams obtain_model(const TrainConfig& config, const std::string& tag,
                         const ExperimentConfig& experiment, const LogFn& log);

std::vector<EvalResult> run_threshold_sweep(const ExperimentConfig& config, const LogFn& log = {});
std::vector<EvalResult> run_snr_sweep(const ExperimentConfig& config, const LogFn& log = {});
std::vector<EvalResult> run_quantization_sweep(const ExperimentConfig& config,
                                               const LogFn& log = {});

}  // namespace icleq
