#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "icleq/channel.hpp"
#include "icleq/transformer.hpp"

namespace icleq {

enum class LossPositions {
  /// Average of the errors at every y position 0…N.
  all_y,
  /// Error at the final y position only.
  final_only,
};

struct TrainConfig {
  ModelConfig model;
  TaskDistribution tasks;
  /// Quantizer resolution; nullopt means unquantized.
  std::optional<int> bits = 4;
  std::size_t m_tasks = 4096;
  std::size_t n_context = 20;
  std::size_t batch_size = 64;
  std::size_t n_steps = 50000;
  double lr = 1e-4;
  std::size_t warmup_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global-norm clipping threshold; ≤ 0 disables clipping.
  double clip_norm = 1.0;
  LossPositions loss_positions = LossPositions::all_y;
  std::uint64_t seed = 0;
  /// Worker threads for gradient evaluation; 1 is the bit-reproducible mode.
  int threads = 1;

  Quantizer quantizer() const;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// One sequence: a context plus the test pair.
struct TrainingExample {
  ContextSet context;
  CVector x;
  CVector y;
  std::size_t x_index = 0;
};

/// Mean squared error per y position, averaged over the batch (N+1 values).
std::vector<double> per_position_loss(const ModelParams& params, const ModelConfig& config,
                                      const Constellation& constellation,
                                      std::span<const TrainingExample> batch);

double batch_loss(const ModelParams& params, const ModelConfig& config,
                  const Constellation& constellation, std::span<const TrainingExample> batch,
                  LossPositions positions);

struct LossAndGradient {
  double loss = 0.0;
  ModelParams grads;
};

/// Reverse-mode gradient of batch_loss. With threads > 1 the batch is split
/// into contiguous chunks whose gradients are summed in chunk order.
LossAndGradient gradient(const ModelParams& params, const ModelConfig& config,
                         const Constellation& constellation,
                         std::span<const TrainingExample> batch, LossPositions positions,
                         int threads = 1);

/// Gradient with an explicit list of y-position indices contributing to the
/// loss (each weighted 1/(batch·|positions|)).
LossAndGradient gradient_at_positions(const ModelParams& params, const ModelConfig& config,
                                      const Constellation& constellation,
                                      std::span<const TrainingExample> batch,
                                      const std::vector<int>& y_indices);

double global_norm(const ModelParams& grads);

struct AdamState {
  ModelParams m;
  ModelParams v;
  std::uint64_t t = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;

  static AdamState for_params(const ModelParams& params, const TrainConfig& config);
};

/// Clips `grads` to the state's global norm (if enabled), then applies one
/// bias-corrected Adam update.
void adam_step(ModelParams& params, ModelParams grads, AdamState& state);

/// Pre-training task set, sampled once from (dist, seed) and then frozen.
struct PretrainTaskSet {
  std::vector<Task> tasks;

  static PretrainTaskSet sample(const TaskDistribution& dist, std::size_t m, std::uint64_t seed);
  std::vector<CMatrix> channels() const;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainingResult {
  ModelParams params;
  PretrainTaskSet task_set;
  std::vector<std::pair<std::size_t, double>> curve;
};

struct TrainHooks {
  /// Called with (step, loss) after every update.
  std::function<void(std::size_t, double)> on_step;
  /// Called with (step, task indices drawn for the batch).
  std::function<void(std::size_t, const std::vector<std::size_t>&)> on_batch;
};

/// Draws one training batch for `step` from the frozen task set.
std::vector<TrainingExample> sample_training_batch(const TrainConfig& config,
                                                   const PretrainTaskSet& task_set,
                                                   const Constellation& constellation,
                                                   std::size_t step,
                                                   std::vector<std::size_t>* task_indices = nullptr);

TrainingResult pretrain(const TrainConfig& config, const TrainHooks& hooks = {});

/// Learning rate at a 0-based step under linear warmup.
double scheduled_lr(const TrainConfig& config, std::size_t step);

}  // namespace icleq
