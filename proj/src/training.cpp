#include "icleq/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>

namespace icleq {

namespace {

constexpr std::uint64_t kTaskStream = 0x7461736B73ull;   // "tasks"
constexpr std::uint64_t kInitStream = 0x696E6974ull;     // "init"
constexpr std::uint64_t kBatchStream = 0x6261746368ull;  // "batch"

std::vector<Matrix*> tensor_list(ModelParams& p) {
  std::vector<Matrix*> out;
  p.visit([&](const std::string&, Matrix& t) { out.push_back(&t); });
  return out;
}

std::vector<const Matrix*> tensor_list(const ModelParams& p) {
  std::vector<const Matrix*> out;
  p.visit([&](const std::string&, const Matrix& t) { out.push_back(&t); });
  return out;
}

int common_context_size(std::span<const TrainingExample> batch) {
  if (batch.empty()) throw std::invalid_argument("training batch is empty");
  const std::size_t n = batch.front().context.size();
  for (const auto& ex : batch) {
    if (ex.context.size() != n) {
      throw std::invalid_argument("training batch mixes context lengths");
    }
  }
  return static_cast<int>(n);
}

struct LossGraph {
  Graph graph;
  ForwardNodes nodes;
  Graph::Node loss = -1;
};

// Records forward pass and the weighted loss for `batch`; `total_batch` is
// the size of the full batch the weights are normalized by.
void build_loss(LossGraph& lg, const ModelParams& params, ModelParams* grads,
                const ModelConfig& config, const Constellation& constellation,
                std::span<const TrainingExample> batch, const std::vector<int>& y_indices,
                std::size_t total_batch) {
  const int n = common_context_size(batch);
  const int t = 2 * n + 1;
  const int ds = config.d_s();
  Matrix inputs(ds, t * static_cast<Eigen::Index>(batch.size()));
  std::vector<int> heads;
  Matrix targets(2 * constellation.n_t, static_cast<Eigen::Index>(batch.size() * y_indices.size()));
  Eigen::Index col = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    const Eigen::Index off = static_cast<Eigen::Index>(b) * t;
    inputs.middleCols(off, t) = sequence_inputs(config, ex.context, ex.y);
    for (int i : y_indices) {
      if (i < 0 || i > n) throw std::out_of_range("loss position outside 0..N");
      heads.push_back(static_cast<int>(off) + 2 * i);
      const CVector& target = i == n ? ex.x : ex.context.pairs[i].x;
      targets.col(col++) = realify(target, 2 * constellation.n_t);
    }
  }
  const double w = 1.0 / static_cast<double>(total_batch * y_indices.size());
  std::vector<double> weights(heads.size(), w);
  lg.nodes = build_forward(lg.graph, params, grads, config, inputs, t, heads,
                           constellation_matrix(constellation));
  lg.loss = lg.graph.weighted_squared_error(lg.nodes.estimates, std::move(targets),
                                            std::move(weights));
}

std::vector<int> loss_indices(int n, LossPositions positions) {
  if (positions == LossPositions::final_only) return {n};
  std::vector<int> all(n + 1);
  for (int i = 0; i <= n; ++i) all[i] = i;
  return all;
}

void add_into(ModelParams& dst, const ModelParams& src) {
  auto d = tensor_list(dst);
  auto s = tensor_list(src);
  for (std::size_t i = 0; i < d.size(); ++i) *d[i] += *s[i];
}

}  // namespace

Quantizer TrainConfig::quantizer() const {
  return bits ? Quantizer(*bits) : Quantizer::unquantized();
}

void TrainConfig::validate() const {
  model.validate();
  tasks.validate();
  if (m_tasks < 1) throw std::invalid_argument("TrainConfig: m_tasks must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be at least 1");
  if (static_cast<int>(n_context) > model.n_max) {
    throw std::invalid_argument("TrainConfig: n_context exceeds model n_max");
  }
  if (model.n_t != tasks.n_t || model.n_r != tasks.n_r) {
    throw std::invalid_argument("TrainConfig: model and task antenna counts differ");
  }
  if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be at least 1");
  if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
}

std::vector<double> per_position_loss(const ModelParams& params, const ModelConfig& config,
                                      const Constellation& constellation,
                                      std::span<const TrainingExample> batch) {
  const int n = common_context_size(batch);
  LossGraph lg;
  build_loss(lg, params, nullptr, config, constellation, batch,
             loss_indices(n, LossPositions::all_y), batch.size());
  const Matrix& est = lg.graph.value(lg.nodes.estimates);
  std::vector<double> out(n + 1, 0.0);
  Eigen::Index col = 0;
  for (const auto& ex : batch) {
    for (int i = 0; i <= n; ++i) {
      const CVector& target = i == n ? ex.x : ex.context.pairs[i].x;
      const Eigen::VectorXd t = realify(target, 2 * constellation.n_t);
      out[i] += (est.col(col++) - t).squaredNorm();
    }
  }
  for (double& v : out) v /= static_cast<double>(batch.size());
  return out;
}

double batch_loss(const ModelParams& params, const ModelConfig& config,
                  const Constellation& constellation, std::span<const TrainingExample> batch,
                  LossPositions positions) {
  const int n = common_context_size(batch);
  LossGraph lg;
  build_loss(lg, params, nullptr, config, constellation, batch, loss_indices(n, positions),
             batch.size());
  return lg.graph.value(lg.loss)(0, 0);
}

LossAndGradient gradient_at_positions(const ModelParams& params, const ModelConfig& config,
                                      const Constellation& constellation,
                                      std::span<const TrainingExample> batch,
                                      const std::vector<int>& y_indices) {
  LossAndGradient out{0.0, ModelParams::zeros(config)};
  LossGraph lg;
  build_loss(lg, params, &out.grads, config, constellation, batch, y_indices, batch.size());
  lg.graph.backward(lg.loss);
  out.loss = lg.graph.value(lg.loss)(0, 0);
  return out;
}

LossAndGradient gradient(const ModelParams& params, const ModelConfig& config,
                         const Constellation& constellation,
                         std::span<const TrainingExample> batch, LossPositions positions,
                         int threads) {
  const int n = common_context_size(batch);
  const auto indices = loss_indices(n, positions);
  const std::size_t chunks =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, batch.size());

  std::vector<LossAndGradient> parts(chunks);
  auto run_chunk = [&](std::size_t c) {
    const std::size_t begin = batch.size() * c / chunks;
    const std::size_t end = batch.size() * (c + 1) / chunks;
    parts[c].grads = ModelParams::zeros(config);
    LossGraph lg;
    build_loss(lg, params, &parts[c].grads, config, constellation,
               batch.subspan(begin, end - begin), indices, batch.size());
    lg.graph.backward(lg.loss);
    parts[c].loss = lg.graph.value(lg.loss)(0, 0);
  };

  if (chunks == 1) {
    run_chunk(0);
    return std::move(parts[0]);
  }
  std::vector<std::exception_ptr> errors(chunks);
  {
    std::vector<std::jthread> workers;
    for (std::size_t c = 0; c < chunks; ++c) {
      workers.emplace_back([&, c] {
        try {
          run_chunk(c);
        } catch (...) {
          errors[c] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  LossAndGradient out = std::move(parts[0]);
  for (std::size_t c = 1; c < chunks; ++c) {
    out.loss += parts[c].loss;
    add_into(out.grads, parts[c].grads);
  }
  return out;
}

double global_norm(const ModelParams& grads) {
  double acc = 0.0;
  grads.visit([&](const std::string&, const Matrix& t) { acc += t.squaredNorm(); });
  return std::sqrt(acc);
}

AdamState AdamState::for_params(const ModelParams& params, const TrainConfig& config) {
  AdamState s;
  s.m = params;
  s.v = params;
  s.m.visit([](const std::string&, Matrix& t) { t.setZero(); });
  s.v.visit([](const std::string&, Matrix& t) { t.setZero(); });
  s.lr = config.lr;
  s.beta1 = config.beta1;
  s.beta2 = config.beta2;
  s.epsilon = config.epsilon;
  s.clip_norm = config.clip_norm;
  return s;
}

void adam_step(ModelParams& params, ModelParams grads, AdamState& state) {
  auto p = tensor_list(params);
  auto g = tensor_list(grads);
  auto m = tensor_list(state.m);
  auto v = tensor_list(state.v);
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
    throw std::invalid_argument("adam_step: tensor count mismatch");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i]->rows() != g[i]->rows() || p[i]->cols() != g[i]->cols() ||
        p[i]->rows() != m[i]->rows() || p[i]->cols() != m[i]->cols()) {
      throw std::invalid_argument("adam_step: tensor shape mismatch");
    }
  }

  if (state.clip_norm > 0.0) {
    const double norm = global_norm(grads);
    if (norm > state.clip_norm) {
      const double scale = state.clip_norm / norm;
      for (Matrix* t : g) *t *= scale;
    }
  }

  ++state.t;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i]->array() = b1 * m[i]->array() + (1.0 - b1) * g[i]->array();
    v[i]->array() = b2 * v[i]->array() + (1.0 - b2) * g[i]->array().square();
    p[i]->array() -= state.lr * (m[i]->array() / c1) /
                     ((v[i]->array() / c2).sqrt() + state.epsilon);
  }
}

PretrainTaskSet PretrainTaskSet::sample(const TaskDistribution& dist, std::size_t m,
                                        std::uint64_t seed) {
  RngStream rng(seed, kTaskStream);
  PretrainTaskSet set;
  set.tasks.reserve(m);
  for (std::size_t i = 0; i < m; ++i) set.tasks.push_back(sample_task(dist, rng));
  return set;
}

std::vector<CMatrix> PretrainTaskSet::channels() const {
  std::vector<CMatrix> out;
  out.reserve(tasks.size());
  for (const auto& t : tasks) out.push_back(t.h);
  return out;
}

double scheduled_lr(const TrainConfig& config, std::size_t step) {
  if (config.warmup_steps == 0) return config.lr;
  const double frac = static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  return config.lr * std::min(1.0, frac);
}

std::vector<TrainingExample> sample_training_batch(const TrainConfig& config,
                                                   const PretrainTaskSet& task_set,
                                                   const Constellation& constellation,
                                                   std::size_t step,
                                                   std::vector<std::size_t>* task_indices) {
  const Quantizer q = config.quantizer();
  RngStream step_rng(config.seed, mix_stream_id(kBatchStream, step));
  std::vector<TrainingExample> batch;
  batch.reserve(config.batch_size);
  if (task_indices) task_indices->clear();
  for (std::size_t b = 0; b < config.batch_size; ++b) {
    const std::size_t m = step_rng.uniform_index(task_set.tasks.size());
    if (task_indices) task_indices->push_back(m);
    const Task& task = task_set.tasks[m];
    RngStream ex_rng = step_rng.split(b);
    TrainingExample ex;
    ex.context = sample_context(task, q, constellation, config.n_context, ex_rng);
    ex.x_index = ex_rng.uniform_index(constellation.size());
    ex.x = constellation[ex.x_index];
    ex.y = apply_channel(task, q, ex.x, ex_rng);
    batch.push_back(std::move(ex));
  }
  return batch;
}

TrainingResult pretrain(const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  const Constellation constellation = Constellation::qam4(config.model.n_t);

  TrainingResult result;
  result.task_set = PretrainTaskSet::sample(config.tasks, config.m_tasks, config.seed);
  RngStream init_rng(config.seed, kInitStream);
  result.params = ModelParams::initialize(config.model, init_rng);
  AdamState state = AdamState::for_params(result.params, config);
  result.curve.reserve(config.n_steps);

  std::vector<std::size_t> drawn;
  for (std::size_t step = 0; step < config.n_steps; ++step) {
    const auto batch = sample_training_batch(config, result.task_set, constellation, step, &drawn);
    if (hooks.on_batch) hooks.on_batch(step, drawn);
    LossAndGradient lg;
    try {
      lg = gradient(result.params, config.model, constellation, batch, config.loss_positions,
                    config.threads);
    } catch (const NonFiniteError& e) {
      throw TrainingDivergedError("training diverged at step " + std::to_string(step) + ": " +
                                  e.what());
    }
    if (!std::isfinite(lg.loss) || lg.loss > 1e3) {
      throw TrainingDivergedError("training diverged at step " + std::to_string(step) +
                                  ": loss = " + std::to_string(lg.loss));
    }
    state.lr = scheduled_lr(config, step);
    adam_step(result.params, std::move(lg.grads), state);
    if (!result.params.all_finite()) {
      throw TrainingDivergedError("training diverged at step " + std::to_string(step) +
                                  ": parameters became non-finite");
    }
    result.curve.emplace_back(step, lg.loss);
    if (hooks.on_step) hooks.on_step(step, lg.loss);
  }
  return result;
}

}  // namespace icleq
