#include "icleq/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <thread>

#include "icleq/checkpoint.hpp"

namespace icleq {

namespace {

constexpr std::uint64_t kEvalStream = 0x6576616C;       // "eval"
constexpr std::uint64_t kEstimatorStream = 0x65737469;  // "esti"
constexpr double kZ95 = 1.959963984540054;

class Fnv1a {
 public:
  void add(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ull;
    }
  }
  void add(double v) { add(&v, sizeof v); }
  void add(std::uint64_t v) { add(&v, sizeof v); }
  void add(const Complex& c) {
    add(c.real());
    add(c.imag());
  }
  void add(std::span<const Complex> v) {
    for (const auto& c : v) add(c);
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

double squared_error(std::span<const Complex> a, std::span<const Complex> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::norm(a[i] - b[i]);
  return acc;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw std::invalid_argument("not an unsigned integer: '" + s + "'");
  }
  return v;
}

void check_isolation(const EvalDraws& draws, std::span<const CMatrix> pretrain) {
  for (const auto& t : draws.tasks) {
    for (const auto& h : pretrain) {
      if (t.task.h == h) {
        throw std::logic_error("evaluation task channel coincides with a pre-training channel");
      }
    }
  }
}

// ---- equalizers ----------------------------------------------------------

class ModelEqualizer final : public Equalizer {
 public:
  ModelEqualizer(std::string id, ModelParams params, ModelConfig config)
      : id_(std::move(id)), params_(std::move(params)), config_(config) {}

  std::string id() const override { return id_; }

  void check_compatible(const EvalProtocol& p) const override {
    if (static_cast<int>(p.n_context) > config_.n_max) {
      throw IncompatibleEqualizerError(id_ + ": context length exceeds the model's n_max");
    }
    if (p.tasks.n_t != config_.n_t || p.tasks.n_r != config_.n_r) {
      throw IncompatibleEqualizerError(id_ + ": antenna counts differ from the model");
    }
  }

  TaskEstimates estimate_task(const EvalTask& task, const Quantizer&, const Constellation& cons,
                              RngStream&) const override {
    return {estimate_batch(params_, config_, cons, task.context, task.y), {}};
  }

 private:
  std::string id_;
  ModelParams params_;
  ModelConfig config_;
};

class MmseKnownTaskEqualizer final : public Equalizer {
 public:
  std::string id() const override { return "mmse_known_task"; }
  TaskEstimates estimate_task(const EvalTask& task, const Quantizer& q, const Constellation& cons,
                              RngStream&) const override {
    TaskEstimates out;
    for (const auto& y : task.y) out.x_hat.push_back(mmse_known_task(task.task, q, cons, y));
    return out;
  }
};

class LmmseKnownTaskEqualizer final : public Equalizer {
 public:
  std::string id() const override { return "lmmse_known_task"; }
  TaskEstimates estimate_task(const EvalTask& task, const Quantizer&, const Constellation& cons,
                              RngStream&) const override {
    TaskEstimates out;
    for (const auto& y : task.y) out.x_hat.push_back(lmmse_known_task(task.task, y, cons.n_t));
    return out;
  }
};

class BayesDiscreteEqualizer final : public Equalizer {
 public:
  BayesDiscreteEqualizer(std::vector<CMatrix> channels, std::string id)
      : prior_(ChannelPrior::discrete(std::move(channels))), id_(std::move(id)) {}

  std::string id() const override { return id_; }

  void check_compatible(const EvalProtocol& p) const override {
    for (const auto& h : prior_.channels()) {
      if (static_cast<int>(h.rows()) != p.tasks.n_r || static_cast<int>(h.cols()) != p.tasks.n_t) {
        throw IncompatibleEqualizerError(id_ + ": prior channel shape differs from the protocol");
      }
    }
  }

  TaskEstimates estimate_task(const EvalTask& task, const Quantizer& q, const Constellation& cons,
                              RngStream&) const override {
    const double s2 = task.task.sigma2;
    const auto w = channel_log_posterior_weights(prior_, s2, q, task.context);
    const ChannelMixtureEqualizer eq(prior_.channels(), w, s2, q, cons, ChannelWeighting::joint);
    TaskEstimates out;
    for (const auto& y : task.y) out.x_hat.push_back(eq.estimate(y).x_hat);
    return out;
  }

 private:
  ChannelPrior prior_;
  std::string id_;
};

class BayesMcEqualizer final : public Equalizer {
 public:
  BayesMcEqualizer(std::size_t k, std::string id) : k_(k), id_(std::move(id)) {
    if (k_ < 1) throw std::invalid_argument("Monte Carlo sample count must be at least 1");
  }
  std::string id() const override { return id_; }
  TaskEstimates estimate_task(const EvalTask& task, const Quantizer& q, const Constellation& cons,
                              RngStream& rng) const override {
    const auto sampler = make_importance_sampler(task.task.sigma2, q, cons, task.context,
                                                 static_cast<int>(task.task.h.rows()), k_, rng);
    TaskEstimates out;
    for (const auto& y : task.y) {
      auto e = sampler.estimate(y);
      out.x_hat.push_back(std::move(e.x_hat));
      out.ess.push_back(e.ess);
    }
    return out;
  }

 private:
  std::size_t k_;
  std::string id_;
};

class GaussianExactEqualizer final : public Equalizer {
 public:
  explicit GaussianExactEqualizer(std::string id) : id_(std::move(id)) {}
  std::string id() const override { return id_; }
  void check_compatible(const EvalProtocol& p) const override {
    if (p.bits) {
      throw IncompatibleEqualizerError(id_ + " requires an unquantized observation model");
    }
  }
  TaskEstimates estimate_task(const EvalTask& task, const Quantizer&, const Constellation& cons,
                              RngStream&) const override {
    const GaussianPosteriorEqualizer eq(task.task.sigma2, cons, task.context,
                                        static_cast<int>(task.task.h.rows()));
    TaskEstimates out;
    for (const auto& y : task.y) out.x_hat.push_back(eq.estimate(y));
    return out;
  }

 private:
  std::string id_;
};

// ---- sweeps --------------------------------------------------------------

std::string format_value_tag(double v) {
  std::string s = format_double(v);
  std::replace(s.begin(), s.end(), '-', 'm');
  std::replace(s.begin(), s.end(), '.', 'p');
  return s;
}

EvalProtocol base_protocol(const ExperimentConfig& c) {
  EvalProtocol p = c.eval;
  p.n_context = c.train.n_context;
  p.bits = c.train.bits;
  p.tasks = c.train.tasks;
  return p;
}

void log_line(const LogFn& log, const std::string& s) {
  if (log) log(s);
}

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<EvalResult> evaluate_rows(std::span<const Equalizer* const> eqs,
                                      const EvalDraws& draws, const EvalProtocol& protocol,
                                      const ExperimentConfig& config, const std::string& sweep,
                                      double value, const LogFn& log) {
  log_line(log, sweep + " value=" + format_double(value) + ": evaluating " +
                    std::to_string(eqs.size()) + " estimators on draws " + hex(draws.hash));
  const auto errors = evaluate_paired(eqs, draws, protocol, config.threads);
  std::vector<EvalResult> rows;
  for (const auto& e : errors) {
    rows.push_back(summarize(e, sweep, value, protocol.seed, config.ess_flag_threshold));
    log_line(log, "  " + rows.back().estimator + " mse=" + fmt17(rows.back().mse));
  }
  return rows;
}

}  // namespace

// ---- protocol and draws --------------------------------------------------

Quantizer EvalProtocol::quantizer() const {
  return bits ? Quantizer(*bits) : Quantizer::unquantized();
}

void EvalProtocol::validate() const {
  if (n_test_tasks < 1 || n_test_symbols < 1) {
    throw std::invalid_argument("EvalProtocol: counts must be at least 1");
  }
  tasks.validate();
  quantizer();
}

std::size_t EvalDraws::n_samples() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.y.size();
  return n;
}

std::uint64_t hash_draws(std::span<const EvalTask> tasks) {
  Fnv1a h;
  for (const auto& t : tasks) {
    h.add(t.task.sigma2);
    h.add(t.task.h.entries());
    for (const auto& p : t.context.pairs) {
      h.add(p.x);
      h.add(p.y);
    }
    for (std::size_t i = 0; i < t.y.size(); ++i) {
      h.add(static_cast<std::uint64_t>(t.x_index[i]));
      h.add(t.y[i]);
    }
  }
  return h.value();
}

EvalDraws sample_eval_draws(const EvalProtocol& protocol, std::span<const CMatrix> exclude) {
  protocol.validate();
  const Quantizer q = protocol.quantizer();
  const Constellation cons = Constellation::qam4(protocol.tasks.n_t);
  RngStream base(protocol.seed, kEvalStream);
  EvalDraws draws;
  draws.tasks.reserve(protocol.n_test_tasks);
  for (std::size_t t = 0; t < protocol.n_test_tasks; ++t) {
    RngStream rng = base.split(t);
    EvalTask et;
    et.task = sample_task(protocol.tasks, rng);
    et.context = sample_context(et.task, q, cons, protocol.n_context, rng);
    for (std::size_t s = 0; s < protocol.n_test_symbols; ++s) {
      const std::size_t xi = rng.uniform_index(cons.size());
      et.x_index.push_back(xi);
      et.x.push_back(cons[xi]);
      et.y.push_back(apply_channel(et.task, q, cons[xi], rng));
    }
    draws.tasks.push_back(std::move(et));
  }
  draws.hash = hash_draws(draws.tasks);
  check_isolation(draws, exclude);
  return draws;
}

// ---- equalizer factories -------------------------------------------------

void Equalizer::check_compatible(const EvalProtocol&) const {}

std::unique_ptr<Equalizer> make_model_equalizer(std::string id, ModelParams params,
                                                ModelConfig config) {
  return std::make_unique<ModelEqualizer>(std::move(id), std::move(params), config);
}
std::unique_ptr<Equalizer> make_mmse_known_task() {
  return std::make_unique<MmseKnownTaskEqualizer>();
}
std::unique_ptr<Equalizer> make_lmmse_known_task() {
  return std::make_unique<LmmseKnownTaskEqualizer>();
}
std::unique_ptr<Equalizer> make_bayes_discrete(std::vector<CMatrix> channels, std::string id) {
  return std::make_unique<BayesDiscreteEqualizer>(std::move(channels), std::move(id));
}
std::unique_ptr<Equalizer> make_bayes_continuous_mc(std::size_t k, std::string id) {
  return std::make_unique<BayesMcEqualizer>(k, std::move(id));
}
std::unique_ptr<Equalizer> make_bayes_gaussian_exact(std::string id) {
  return std::make_unique<GaussianExactEqualizer>(std::move(id));
}

// ---- evaluation ----------------------------------------------------------

std::vector<EstimatorErrors> evaluate_paired(std::span<const Equalizer* const> equalizers,
                                             const EvalDraws& draws,
                                             const EvalProtocol& protocol, int threads) {
  for (const Equalizer* e : equalizers) e->check_compatible(protocol);
  const Quantizer q = protocol.quantizer();
  const Constellation cons = Constellation::qam4(protocol.tasks.n_t);

  std::vector<std::size_t> offsets(draws.tasks.size() + 1, 0);
  for (std::size_t t = 0; t < draws.tasks.size(); ++t) {
    offsets[t + 1] = offsets[t] + draws.tasks[t].y.size();
  }
  const std::size_t total = offsets.back();

  std::vector<EstimatorErrors> out(equalizers.size());
  for (std::size_t e = 0; e < equalizers.size(); ++e) {
    out[e].id = equalizers[e]->id();
    out[e].sq_errors.assign(total, 0.0);
    out[e].ess.assign(total, std::numeric_limits<double>::quiet_NaN());
  }

  auto run_task = [&](std::size_t t) {
    const EvalTask& task = draws.tasks[t];
    for (std::size_t e = 0; e < equalizers.size(); ++e) {
      RngStream rng(protocol.seed, mix_stream_id(kEstimatorStream, t));
      const TaskEstimates est = equalizers[e]->estimate_task(task, q, cons, rng);
      if (est.x_hat.size() != task.y.size()) {
        throw std::logic_error(out[e].id + ": wrong number of estimates");
      }
      for (std::size_t s = 0; s < task.y.size(); ++s) {
        out[e].sq_errors[offsets[t] + s] = squared_error(est.x_hat[s], task.x[s]);
      }
      if (!est.ess.empty()) {
        for (std::size_t s = 0; s < task.y.size(); ++s) out[e].ess[offsets[t] + s] = est.ess[s];
      }
    }
  };

  const std::size_t workers =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1,
                              std::max<std::size_t>(draws.tasks.size(), 1));
  if (workers == 1) {
    for (std::size_t t = 0; t < draws.tasks.size(); ++t) run_task(t);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t t = w; t < draws.tasks.size(); t += workers) run_task(t);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (std::size_t e = 0; e < out.size(); ++e) {
    const bool any = std::any_of(out[e].ess.begin(), out[e].ess.end(),
                                 [](double v) { return !std::isnan(v); });
    if (!any) out[e].ess.clear();
  }
  return out;
}

MeanCi mean_ci95(std::span<const double> samples) {
  if (samples.empty()) throw std::invalid_argument("mean_ci95: no samples");
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double v : samples) mean += v;
  mean /= n;
  if (samples.size() < 2) return {mean, mean, mean};
  double ss = 0.0;
  for (double v : samples) ss += (v - mean) * (v - mean);
  const double half = kZ95 * std::sqrt(ss / (n - 1.0) / n);
  return {mean, mean - half, mean + half};
}

PairedComparison paired_compare(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("paired_compare: samples must be non-empty and paired");
  }
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const MeanCi ci = mean_ci95(d);
  PairedComparison out;
  out.mean_diff = ci.mean;
  out.ci_low = ci.ci_low;
  out.ci_high = ci.ci_high;
  const double se = (ci.ci_high - ci.mean) / kZ95;
  out.z = se > 0.0 ? ci.mean / se : (ci.mean == 0.0 ? 0.0 : std::copysign(INFINITY, ci.mean));
  return out;
}

EvalResult summarize(const EstimatorErrors& errors, std::string sweep, double value,
                     std::uint64_t seed, double ess_flag_threshold) {
  const MeanCi ci = mean_ci95(errors.sq_errors);
  EvalResult r;
  r.sweep = std::move(sweep);
  r.estimator = errors.id;
  r.value = value;
  r.mse = ci.mean;
  r.ci_low = ci.ci_low;
  r.ci_high = ci.ci_high;
  r.n_samples = errors.sq_errors.size();
  r.seed = seed;
  if (!errors.ess.empty()) {
    r.ess = median(errors.ess);
    if (r.ess < ess_flag_threshold) r.estimator += kLowEssSuffix;
  }
  return r;
}

EvalResult evaluate(const Equalizer& equalizer, const EvalProtocol& protocol, int threads) {
  const EvalDraws draws = sample_eval_draws(protocol);
  const Equalizer* eqs[] = {&equalizer};
  const auto errors = evaluate_paired(eqs, draws, protocol, threads);
  return summarize(errors.front(), "eval", 0.0, protocol.seed);
}

// ---- CSV and plot data ---------------------------------------------------

void write_csv(std::ostream& out, std::span<const EvalResult> rows) {
  out << kCsvHeader << '\n';
  for (const auto& r : rows) {
    for (const auto* s : {&r.sweep, &r.estimator}) {
      if (s->find_first_of(",\n\r\"") != std::string::npos) {
        throw std::invalid_argument("CSV field contains a separator: " + *s);
      }
    }
    out << r.sweep << ',' << r.estimator << ',' << fmt17(r.value) << ',' << fmt17(r.mse) << ','
        << fmt17(r.ci_low) << ',' << fmt17(r.ci_high) << ',' << r.n_samples << ','
        << (std::isnan(r.ess) ? std::string() : fmt17(r.ess)) << ',' << r.seed << '\n';
  }
}

std::vector<EvalResult> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw MalformedCsvError("CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader) throw MalformedCsvError("unexpected CSV header: " + line);
  std::vector<EvalResult> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    const std::string where = "CSV line " + std::to_string(line_no);
    if (f.size() != 9) throw MalformedCsvError(where + ": expected 9 fields");
    try {
      EvalResult r;
      r.sweep = f[0];
      r.estimator = f[1];
      r.value = parse_double(f[2]);
      r.mse = parse_double(f[3]);
      r.ci_low = parse_double(f[4]);
      r.ci_high = parse_double(f[5]);
      r.n_samples = static_cast<std::size_t>(parse_u64(f[6]));
      r.ess = f[7].empty() ? std::numeric_limits<double>::quiet_NaN() : parse_double(f[7]);
      r.seed = parse_u64(f[8]);
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw MalformedCsvError(where + ": " + e.what());
    }
  }
  return rows;
}

std::string emit_plot_data(std::span<const EvalResult> rows) {
  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::vector<const EvalResult*>> blocks;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.sweep, r.estimator);
    if (!blocks.contains(key)) keys.push_back(key);
    blocks[key].push_back(&r);
  }
  std::string out;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (i) out += "\n\n";
    const auto& [sweep, estimator] = keys[i];
    out += "# sweep=" + sweep + " estimator=" + estimator + "\n";
    out += "# value mse ci_low ci_high\n";
    for (const EvalResult* r : blocks[keys[i]]) {
      out += fmt17(r->value) + ' ' + fmt17(r->mse) + ' ' + fmt17(r->ci_low) + ' ' +
             fmt17(r->ci_high) + '\n';
    }
  }
  return out;
}

// ---- experiment config ---------------------------------------------------

void ExperimentConfig::set_seed(std::uint64_t seed) {
  train.seed = seed;
  eval.seed = seed;
}

void ExperimentConfig::validate() const {
  train.validate();
  eval.validate();
  if (m_grid.empty()) throw std::invalid_argument("m_grid is empty");
  for (double m : m_grid) {
    if (!(m >= 1.0) || m != std::floor(m)) {
      throw std::invalid_argument("m_grid entries must be positive integers");
    }
  }
  if (snr_grid_db.empty() || bits_grid.empty()) throw std::invalid_argument("empty sweep grid");
  if (mc_samples < 1) throw std::invalid_argument("mc_samples must be at least 1");
  if (threads < 1) throw std::invalid_argument("threads must be at least 1");
}

ExperimentConfig experiment_config_from_map(const ConfigMap& map,
                                            const ExperimentConfig& defaults) {
  ExperimentConfig c = defaults;
  ConfigReader r(map);
  read_train_config(r, c.train);
  c.set_seed(c.train.seed);
  c.threads = c.train.threads;
  r.read("n_test_tasks", c.eval.n_test_tasks);
  r.read("n_test_symbols", c.eval.n_test_symbols);
  r.read_list("m_grid", c.m_grid);
  r.read_list("snr_grid_db", c.snr_grid_db);
  std::string bits;
  if (r.read("bits_grid", bits)) {
    c.bits_grid.clear();
    std::size_t start = 0;
    while (true) {
      const auto comma = bits.find(',', start);
      c.bits_grid.push_back(parse_bits(bits.substr(start, comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  r.read("snr_low_db", c.snr_low_db);
  r.read("snr_high_db", c.snr_high_db);
  r.read("sweep_m_tasks", c.sweep_m_tasks);
  r.read("quant_snr_db", c.quant_snr_db);
  r.read("mc_samples", c.mc_samples);
  r.read("ess_flag_threshold", c.ess_flag_threshold);
  std::string dir;
  if (r.read("checkpoint_dir", dir)) c.checkpoint_dir = dir;
  r.require_all_consumed();
  c.eval.n_context = c.train.n_context;
  c.eval.bits = c.train.bits;
  c.eval.tasks = c.train.tasks;
  return c;
}

ConfigMap to_config_map(const ExperimentConfig& c) {
  ConfigMap m = to_config_map(c.train);
  auto put = [&](const char* k, std::string v) { m.emplace_back(k, std::move(v)); };
  put("n_test_tasks", std::to_string(c.eval.n_test_tasks));
  put("n_test_symbols", std::to_string(c.eval.n_test_symbols));
  put("m_grid", format_list(c.m_grid));
  put("snr_grid_db", format_list(c.snr_grid_db));
  std::string bits;
  for (std::size_t i = 0; i < c.bits_grid.size(); ++i) {
    bits += (i ? "," : "") + format_bits(c.bits_grid[i]);
  }
  put("bits_grid", bits);
  put("snr_low_db", format_double(c.snr_low_db));
  put("snr_high_db", format_double(c.snr_high_db));
  put("sweep_m_tasks", std::to_string(c.sweep_m_tasks));
  put("quant_snr_db", format_double(c.quant_snr_db));
  put("mc_samples", std::to_string(c.mc_samples));
  put("ess_flag_threshold", format_double(c.ess_flag_threshold));
  if (c.checkpoint_dir) put("checkpoint_dir", c.checkpoint_dir->string());
  return m;
}

// ---- sweeps --------------------------------------------------------------

ModelParams obtain_model(const TrainConfig& config, const std::string& tag,
                         const ExperimentConfig& experiment, const LogFn& log) {
  std::optional<std::filesystem::path> path;
  if (experiment.checkpoint_dir) {
    std::filesystem::create_directories(*experiment.checkpoint_dir);
    path = *experiment.checkpoint_dir / (tag + ".ckpt");
    if (std::filesystem::exists(*path)) {
      Checkpoint ck = load_checkpoint(*path);
      if (ck.config == config) {
        log_line(log, tag + ": loaded " + path->string());
        return std::move(ck.params);
      }
      log_line(log, tag + ": cached checkpoint has a different config, retraining");
    }
  }
  log_line(log, tag + ": training M=" + std::to_string(config.m_tasks) + " for " +
                    std::to_string(config.n_steps) + " steps");
  double window = 0.0;
  std::size_t count = 0;
  TrainHooks hooks;
  hooks.on_step = [&](std::size_t step, double loss) {
    window += loss;
    ++count;
    if ((step + 1) % 1000 == 0 || step + 1 == config.n_steps) {
      log_line(log, tag + ": step " + std::to_string(step + 1) + " loss " +
                        fmt17(window / static_cast<double>(count)));
      window = 0.0;
      count = 0;
    }
  };
  TrainingResult result = pretrain(config, hooks);
  if (path) {
    save_checkpoint(result.params, config, *path);
    log_line(log, tag + ": saved " + path->string());
  }
  return std::move(result.params);
}

std::vector<EvalResult> run_threshold_sweep(const ExperimentConfig& config, const LogFn& log) {
  config.validate();
  const EvalProtocol protocol = base_protocol(config);
  const EvalDraws draws = sample_eval_draws(protocol);

  // The true-prior reference does not depend on M; evaluate it once.
  std::unique_ptr<Equalizer> reference =
      protocol.bits ? make_bayes_continuous_mc(config.mc_samples) : make_bayes_gaussian_exact();
  const Equalizer* ref_list[] = {reference.get()};
  const auto ref_rows = evaluate_rows(ref_list, draws, protocol, config, "threshold", 0.0, log);

  std::vector<EvalResult> rows;
  for (double m_value : config.m_grid) {
    TrainConfig tc = config.train;
    tc.m_tasks = static_cast<std::size_t>(m_value);
    const PretrainTaskSet set = PretrainTaskSet::sample(tc.tasks, tc.m_tasks, tc.seed);
    const auto channels = set.channels();
    check_isolation(draws, channels);

    ModelParams params = obtain_model(tc, "threshold_M" + std::to_string(tc.m_tasks), config, log);
    const auto icl = make_model_equalizer("icl", std::move(params), tc.model);
    const auto discrete = make_bayes_discrete(channels);
    const Equalizer* eqs[] = {icl.get(), discrete.get()};
    auto block = evaluate_rows(eqs, draws, protocol, config, "threshold", m_value, log);
    for (auto r : ref_rows) {
      r.value = m_value;
      block.push_back(std::move(r));
    }
    rows.insert(rows.end(), block.begin(), block.end());
  }
  return rows;
}

std::vector<EvalResult> run_snr_sweep(const ExperimentConfig& config, const LogFn& log) {
  config.validate();
  struct Variant {
    std::string id;
    double db_min;
    double db_max;
  };
  // σ² in dB is the negated SNR for unit-power inputs and channels.
  const std::vector<Variant> variants = {
      {"icl_snr" + format_double(config.snr_low_db), -config.snr_low_db, -config.snr_low_db},
      {"icl_snr" + format_double(config.snr_high_db), -config.snr_high_db, -config.snr_high_db},
      {"icl_snr" + format_double(config.snr_low_db) + "to" + format_double(config.snr_high_db),
       -config.snr_high_db, -config.snr_low_db},
  };

  std::vector<std::unique_ptr<Equalizer>> owned;
  for (const auto& v : variants) {
    TrainConfig tc = config.train;
    tc.m_tasks = config.sweep_m_tasks;
    tc.tasks.sigma2_db_min = v.db_min;
    tc.tasks.sigma2_db_max = v.db_max;
    std::string tag = "snr_" + format_value_tag(v.db_min) + "_" + format_value_tag(v.db_max);
    owned.push_back(make_model_equalizer(v.id, obtain_model(tc, tag, config, log), tc.model));
  }
  owned.push_back(make_mmse_known_task());
  owned.push_back(make_lmmse_known_task());
  std::vector<const Equalizer*> eqs;
  for (const auto& e : owned) eqs.push_back(e.get());

  std::vector<EvalResult> rows;
  for (double snr : config.snr_grid_db) {
    EvalProtocol p = base_protocol(config);
    p.tasks.sigma2_db_min = -snr;
    p.tasks.sigma2_db_max = -snr;
    const EvalDraws draws = sample_eval_draws(p);
    auto block = evaluate_rows(eqs, draws, p, config, "snr", snr, log);
    rows.insert(rows.end(), block.begin(), block.end());
  }
  return rows;
}

std::vector<EvalResult> run_quantization_sweep(const ExperimentConfig& config, const LogFn& log) {
  config.validate();
  std::vector<EvalResult> rows;
  for (const auto& bits : config.bits_grid) {
    TrainConfig tc = config.train;
    tc.m_tasks = config.sweep_m_tasks;
    tc.bits = bits;
    tc.tasks.sigma2_db_min = -config.quant_snr_db;
    tc.tasks.sigma2_db_max = -config.quant_snr_db;
    const std::string tag = "bits_" + format_bits(bits);
    const auto icl = make_model_equalizer("icl", obtain_model(tc, tag, config, log), tc.model);
    const auto mmse = make_mmse_known_task();
    const auto lmmse = make_lmmse_known_task();
    const Equalizer* eqs[] = {icl.get(), mmse.get(), lmmse.get()};

    // Same seed at every resolution, so draws differ only through quantization.
    EvalProtocol p = base_protocol(config);
    p.bits = bits;
    p.tasks = tc.tasks;
    const EvalDraws draws = sample_eval_draws(p);
    const double value = bits ? static_cast<double>(*bits) : INFINITY;
    auto block = evaluate_rows(eqs, draws, p, config, "bits", value, log);
    rows.insert(rows.end(), block.begin(), block.end());
  }
  return rows;
}

}  // namespace icleq
