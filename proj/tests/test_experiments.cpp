#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "icleq/experiments.hpp"
#include "support.hpp"

using namespace icleq;
namespace fs = std::filesystem;

namespace {

EvalProtocol small_protocol(std::uint64_t seed = 5) {
  EvalProtocol p;
  p.n_test_tasks = 40;
  p.n_test_symbols = 16;
  p.n_context = 8;
  p.seed = seed;
  return p;
}

// Discrete-prior equalizer whose prior is each task's own channel.
class OwnChannelBayes final : public Equalizer {
 public:
  std::string id() const override { return "own_channel_bayes"; }
  TaskEstimates estimate_task(const EvalTask& task, const Quantizer& q, const Constellation& cons,
                              RngStream&) const override {
    TaskEstimates out;
    const auto prior = ChannelPrior::discrete({task.task.h});
    for (const auto& y : task.y) {
      out.x_hat.push_back(bayes_mmse_discrete(prior, task.task.sigma2, q, cons, task.context, y));
    }
    return out;
  }
};

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.train.model.n_layers = 1;
  c.train.model.n_heads = 2;
  c.train.model.d_e = 8;
  c.train.model.d_f = 16;
  c.train.model.n_max = 4;
  c.train.n_context = 4;
  c.train.batch_size = 4;
  c.train.n_steps = 5;
  c.train.warmup_steps = 2;
  c.eval.n_test_tasks = 6;
  c.eval.n_test_symbols = 4;
  c.eval.n_context = 4;
  c.m_grid = {1, 4};
  c.snr_grid_db = {0, 30};
  c.bits_grid = {1, std::nullopt};
  c.sweep_m_tasks = 8;
  c.mc_samples = 32;
  c.set_seed(11);
  return c;
}

std::string csv_text(const std::vector<EvalResult>& rows) {
  std::ostringstream ss;
  write_csv(ss, rows);
  return ss.str();
}

const EvalResult& find_row(const std::vector<EvalResult>& rows, const std::string& est, double value) {
  for (const auto& r : rows) {
    if (r.estimator == est && r.value == value) return r;
  }
  throw std::runtime_error("row not found: " + est);
}

}  // namespace

TEST_CASE("uninformative noise drives the known-task MMSE to unit error") {
  EvalProtocol p = small_protocol();
  p.tasks.sigma2_db_min = p.tasks.sigma2_db_max = 60.0;
  const auto r = evaluate(*make_mmse_known_task(), p);
  CHECK(r.mse == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(r.ci_low <= r.mse);
  CHECK(r.mse <= r.ci_high);
  CHECK(r.n_samples == 40 * 16);
  CHECK(std::isnan(r.ess));
}

TEST_CASE("own-channel discrete prior equals the known-task MMSE") {
  const EvalProtocol p = small_protocol();
  const auto draws = sample_eval_draws(p);
  const OwnChannelBayes own;
  const auto mmse = make_mmse_known_task();
  const Equalizer* eqs[] = {&own, mmse.get()};
  const auto errs = evaluate_paired(eqs, draws, p);
  double worst = 0.0;
  for (std::size_t i = 0; i < errs[0].sq_errors.size(); ++i) {
    worst = std::max(worst, std::abs(errs[0].sq_errors[i] - errs[1].sq_errors[i]));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("known-task MMSE beats LMMSE on paired draws") {
  EvalProtocol p = small_protocol();
  p.n_test_tasks = 200;
  p.n_test_symbols = 16;
  const auto draws = sample_eval_draws(p);
  REQUIRE(draws.n_samples() >= 2000);
  const auto mmse = make_mmse_known_task();
  const auto lmmse = make_lmmse_known_task();
  const Equalizer* eqs[] = {mmse.get(), lmmse.get()};
  const auto errs = evaluate_paired(eqs, draws, p);
  CHECK(paired_compare(errs[0].sq_errors, errs[1].sq_errors).a_better());
}

TEST_CASE("incompatible equalizers are rejected") {
  const EvalProtocol p = small_protocol();
  CHECK_THROWS_AS(evaluate(*make_bayes_gaussian_exact(), p), IncompatibleEqualizerError);
  ModelConfig mc;
  mc.n_max = 4;
  CHECK_THROWS_AS(evaluate(*make_model_equalizer("icl", ModelParams::zeros(mc), mc), p),
                  IncompatibleEqualizerError);
}

TEST_CASE("evaluation draws are paired, reproducible and thread-independent") {
  const EvalProtocol p = small_protocol();
  const auto a = sample_eval_draws(p);
  const auto b = sample_eval_draws(p);
  CHECK(a.hash == b.hash);
  CHECK(a.hash != sample_eval_draws(small_protocol(6)).hash);
  CHECK(a.hash == hash_draws(a.tasks));

  const auto mc = make_bayes_continuous_mc(64);
  const auto mmse = make_mmse_known_task();
  const Equalizer* eqs[] = {mc.get(), mmse.get()};
  const auto serial = evaluate_paired(eqs, a, p, 1);
  const auto threaded = evaluate_paired(eqs, a, p, 4);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(serial[e].sq_errors == threaded[e].sq_errors);
    CHECK(serial[e].ess.size() == threaded[e].ess.size());
  }
  CHECK(serial[0].ess.size() == serial[0].sq_errors.size());
  CHECK(serial[1].ess.empty());
}

TEST_CASE("test tasks never coincide with pre-training channels") {
  const EvalProtocol p = small_protocol();
  const auto draws = sample_eval_draws(p);
  const CMatrix clash[] = {draws.tasks[3].task.h};
  CHECK_THROWS_AS(sample_eval_draws(p, clash), std::logic_error);
  const auto set = PretrainTaskSet::sample(p.tasks, 1024, p.seed);
  const auto channels = set.channels();
  CHECK_NOTHROW(sample_eval_draws(p, channels));
}

TEST_CASE("confidence intervals") {
  RngStream rng(100, 0);
  std::vector<double> small, large;
  for (int i = 0; i < 4000; ++i) small.push_back(rng.uniform());
  large = small;
  for (int i = 0; i < 4000; ++i) large.push_back(rng.uniform());
  const auto a = mean_ci95(small);
  const auto b = mean_ci95(large);
  CHECK(a.ci_low < a.mean);
  CHECK(a.mean < a.ci_high);
  const double ratio = (a.ci_high - a.ci_low) / (b.ci_high - b.ci_low);
  CHECK(ratio == doctest::Approx(std::sqrt(2.0)).epsilon(0.05));
  // half-width 1.96·sd/√n for the uniform law (sd² = 1/12)
  CHECK((b.ci_high - b.ci_low) / 2 == doctest::Approx(1.959964 * std::sqrt(1.0 / 12 / 8000)).epsilon(0.05));

  const double x[] = {1, 2, 3, 4};
  const double y[] = {1.5, 2.5, 3.5, 4.5};
  const auto pc = paired_compare(x, y);
  CHECK(pc.mean_diff == -0.5);
  CHECK(pc.a_better());
  CHECK_FALSE(pc.b_better());
}

TEST_CASE("CI width shrinks with the evaluation size") {
  EvalProtocol p = small_protocol();
  p.n_test_tasks = 100;
  const auto r1 = evaluate(*make_lmmse_known_task(), p);
  p.n_test_tasks = 400;
  const auto r2 = evaluate(*make_lmmse_known_task(), p);
  CHECK((r1.ci_high - r1.ci_low) / (r2.ci_high - r2.ci_low) == doctest::Approx(2.0).epsilon(0.25));
}

TEST_CASE("summaries flag low effective sample sizes") {
  EstimatorErrors e{"mc", {0.1, 0.2, 0.3}, {3.0, 10.0, 200.0}};
  const auto r = summarize(e, "threshold", 4.0, 9, 50.0);
  CHECK(r.estimator == std::string("mc") + kLowEssSuffix);
  CHECK(r.ess == 10.0);
  CHECK(r.mse == doctest::Approx(0.2));
  e.ess = {100, 200, 300};
  CHECK(summarize(e, "threshold", 4.0, 9, 50.0).estimator == "mc");
}

TEST_CASE("CSV round trip and validation") {
  std::vector<EvalResult> rows;
  RngStream rng(101, 0);
  for (int i = 0; i < 20; ++i) {
    EvalResult r;
    r.sweep = i < 10 ? "threshold" : "bits";
    r.estimator = i % 2 ? "icl" : "bayes_continuous_mc[low_ess]";
    r.value = i == 19 ? INFINITY : std::ldexp(rng.normal(), i - 10);
    r.mse = rng.uniform();
    r.ci_low = r.mse - 1e-3 * rng.uniform();
    r.ci_high = r.mse + 1e-3 * rng.uniform();
    r.n_samples = 32000 + i;
    r.ess = i % 2 ? std::numeric_limits<double>::quiet_NaN() : 1.0 + rng.uniform();
    r.seed = 0xffffffffffffffffULL - i;
    rows.push_back(r);
  }
  const std::string text = csv_text(rows);
  CHECK(text.substr(0, text.find('\n')) == "sweep,estimator,value,mse,ci_low,ci_high,n_samples,ess,seed");
  std::istringstream in(text);
  const auto back = read_csv(in);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].sweep == rows[i].sweep);
    CHECK(back[i].estimator == rows[i].estimator);
    CHECK(back[i].value == rows[i].value);
    CHECK(back[i].mse == rows[i].mse);
    CHECK(back[i].ci_low == rows[i].ci_low);
    CHECK(back[i].ci_high == rows[i].ci_high);
    CHECK(back[i].n_samples == rows[i].n_samples);
    CHECK((std::isnan(rows[i].ess) ? std::isnan(back[i].ess) : back[i].ess == rows[i].ess));
    CHECK(back[i].seed == rows[i].seed);
  }

  for (const char* bad : {"", "sweep,estimator\n",
                          "sweep,estimator,value,mse,ci_low,ci_high,n_samples,ess,seed\na,b,1,2\n",
                          "sweep,estimator,value,mse,ci_low,ci_high,n_samples,ess,seed\na,b,x,1,1,1,1,,1\n",
                          "sweep,estimator,value,mse,ci_low,ci_high,n_samples,ess,seed\na,b,1,1,1,1,-1,,1\n"}) {
    std::istringstream s(bad);
    CHECK_THROWS_AS(read_csv(s), MalformedCsvError);
  }
  EvalResult comma;
  comma.estimator = "a,b";
  std::ostringstream sink;
  CHECK_THROWS(write_csv(sink, std::vector<EvalResult>{comma}));
}

TEST_CASE("plot data blocks") {
  CHECK(emit_plot_data(std::vector<EvalResult>{}).empty());
  std::vector<EvalResult> rows;
  for (const char* est : {"icl", "mmse_known_task", "lmmse_known_task"}) {
    for (double v : {0.0, 10.0, 20.0}) {
      EvalResult r;
      r.sweep = "snr";
      r.estimator = est;
      r.value = v;
      r.mse = 0.1 + v / 1000 + 1.0 / 3;
      r.ci_low = r.mse - 0.01;
      r.ci_high = r.mse + 0.01;
      rows.push_back(r);
    }
  }
  const std::string text = emit_plot_data(rows);
  std::size_t headers = 0, blank_pairs = 0;
  std::istringstream in(text);
  std::string line, prev = "x";
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.rfind("# sweep=", 0) == 0) ++headers;
    if (line.empty() && prev.empty()) ++blank_pairs;
    if (!line.empty() && line[0] != '#') {
      std::istringstream ls(line);
      double v, m, lo, hi;
      ls >> v >> m >> lo >> hi;
      values.push_back(m);
    }
    prev = line;
  }
  CHECK(headers == 3);
  CHECK(blank_pairs == 2);
  REQUIRE(values.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(values[i] == rows[i].mse);
}

TEST_CASE("experiment config keys") {
  const ExperimentConfig c = tiny_experiment();
  const auto back = experiment_config_from_map(to_config_map(c));
  CHECK(back.train == c.train);
  CHECK(back.m_grid == c.m_grid);
  CHECK(back.bits_grid == c.bits_grid);
  CHECK(back.mc_samples == c.mc_samples);
  CHECK(back.eval.n_test_tasks == c.eval.n_test_tasks);
  CHECK_THROWS_AS(experiment_config_from_map(parse_config("m_grid=1,2\nfoo=3\n")), ConfigError);
}

TEST_CASE("sweeps have the documented shape and reproduce") {
  ExperimentConfig c = tiny_experiment();
  const auto thr = run_threshold_sweep(c);
  CHECK(thr.size() == c.m_grid.size() * 3);
  std::set<std::string> ids;
  for (const auto& r : thr) ids.insert(r.estimator.substr(0, r.estimator.find('[')));
  CHECK(ids == std::set<std::string>{"icl", "bayes_discrete", "bayes_continuous_mc"});
  CHECK(csv_text(run_threshold_sweep(c)) == csv_text(thr));

  const auto snr = run_snr_sweep(c);
  CHECK(snr.size() == c.snr_grid_db.size() * 5);
  CHECK(find_row(snr, "icl_snr0to30", 30.0).n_samples == 24);

  const auto bits = run_quantization_sweep(c);
  CHECK(bits.size() == c.bits_grid.size() * 3);
  CHECK(std::isinf(bits.back().value));
}

TEST_CASE("finer observations never hurt the known-task MMSE") {
  ExperimentConfig c = tiny_experiment();
  c.eval.n_test_tasks = 300;
  c.eval.n_test_symbols = 8;
  const auto rows = run_quantization_sweep(c);
  const auto& coarse = find_row(rows, "mmse_known_task", 1.0);
  const auto& fine = find_row(rows, "mmse_known_task", INFINITY);
  CHECK(fine.mse <= coarse.mse);
  CHECK(find_row(rows, "lmmse_known_task", 1.0).mse > find_row(rows, "lmmse_known_task", INFINITY).mse);
}

TEST_CASE("trained models are cached by configuration") {
  ExperimentConfig c = tiny_experiment();
  const fs::path dir = fs::temp_directory_path() / "icleq_tests" / "cache";
  fs::remove_all(dir);
  c.checkpoint_dir = dir;
  std::vector<std::string> log;
  const LogFn sink = [&](const std::string& s) { log.push_back(s); };
  const ModelParams a = obtain_model(c.train, "probe", c, sink);
  CHECK(fs::exists(dir / "probe.ckpt"));
  log.clear();
  const ModelParams b = obtain_model(c.train, "probe", c, sink);
  REQUIRE(!log.empty());
  CHECK(log.front().find("loaded") != std::string::npos);
  CHECK((a.embed.array() == b.embed.array()).all());

  TrainConfig other = c.train;
  other.n_steps += 1;
  log.clear();
  obtain_model(other, "probe", c, sink);
  CHECK(log.front().find("retraining") != std::string::npos);
}
