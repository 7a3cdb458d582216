#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "icleq/checkpoint.hpp"
#include "icleq/config.hpp"
#include "icleq/experiments.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::optional<int> threads;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "flat key=value config file");
  cmd->add_option("--seed", o.seed, "master seed (overrides the config)");
  cmd->add_option("--out", o.out, "output file (default: stdout)");
  cmd->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--deterministic", o.deterministic,
                "single-threaded training for bit-identical results");
}

icleq::ExperimentConfig load_experiment(const CommonOptions& o) {
  icleq::ExperimentConfig c;
  if (!o.config.empty()) c = icleq::experiment_config_from_map(icleq::read_config_file(o.config));
  if (o.seed) c.set_seed(*o.seed);
  if (o.threads) {
    c.threads = *o.threads;
    c.train.threads = *o.threads;
  }
  if (o.deterministic) c.train.threads = 1;
  return c;
}

void log_stderr(const std::string& line) { std::cerr << line << std::endl; }

// Writes through a temporary file so a failed run never leaves a partial output.
void write_output(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f << text;
    if (!f) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

// Fails before hours of training rather than at the final write.
void require_parent_dir(const std::string& path) {
  if (path.empty()) return;
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty() && !std::filesystem::is_directory(parent)) {
    throw std::runtime_error("directory does not exist: " + parent.string());
  }
}

std::string to_csv(const std::vector<icleq::EvalResult>& rows) {
  std::ostringstream ss;
  icleq::write_csv(ss, rows);
  return ss.str();
}

int run_train(const CommonOptions& o) {
  if (o.checkpoint.empty()) throw CLI::ValidationError("train", "--checkpoint is required");
  const auto c = load_experiment(o);
  require_parent_dir(o.checkpoint);
  require_parent_dir(o.out);
  icleq::TrainHooks hooks;
  std::ostringstream curve;
  curve << "step,loss\n";
  double window = 0.0;
  std::size_t count = 0;
  hooks.on_step = [&](std::size_t step, double loss) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", loss);
    curve << step << ',' << buf << '\n';
    window += loss;
    ++count;
    if ((step + 1) % 1000 == 0 || step + 1 == c.train.n_steps) {
      std::cerr << "step " << step + 1 << " loss " << window / static_cast<double>(count) << "\n";
      window = 0.0;
      count = 0;
    }
  };
  const auto result = icleq::pretrain(c.train, hooks);
  icleq::save_checkpoint(result.params, c.train, o.checkpoint);
  std::cerr << "saved " << o.checkpoint << "\n";
  if (!o.out.empty()) write_output(o.out, curve.str());
  return 0;
}

int run_eval(const CommonOptions& o) {
  if (o.checkpoint.empty()) throw CLI::ValidationError("eval", "--checkpoint is required");
  auto c = load_experiment(o);
  require_parent_dir(o.out);
  const auto ck = icleq::load_checkpoint(o.checkpoint);
  icleq::EvalProtocol p = c.eval;
  p.n_context = c.train.n_context;
  p.bits = c.train.bits;
  p.tasks = c.train.tasks;
  const auto pretrain_set =
      icleq::PretrainTaskSet::sample(ck.config.tasks, ck.config.m_tasks, ck.config.seed);
  const auto channels = pretrain_set.channels();
  const auto draws = icleq::sample_eval_draws(p, channels);
  log_stderr("evaluation draws " + std::to_string(draws.hash));

  const auto icl = icleq::make_model_equalizer("icl", ck.params, ck.config.model);
  const auto mmse = icleq::make_mmse_known_task();
  const auto lmmse = icleq::make_lmmse_known_task();
  const auto discrete = icleq::make_bayes_discrete(channels);
  const auto reference = p.bits ? icleq::make_bayes_continuous_mc(c.mc_samples)
                                : icleq::make_bayes_gaussian_exact();
  const icleq::Equalizer* eqs[] = {icl.get(), mmse.get(), lmmse.get(), discrete.get(),
                                   reference.get()};
  const auto errors = icleq::evaluate_paired(eqs, draws, p, c.threads);
  std::vector<icleq::EvalResult> rows;
  for (const auto& e : errors) {
    rows.push_back(icleq::summarize(e, "eval", static_cast<double>(p.n_context), p.seed,
                                    c.ess_flag_threshold));
  }
  write_output(o.out, to_csv(rows));
  return 0;
}

int run_sweep(const CommonOptions& o, const std::string& which) {
  auto c = load_experiment(o);
  require_parent_dir(o.out);
  if (!o.checkpoint.empty()) c.checkpoint_dir = o.checkpoint;
  std::vector<icleq::EvalResult> rows;
  if (which == "threshold") {
    rows = icleq::run_threshold_sweep(c, log_stderr);
  } else if (which == "snr") {
    rows = icleq::run_snr_sweep(c, log_stderr);
  } else {
    rows = icleq::run_quantization_sweep(c, log_stderr);
  }
  write_output(o.out, to_csv(rows));
  return 0;
}

int run_plot_data(const std::string& input, const std::string& out) {
  std::ifstream in(input, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + input);
  const auto rows = icleq::read_csv(in);
  write_output(out, icleq::emit_plot_data(rows));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context MIMO equalization experiments"};
  app.require_subcommand(1);

  CommonOptions train_o, eval_o, thr_o, snr_o, bits_o;
  auto* train = app.add_subcommand("train", "pre-train a model and save a checkpoint");
  add_common(train, train_o);
  train->add_option("--checkpoint", train_o.checkpoint, "checkpoint file to write");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against the baselines");
  add_common(eval, eval_o);
  eval->add_option("--checkpoint", eval_o.checkpoint, "checkpoint file to read");

  auto* thr = app.add_subcommand("sweep-threshold", "MSE versus number of pre-training tasks");
  auto* snr = app.add_subcommand("sweep-snr", "MSE versus test SNR for fixed and range training");
  auto* bits = app.add_subcommand("sweep-bits", "MSE versus quantizer resolution");
  for (auto [cmd, o] : {std::pair{thr, &thr_o}, std::pair{snr, &snr_o}, std::pair{bits, &bits_o}}) {
    add_common(cmd, *o);
    cmd->add_option("--checkpoint", o->checkpoint, "directory caching trained models");
  }

  std::string plot_in, plot_out;
  auto* plot = app.add_subcommand("plot-data", "convert a results CSV to gnuplot blocks");
  plot->add_option("csv", plot_in, "results CSV")->required();
  plot->add_option("--out", plot_out, "output file (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return run_train(train_o);
    if (*eval) return run_eval(eval_o);
    if (*thr) return run_sweep(thr_o, "threshold");
    if (*snr) return run_sweep(snr_o, "snr");
    if (*bits) return run_sweep(bits_o, "bits");
    if (*plot) return run_plot_data(plot_in, plot_out);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
