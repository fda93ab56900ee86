#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flss/commands.hpp"

namespace {

struct CommonEval {
  std::string attacks = "clean,pgd";
  std::string threshold = "calibrate";
  std::string mode;
  double sd = 0;
  int n = 0;
  int restarts = 1;
  int steps = 100;
  double step_size = 0;
  double delta = 0.1;
  double max_frac = 0.10;
  std::uint64_t seed = 0;
  bool box = false;
  bool no_ns = false;
};

void add_data_options(CLI::App* cmd, flss::DataSelection& data) {
  cmd->add_option("--dataset", data.dataset, "two_moons:n=..,noise=..,seed=.. | blobs:.. | csv:path | idx:img,lbl")
      ->required();
  cmd->add_option("--split", data.split, "train, val, test or all")->capture_default_str();
  cmd->add_option("--limit", data.limit, "keep only the first n samples (0 = all)");
}

void add_eval_options(CLI::App* cmd, CommonEval& e) {
  cmd->add_option("--attacks", e.attacks,
                  "comma list of clean,fgsm,pgd,pgd_cw,eot:k,a1..a6,ra1..ra4,transfer:ckpt,noise:kind:mag")
      ->capture_default_str();
  cmd->add_option("--threshold", e.threshold, "calibrate | checkpoint | an integer f")->capture_default_str();
  cmd->add_option("--mode", e.mode, "flss_vote, flss_ns, confidence_threshold, input_noise_vote, gaussian_rs_vote");
  cmd->add_option("--sd", e.sd, "latent noise scale at test time (default: checkpoint)");
  cmd->add_option("--N", e.n, "number of latent draws (default: checkpoint)");
  cmd->add_option("--restarts", e.restarts)->capture_default_str();
  cmd->add_option("--steps", e.steps)->capture_default_str();
  cmd->add_option("--step-size", e.step_size, "0 = 2.5 * delta / steps")->capture_default_str();
  cmd->add_option("--delta", e.delta, "L-inf budget")->capture_default_str();
  cmd->add_option("--max-frac", e.max_frac, "allowed correct-and-rejected clean fraction")->capture_default_str();
  cmd->add_option("--seed", e.seed)->capture_default_str();
  cmd->add_flag("--box", e.box, "clamp inputs to [0, 1]");
  cmd->add_flag("--no-ns", e.no_ns, "skip the NS-path metrics");
}

flss::EvalOptions to_options(const CommonEval& e) {
  flss::EvalOptions o;
  o.attacks.clear();
  for (const auto& a : flss::parse_attack_list(e.attacks)) o.attacks.push_back(a.text);
  if (e.threshold == "calibrate") {
    o.threshold = flss::ThresholdPolicy::calibrate;
  } else if (e.threshold == "checkpoint") {
    o.threshold = flss::ThresholdPolicy::checkpoint;
  } else {
    o.threshold = flss::ThresholdPolicy::fixed;
    try {
      std::size_t used = 0;
      o.fixed_f = std::stoi(e.threshold, &used);
      if (used != e.threshold.size()) throw std::invalid_argument("f");
    } catch (const std::exception&) {
      throw flss::ConfigError("--threshold must be calibrate, checkpoint or an integer");
    }
  }
  if (!e.mode.empty()) o.mode = flss::parse_smoothing_mode(e.mode);
  if (e.sd > 0) o.sd_scale = e.sd;
  if (e.n > 0) o.n = e.n;
  o.restarts = e.restarts;
  o.steps = e.steps;
  o.step_size = e.step_size;
  o.delta = e.delta;
  o.max_frac = e.max_frac;
  o.seed = e.seed;
  if (e.box) o.box = flss::Box{};
  o.ns_metrics = !e.no_ns;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-level stochastic smoothing: training, evaluation and sweeps"};
  app.require_subcommand(1);

  flss::TrainCommand train;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "train a model from a key = value config");
  train_cmd->add_option("config", train.config_path, "config file")->required();
  train_cmd->add_option("--out", train.out_path, "checkpoint path")->required();
  train_cmd->add_option("--log", train.log_path, "training log CSV (default: <out>.log.csv)");
  auto* seed_opt = train_cmd->add_option("--seed", train_seed, "overrides the config and FLSS_SEED");

  flss::EvaluateCommand evaluate;
  CommonEval eval_opts;
  auto* eval_cmd = app.add_subcommand("evaluate", "attack a checkpoint and score the ensemble");
  eval_cmd->add_option("checkpoint", evaluate.checkpoint)->required();
  add_data_options(eval_cmd, evaluate.data);
  add_eval_options(eval_cmd, eval_opts);
  eval_cmd->add_option("--out", evaluate.out_dir, "output directory")->capture_default_str();

  flss::SweepCommand sweep;
  CommonEval sweep_opts;
  auto* sweep_cmd = app.add_subcommand("sweep", "plot-ready CSV over threshold, N or delta");
  sweep_cmd->add_option("checkpoint", sweep.checkpoint)->required();
  add_data_options(sweep_cmd, sweep.data);
  add_eval_options(sweep_cmd, sweep_opts);
  sweep_cmd->add_option("--vary", sweep.vary, "threshold | N | delta")->required();
  sweep_cmd->add_option("--ns", sweep.ns, "N values for the N sweep")->delimiter(',');
  sweep_cmd->add_option("--repeats", sweep.repeats, "bank seeds per N")->capture_default_str();
  sweep_cmd->add_option("--deltas", sweep.deltas, "delta grid")->delimiter(',');
  sweep_cmd->add_option("--out", sweep.out_path)->capture_default_str();

  flss::CombineCommand combine;
  CommonEval combine_opts;
  auto* combine_cmd = app.add_subcommand("combine", "cascade an external detector with the FLSS model");
  combine_cmd->add_option("detector_log", combine.detector_log, "prediction log CSV of the detector")->required();
  combine_cmd->add_option("checkpoint", combine.checkpoint)->required();
  add_data_options(combine_cmd, combine.data);
  add_eval_options(combine_cmd, combine_opts);
  combine_cmd->add_option("--out", combine.out_dir, "output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return flss::kExitConfig;
  }

  try {
    if (train_cmd->parsed()) {
      if (seed_opt->count() > 0) train.seed = train_seed;
      return flss::cmd_train(train, std::cout, std::cerr);
    }
    if (eval_cmd->parsed()) {
      evaluate.options = to_options(eval_opts);
      return flss::cmd_evaluate(evaluate, std::cout, std::cerr);
    }
    if (sweep_cmd->parsed()) {
      sweep.options = to_options(sweep_opts);
      return flss::cmd_sweep(sweep, std::cout, std::cerr);
    }
    if (combine_cmd->parsed()) {
      combine.options = to_options(combine_opts);
      return flss::cmd_combine(combine, std::cout, std::cerr);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return flss::kExitConfig;
  } catch (const flss::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return flss::kExitConfig;
  }
  return flss::kExitFailure;
}
