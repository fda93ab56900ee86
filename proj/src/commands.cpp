#include "flss/commands.hpp"

#include <filesystem>
#include <fstream>
#include <ostream>

#include "flss/errors.hpp"

namespace flss {

namespace {

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    fn();
    return kExitOk;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  return out;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v ? std::to_string(*v) : std::string("null");
}

void write_outputs(const EvalOutput& result, const EvalOptions& options, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  {
    auto f = open_out((base / "predictions.csv").string());
    write_prediction_log(f, result.records);
  }
  if (!result.ns_records.empty()) {
    auto f = open_out((base / "predictions_ns.csv").string());
    write_prediction_log(f, result.ns_records);
  }
  auto f = open_out((base / "report.json").string());
  f << eval_output_to_json(result, options).dump(2) << '\n';
}

}  // namespace

Dataset select_data(const DataSelection& sel) {
  Dataset d = make_dataset(parse_dataset_spec(sel.dataset));
  if (sel.split != "all") d = d.subset(parse_split(sel.split));
  if (sel.limit > 0) d = d.head(sel.limit);
  if (d.size() == 0) throw ValueError("dataset selection is empty");
  return d;
}

ModelCheckpoint train_checkpoint(TrainJob job, TrainLog* log) {
  const Dataset data = make_dataset(job.dataset);
  job.train.arch.input_dim = data.input_dim;
  job.train.arch.num_classes = data.num_classes;
  TrainResult result = train(data, job.train);

  ModelCheckpoint ckpt;
  ckpt.model_kind = job.train.method;
  ckpt.params = std::move(result.params);
  ckpt.bank = NoiseBank::sample(job.bank_n, job.train.arch.latent_dim, job.bank_seed);
  ckpt.smoothing.n = job.bank_n;
  ckpt.smoothing.sd_scale = job.sd_scale;
  ckpt.smoothing.mode =
      job.train.method == TrainMethod::flss ? SmoothingMode::flss_vote : SmoothingMode::confidence_threshold;
  ckpt.train_config = train_config_to_json(job);
  const EpochRecord& best = result.log.epochs.at(static_cast<std::size_t>(result.log.best_epoch));
  ckpt.metrics_at_save = {{"best_epoch", best.epoch},
                          {"val_clean_ns", best.val_clean_ns},
                          {"val_adv_ns", best.val_adv_ns},
                          {"val_step1_loss", best.val_step1_loss}};
  if (log) *log = std::move(result.log);
  return ckpt;
}

int cmd_train(const TrainCommand& cmd, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (cmd.out_path.empty()) throw ConfigError("--out is required");
    TrainJob job = load_train_config(cmd.config_path);
    if (cmd.seed) job.train.seed = *cmd.seed;
    TrainLog log;
    const ModelCheckpoint ckpt = train_checkpoint(job, &log);
    save_checkpoint(cmd.out_path, ckpt);
    auto f = open_out(cmd.log_path.empty() ? cmd.out_path + ".log.csv" : cmd.log_path);
    log.write_csv(f);
    out << "trained " << to_string(ckpt.model_kind) << " epochs=" << log.epochs.size()
        << " best_epoch=" << log.best_epoch << " val_clean_ns=" << ckpt.metrics_at_save["val_clean_ns"].get<double>()
        << " val_adv_ns=" << ckpt.metrics_at_save["val_adv_ns"].get<double>() << " -> " << cmd.out_path << '\n';
  });
}

int cmd_evaluate(const EvaluateCommand& cmd, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ModelCheckpoint ckpt = load_checkpoint(cmd.checkpoint);
    const Dataset data = select_data(cmd.data);
    const EvalOutput result = evaluate_model(ckpt, data, cmd.options);
    write_outputs(result, cmd.options, cmd.out_dir);
    out << "evaluated " << data.size() << " samples x " << result.report.attacks.size()
        << " attacks f=" << result.smoothing.threshold_f << " FC=" << result.report.fc
        << " FW=" << result.report.fw << " MPR=" << result.report.mpr
        << " Acc_adv_10=" << fmt_opt(result.report.acc_adv_10) << '\n';
  });
}

int cmd_sweep(const SweepCommand& cmd, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ModelCheckpoint ckpt = load_checkpoint(cmd.checkpoint);
    const Dataset data = select_data(cmd.data);
    SweepTable table;
    if (cmd.vary == "threshold") table = sweep_threshold(ckpt, data, cmd.options);
    else if (cmd.vary == "N") table = sweep_n(ckpt, data, cmd.options, cmd.ns, cmd.repeats);
    else if (cmd.vary == "delta") table = sweep_delta(ckpt, data, cmd.options, cmd.deltas);
    else throw ConfigError("unknown sweep axis '" + cmd.vary + "' (threshold, N or delta)");
    auto f = open_out(cmd.out_path);
    table.write_csv(f);
    out << "sweep " << cmd.vary << " rows=" << table.rows.size() << " -> " << cmd.out_path << '\n';
  });
}

int cmd_combine(const CombineCommand& cmd, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto log = ingest_external_log(cmd.detector_log);
    const ModelCheckpoint ckpt = load_checkpoint(cmd.checkpoint);
    const Dataset data = select_data(cmd.data);
    const EvalOutput result = combine_with_detector(log, ckpt, data, cmd.options);
    write_outputs(result, cmd.options, cmd.out_dir);
    out << "combined " << result.records.size() << " records f=" << result.smoothing.threshold_f
        << " FC=" << result.report.fc << " FW=" << result.report.fw << " MPR=" << result.report.mpr
        << " Acc_adv_10=" << fmt_opt(result.report.acc_adv_10) << '\n';
  });
}

}  // namespace flss
