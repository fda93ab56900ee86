#ifndef FLSS_COMMANDS_HPP
#define FLSS_COMMANDS_HPP

// Subcommands of the flss tool. Each returns a process exit code:
// 0 success, 2 usage or configuration error, 3 numeric failure, 1 anything
// else. One summary line goes to `out`, diagnostics to `err`.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "flss/pipeline.hpp"

namespace flss {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

struct TrainCommand {
  std::string config_path;
  std::string out_path;
  /// Defaults to out_path with ".log.csv" appended.
  std::string log_path;
  std::optional<std::uint64_t> seed;
};

struct DataSelection {
  std::string dataset = "two_moons";
  /// train, val, test or all.
  std::string split = "test";
  std::size_t limit = 0;
};

struct EvaluateCommand {
  std::string checkpoint;
  DataSelection data;
  EvalOptions options;
  std::string out_dir = ".";
};

struct SweepCommand {
  std::string checkpoint;
  DataSelection data;
  EvalOptions options;
  std::string vary;  // threshold | N | delta
  std::vector<int> ns{10, 100, 1000};
  int repeats = 5;
  std::vector<double> deltas{0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0};
  std::string out_path = "sweep.csv";
};

struct CombineCommand {
  std::string detector_log;
  std::string checkpoint;
  DataSelection data;
  EvalOptions options;
  std::string out_dir = ".";
};

int cmd_train(const TrainCommand& cmd, std::ostream& out, std::ostream& err);
int cmd_evaluate(const EvaluateCommand& cmd, std::ostream& out, std::ostream& err);
int cmd_sweep(const SweepCommand& cmd, std::ostream& out, std::ostream& err);
int cmd_combine(const CombineCommand& cmd, std::ostream& out, std::ostream& err);

/// Loads the dataset and keeps the requested split.
Dataset select_data(const DataSelection& sel);

/// Trains per job and packages the result with a fresh noise bank.
ModelCheckpoint train_checkpoint(TrainJob job, TrainLog* log = nullptr);

}  // namespace flss

#endif  // FLSS_COMMANDS_HPP
