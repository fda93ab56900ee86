#ifndef FLSS_EVALMETRICS_HPP
#define FLSS_EVALMETRICS_HPP

// Worst-case ensemble evaluation over per-attack prediction logs.
//
// A sample counts as fully correct only if it is accepted and correctly
// classified under every attack; a single accepted mistake or a single
// rejection anywhere in the ensemble removes it from that set.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace flss {

inline constexpr std::string_view kCleanAttack = "clean";
inline constexpr std::string_view kPredictionLogHeader = "sample_id,attack_id,true_label,predicted,accepted,vote_count";

struct PredictionRecord {
  std::int64_t sample_id = 0;
  std::string attack_id;
  int true_label = 0;
  int predicted = 0;
  bool accepted = true;
  int vote_count = 0;

  bool correct() const { return predicted == true_label; }
  bool operator==(const PredictionRecord&) const = default;
};

using SampleSet = std::set<std::int64_t>;

struct EnsembleSets {
  SampleSet fully_correct;   // S_FC
  SampleSet falsely_wrong;   // S_FW
  SampleSet rejected;        // R
};

/// Throws FormatError if any (sample, attack) pair is missing or repeated.
/// The universe is the set of sample ids present in the records.
EnsembleSets build_sets(std::span<const PredictionRecord> records);

struct AttackRow {
  std::string attack_id;
  double accepted_correct = 0;  // % of |X|
  double accepted_wrong = 0;
  double rejected = 0;
  double accuracy_all = 0;      // threshold disabled
  std::optional<double> accuracy_accepted;
};

struct EvalReport {
  EnsembleSets sets;
  std::size_t universe_size = 0;
  std::vector<std::string> attacks;

  double fc = 0;
  double fw = 0;
  double mpr = 0;

  std::optional<double> acc_nat_ns;
  std::optional<double> acc_nat_0;
  std::optional<double> acc_nat_10;
  std::optional<double> acc_adv_ns;
  std::optional<double> acc_adv_0;
  std::optional<double> acc_adv_10;

  std::vector<AttackRow> per_attack;
};

/// |S_FC| / (|S_FC| + |S_FW|) * 100, or nullopt when both are empty.
std::optional<double> accepted_accuracy(std::size_t fully_correct, std::size_t falsely_wrong);

/// Metrics from the thresholded (smoothed) records and, optionally, the NS
/// records over the same samples and attacks. Natural-accuracy fields are
/// null when no "clean" records are present; NS fields are null without NS
/// records.
EvalReport compute_report(std::span<const PredictionRecord> records,
                          std::span<const PredictionRecord> ns_records = {});

nlohmann::ordered_json report_to_json(const EvalReport& report);

void write_prediction_log(std::ostream& out, std::span<const PredictionRecord> records);

/// Parses a prediction log; errors name the offending line.
std::vector<PredictionRecord> read_prediction_log(std::istream& in);

std::vector<PredictionRecord> ingest_external_log(const std::string& path);

}  // namespace flss

#endif  // FLSS_EVALMETRICS_HPP
