#ifndef FLSS_PIPELINE_HPP
#define FLSS_PIPELINE_HPP

// Evaluation pipeline behind the evaluate / sweep / combine commands: attack
// dispatch by id, threshold calibration, per-attack prediction logs and the
// ensemble report.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flss/attacks.hpp"
#include "flss/datakit.hpp"
#include "flss/evalmetrics.hpp"
#include "flss/io.hpp"
#include "flss/smoothing.hpp"

namespace flss {

enum class AttackKind { clean, fgsm, pgd, pgd_cw, eot, feature, reject, transfer, noise };

/// Parsed attack id: clean, fgsm, pgd, pgd_cw, eot:k, a1..a6, ra1..ra4,
/// transfer:path, noise:kind:magnitude.
struct AttackId {
  std::string text;
  AttackKind kind = AttackKind::clean;
  int eot_k = 1;
  FeatureVariant feature = FeatureVariant::a1;
  RejectVariant reject = RejectVariant::ra1;
  std::string transfer_path;
  CorruptionKind corruption = CorruptionKind::uniform;
  double magnitude = 0;
};

AttackId parse_attack_id(std::string_view text);
std::vector<AttackId> parse_attack_list(std::string_view comma_separated);

enum class ThresholdPolicy { calibrate, fixed, checkpoint };

struct EvalOptions {
  std::vector<std::string> attacks{"clean", "pgd"};
  ThresholdPolicy threshold = ThresholdPolicy::calibrate;
  int fixed_f = 0;
  double max_frac = 0.10;
  std::optional<SmoothingMode> mode;
  std::optional<double> sd_scale;
  /// Replaces the checkpoint bank with a fresh one of this size (same seed,
  /// so smaller banks are prefixes of larger ones).
  std::optional<int> n;
  std::optional<std::uint64_t> bank_seed;
  double delta = 0.1;
  int steps = 100;
  int restarts = 1;
  double step_size = 0;
  std::optional<Box> box;
  std::uint64_t seed = 0;
  /// Also attack the NS path and fill the NS metrics.
  bool ns_metrics = true;
};

/// Everything the attack generators need besides the sample itself.
class AttackContext {
 public:
  AttackContext(const ModelCheckpoint& target, const Dataset& pool, const EvalOptions& options,
                const SmoothingConfig& smoothing, const NoiseBank& bank);

  /// Adversarial (or clean / corrupted) version of sample i of the pool.
  /// ns_path = true attacks the deterministic path instead of a fixed
  /// per-sample latent draw.
  Vector generate(const AttackId& attack, std::size_t i, bool ns_path) const;

  AttackSpec spec_for(const AttackId& attack, std::int64_t sample_id, bool ns_path) const;

 private:
  const ModelParams& source_model(const AttackId& attack) const;
  std::vector<Vector> guides_for(std::size_t i) const;

  const ModelCheckpoint& target_;
  const Dataset& pool_;
  const EvalOptions& options_;
  SmoothingConfig smoothing_;
  const NoiseBank& bank_;
  mutable std::map<std::string, std::shared_ptr<ModelCheckpoint>> transfer_sources_;
};

struct EvalOutput {
  SmoothingConfig smoothing;
  std::vector<PredictionRecord> records;
  std::vector<PredictionRecord> ns_records;
  /// Vote histograms in record order.
  std::vector<VoteHistogram> histograms;
  EvalReport report;
  std::optional<double> alpha;
  /// Correct-and-rejected fraction of the clean set at the final threshold.
  double clean_correct_rejected = 0;
};

/// Smoothing setup after applying option overrides to the checkpoint.
SmoothingConfig effective_smoothing(const ModelCheckpoint& ckpt, const EvalOptions& options);
NoiseBank effective_bank(const ModelCheckpoint& ckpt, const EvalOptions& options);

/// Calibrates (or fixes) the threshold on the clean data, runs every attack
/// on every sample and scores the ensemble.
EvalOutput evaluate_model(const ModelCheckpoint& ckpt, const Dataset& data, const EvalOptions& options);

Json eval_output_to_json(const EvalOutput& out, const EvalOptions& options);

// --- sweeps -------------------------------------------------------------------

struct SweepTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void write_csv(std::ostream& out) const;
};

/// Rejection/accuracy for every f in [0, N - 1], rescoring one set of vote
/// histograms.
SweepTable sweep_threshold(const ModelCheckpoint& ckpt, const Dataset& data, const EvalOptions& options);

/// Acc_adv,10% mean and variance over `repeats` bank seeds for each N.
SweepTable sweep_n(const ModelCheckpoint& ckpt, const Dataset& data, const EvalOptions& options,
                   const std::vector<int>& ns, int repeats);

/// NS-path PGD and FGSM accuracy and mean FGSM loss for each delta.
SweepTable sweep_delta(const ModelCheckpoint& ckpt, const Dataset& data, const EvalOptions& options,
                       const std::vector<double>& deltas);

// --- detector cascade -----------------------------------------------------------

/// Routes every (sample, attack) record of the detector log through the
/// cascade; attacked inputs are regenerated against the checkpoint model.
/// Throws FormatError when the log names samples absent from the data.
EvalOutput combine_with_detector(const std::vector<PredictionRecord>& detector_log, const ModelCheckpoint& ckpt,
                                 const Dataset& data, const EvalOptions& options);

}  // namespace flss

#endif  // FLSS_PIPELINE_HPP
