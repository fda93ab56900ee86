#ifndef FLSS_TRAINER_HPP
#define FLSS_TRAINER_HPP

// Two-step adversarial training of the stochastic classifier, a plain PGD-AT
// baseline on the NS path, and early stopping on validation robustness.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "flss/attacks.hpp"
#include "flss/datakit.hpp"
#include "flss/stochclf.hpp"

namespace flss {

enum class TrainMethod { flss, pgd_at };

TrainMethod parse_train_method(std::string_view name);
std::string to_string(TrainMethod method);

struct TrainConfig {
  TrainMethod method = TrainMethod::flss;
  Architecture arch;
  int epochs = 120;
  int batch_size = 128;
  double lr_max = 0.1;
  double weight_decay = 5e-4;
  LossCoeffs coeffs;
  /// Training attack; delta = 0 disables it.
  AttackSpec attack = [] {
    AttackSpec a;
    a.delta = 0.1;
    a.steps = 10;
    return a;
  }();
  double awp_gamma = 0.005;
  /// Validation attack: PGD on the NS path.
  int eval_steps = 7;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double lr_last = 0;
  /// Mean training losses over the epoch (step 2 is zero for pgd_at).
  LossBreakdown step1;
  LossBreakdown step2;
  double val_clean_ns = 0;  // %
  double val_adv_ns = 0;    // %
  /// Step-1 loss on the validation split at fixed per-sample noise.
  double val_step1_loss = 0;
  bool improved = false;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;

  /// Columns epoch,lr,ce1,kl1,kl2,kl3,total1,ce2,kl1_2,kl4,total2,
  /// val_clean_ns,val_adv_ns,val_step1_loss,improved.
  void write_csv(std::ostream& out) const;
};

struct Checkpoint {
  int epoch = 0;
  ModelParams params;
};

/// The checkpoint whose epoch has the highest val_adv_ns; ties go to the
/// earliest epoch. Throws ValueError when there are no checkpoints.
const Checkpoint& early_stop_select(const TrainLog& log, const std::vector<Checkpoint>& checkpoints);

enum class TrainEvent { pgd_generated, awp_perturbed, awp_restored, sgd_step, minibatch_done, epoch_done };

/// Called synchronously with the current parameters after each event.
using TrainObserver = std::function<void(TrainEvent, const ModelParams&)>;

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

/// Per minibatch: draw eps per example, generate PGD adversaries with that
/// eps held fixed, take one SGD step on the step-1 loss evaluated at the
/// AWP-perturbed weights (then restored), draw eps', take one SGD step on the
/// step-2 loss. Returns the early-stopped parameters. Throws NumericError on
/// a non-finite loss.
TrainResult train_flss(const Dataset& data, const TrainConfig& cfg, const TrainObserver& observer = {});

/// PGD adversarial training of the NS path with CE; the log-variance head is
/// pinned to the lower clamp and never trained.
TrainResult train_pgd_at(const Dataset& data, const TrainConfig& cfg, const TrainObserver& observer = {});

TrainResult train(const Dataset& data, const TrainConfig& cfg, const TrainObserver& observer = {});

struct RobustEval {
  double clean = 0;  // %
  double adv = 0;    // %
};

/// NS-path clean and PGD accuracy with the given attack (fixed_eps ignored).
RobustEval ns_robust_accuracy(const ModelParams& model, const std::vector<Vector>& inputs,
                              const std::vector<int>& labels, const AttackSpec& attack);

}  // namespace flss

#endif  // FLSS_TRAINER_HPP
