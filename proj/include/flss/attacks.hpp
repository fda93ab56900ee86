#ifndef FLSS_ATTACKS_HPP
#define FLSS_ATTACKS_HPP

// L-infinity bounded attacks on the stochastic classifier. Every attack is a
// pure function of (model, input, spec); randomness comes only from
// spec.seed, so results are bit-reproducible.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "flss/stochclf.hpp"

namespace flss {

/// Per-coordinate clamp applied after projection onto the L-inf ball.
struct Box {
  double low = 0.0;
  double high = 1.0;
};

struct AttackSpec {
  double delta = 8.0 / 255.0;
  int steps = 10;
  /// 0 selects the default 2.5 * delta / steps.
  double step_size = 0.0;
  int restarts = 1;
  /// Latent noise reused for every iteration; empty = NS path.
  NoiseVector fixed_eps;
  double sd_scale = 1.0;
  std::optional<Box> box;
  int eot_k = 1;
  std::uint64_t seed = 0;

  double effective_step_size() const;
  void validate() const;
};

struct AttackResult {
  Vector x_adv;
  /// Objective value at every iterate of the winning restart (init first).
  std::vector<double> loss_trace;
  int restart_index = 0;
  /// Largest objective value seen; the value at x_adv.
  double best_loss = 0.0;
};

/// Value and gradient of the objective the attacker ascends.
using AscentObjective = std::function<ObjectiveValue(const Vector&)>;

/// Sign-gradient ascent with projection onto {||x' - x||_inf <= delta} and
/// the optional box. Uniform random start in the ball; best iterate over all
/// restarts is returned. Works for any differentiable objective, which keeps
/// the engine testable on closed-form surrogates.
AttackResult pgd_maximize(const Vector& x, const AttackSpec& spec, const AscentObjective& objective);

/// Projection of a candidate onto the ball around x and then the box.
Vector project(const Vector& candidate, const Vector& x, double delta, const std::optional<Box>& box);

/// Single step x + delta * sign(grad CE); sign(0) = 0.
AttackResult fgsm(const ModelParams& model, const Vector& x, int label, const AttackSpec& spec);

/// PGD on CE (or the CW margin) with spec.fixed_eps held fixed.
AttackResult pgd(const ModelParams& model, const Vector& x, int label, const AttackSpec& spec,
                 LossKind loss = LossKind::ce);

/// Source of fresh latent draws for EOT.
using NoiseSampler = std::function<NoiseVector()>;

NoiseSampler gaussian_sampler(Index latent_dim, std::uint64_t seed);

/// Mean objective value and gradient over k draws from the sampler; the
/// objective's eps is replaced by each draw in turn.
ObjectiveValue eot_gradient(const ModelParams& model, const Vector& x, Objective objective,
                            const NoiseSampler& sampler, int k);

/// PGD where each step uses the EOT-averaged gradient over spec.eot_k draws.
AttackResult eot_pgd(const ModelParams& model, const Vector& x, int label, const AttackSpec& spec,
                     const NoiseSampler& sampler, LossKind loss = LossKind::ce);

// --- adversarial weight perturbation ----------------------------------------

struct AwpRestoreToken {
  std::vector<Matrix> original_weights;
};

/// Layerwise-normalized ascent on weights: w <- w + gamma * ||w|| / ||g|| * g.
/// Layers with a zero gradient are left unchanged; biases are not perturbed.
std::pair<ModelParams, AwpRestoreToken> awp_perturb(const ModelParams& model, const ParamGrads& ascent_grads,
                                                    double gamma);

/// Same, computing the ascent direction as the mean step-1 loss gradient on
/// the batch of (clean, adversarial, eps) triples.
std::pair<ModelParams, AwpRestoreToken> awp_perturb(const ModelParams& model, const Step1Batch& batch,
                                                    double gamma, const LossCoeffs& coeffs);

ModelParams awp_restore(ModelParams perturbed, const AwpRestoreToken& token);

// --- adaptive attacks ---------------------------------------------------------

enum class FeatureVariant { a1, a2, a3, a4, a5, a6 };
enum class RejectVariant { ra1, ra2, ra3, ra4 };

inline constexpr double kVariancePenalty = 1.0;

struct AdaptiveInputs {
  /// Guide input from another class (a1, a2, a5).
  std::optional<Vector> guide;
  /// Target class (a6).
  std::optional<int> target;
  /// Pre-sampled noise vectors (a6, ra3).
  std::vector<NoiseVector> ensemble_eps;
};

/// Builds the ascended objective for a feature-space attack variant.
Objective feature_objective(const ModelParams& model, const Vector& x, int label, FeatureVariant variant,
                            const AttackSpec& spec, const AdaptiveInputs& inputs);

/// Builds the ascended objective for a rejection-inducing variant. ra3's
/// random targets are drawn from spec.seed.
Objective reject_objective(const ModelParams& model, const Vector& x, int label, RejectVariant variant,
                           const AttackSpec& spec, const AdaptiveInputs& inputs);

AttackResult feature_attack(const ModelParams& model, const Vector& x, int label, FeatureVariant variant,
                            const AttackSpec& spec, const AdaptiveInputs& inputs);

AttackResult reject_attack(const ModelParams& model, const Vector& x, int label, RejectVariant variant,
                           const AttackSpec& spec, const AdaptiveInputs& inputs = {});

struct GuidedAttackResult {
  AttackResult result;
  std::size_t guide_index = 0;
  double true_class_confidence = 0.0;
};

/// Runs a guided variant once per guide and keeps the adversary with the
/// lowest NS confidence in the true class.
GuidedAttackResult worst_guide_attack(const ModelParams& model, const Vector& x, int label, FeatureVariant variant,
                                      const AttackSpec& spec, std::span<const Vector> guides);

// --- corruptions ----------------------------------------------------------------

enum class CorruptionKind { uniform, bernoulli, gaussian };

CorruptionKind parse_corruption_kind(std::string_view name);

/// count noisy copies of x: uniform U[-m, m], bernoulli +-m, or gaussian
/// N(0, m^2) per coordinate, clamped to the box when one is given.
std::vector<Vector> random_corruption(const Vector& x, CorruptionKind kind, double magnitude, int count,
                                      std::uint64_t seed, const std::optional<Box>& box);

}  // namespace flss

#endif  // FLSS_ATTACKS_HPP
