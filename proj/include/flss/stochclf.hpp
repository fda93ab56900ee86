#ifndef FLSS_STOCHCLF_HPP
#define FLSS_STOCHCLF_HPP

// Latent-Gaussian stochastic classifier
//
//   C(x, eps) = softmax(M(mu(x) + sd_scale * exp(0.5 * logvar(x)) .* eps))
//
// The encoder is a ReLU trunk followed by two identity heads (mean and
// log-variance); M is a ReLU MLP with an identity output layer. eps = 0 gives
// the deterministic no-sampling (NS) path.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flss/netcore.hpp"

namespace flss {

using Vector = Vec<double>;
using Matrix = Mat<double>;
using Layer = DenseLayer<double>;
using NoiseVector = Vector;

/// Mirrors ModelParams::layers one-to-one.
using ParamGrads = std::vector<Layer>;

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

struct Architecture {
  Index input_dim = 2;
  std::vector<Index> trunk{64, 64};
  Index latent_dim = 16;
  std::vector<Index> head{};  // hidden widths of the MLP head; empty = direct to classes
  Index num_classes = 2;

  bool operator==(const Architecture&) const = default;
};

/// All weights of the classifier. Layer layout:
///   [trunk..., mean_head, logvar_head, head hidden..., head output]
struct ModelParams {
  Architecture arch;
  std::vector<Layer> layers;

  /// He-normal weights, zero biases. Deterministic in seed.
  static ModelParams initialize(const Architecture& arch, std::uint64_t seed);

  std::size_t trunk_count() const { return arch.trunk.size(); }
  std::size_t mean_index() const { return trunk_count(); }
  std::size_t logvar_index() const { return trunk_count() + 1; }
  std::size_t head_begin() const { return trunk_count() + 2; }

  const Layer& mean_head() const { return layers[mean_index()]; }
  const Layer& logvar_head() const { return layers[logvar_index()]; }
  Layer& logvar_head() { return layers[logvar_index()]; }

  /// Throws ShapeError if the layers do not match the architecture.
  void validate() const;

  ParamGrads zero_grads() const;

  bool operator==(const ModelParams& other) const { return arch == other.arch && layers == other.layers; }
};

std::size_t parameter_count(const ModelParams& params);

struct EncoderOutput {
  Vector mu;
  Vector logvar;  // clamped to [kLogvarMin, kLogvarMax]
};

struct LossCoeffs {
  double kl1 = 0.01;
  double kl2 = 1.0;
  double kl3 = 0.1;
  double kl4 = 1.0;
};

struct LossBreakdown {
  double total = 0;
  double ce = 0;
  double kl1 = 0;
  double kl2 = 0;
  double kl3 = 0;
  double kl4 = 0;
};

struct LossAndGrads {
  LossBreakdown loss;
  ParamGrads grads;
};

// --- forward passes -------------------------------------------------------

EncoderOutput encode(const ModelParams& params, const Vector& x);

/// Latent sample mu + sd_scale * sigma .* eps. An empty eps means eps = 0.
Vector reparameterize(const EncoderOutput& enc, const NoiseVector& eps, double sd_scale);

Vector head_logits(const ModelParams& params, const Vector& z);

/// Softmax output of the classifier for a fixed noise vector.
Vector forward(const ModelParams& params, const Vector& x, const NoiseVector& eps, double sd_scale = 1.0);
Vector forward_logits(const ModelParams& params, const Vector& x, const NoiseVector& eps, double sd_scale = 1.0);

/// No-sampling path: forward with eps = 0.
Vector forward_ns(const ModelParams& params, const Vector& x);

// --- training losses -------------------------------------------------------

/// Adversarial step loss: CE(C(x_adv, eps), y) + c1 KL1 + c2 KL2 + c3 KL3 with
///   KL1 = KL(N(E(x_clean)) || N(0, I))
///   KL2 = KL(N(E(x_adv)) || N(E(x_clean)))
///   KL3 = KL(C(x_adv, eps) || C(x_adv, 0))
LossAndGrads loss_step1(const ModelParams& params, const Vector& x_clean, const Vector& x_adv,
                        const NoiseVector& eps, int label, const LossCoeffs& coeffs);

/// Clean step loss: CE(C(x, eps'), y) + c1 KL1 + c4 KL4 with
///   KL4 = KL(C(x, eps') || C(x, 0)).
LossAndGrads loss_step2(const ModelParams& params, const Vector& x_clean, const NoiseVector& eps_prime,
                        int label, const LossCoeffs& coeffs);

/// Deterministic CE on the NS path (baseline trainer).
LossAndGrads loss_ns_ce(const ModelParams& params, const Vector& x, int label);

struct Step1Batch {
  std::vector<Vector> x_clean;
  std::vector<Vector> x_adv;
  std::vector<NoiseVector> eps;
  std::vector<int> labels;
};

/// Mean of loss_step1 over a batch.
LossAndGrads batch_loss_step1(const ModelParams& params, const Step1Batch& batch, const LossCoeffs& coeffs);

// --- attack objectives ------------------------------------------------------

enum class LossKind {
  ce,                    // CE(C(x, eps), label)
  cw_margin,             // max_{j != label} z_j - z_label on the logits
  entropy,               // H(C(x, eps))
  latent_kl_to_target,   // KL(N(E(x)) || N(target))
  latent_mse_to_target,  // ||mu(x) - target.mu||^2
  variance,              // sum exp(logvar(x))
  ce_ensemble,           // sum_n CE(C(x, eps_n), t_n)
};

LossKind parse_loss_kind(std::string_view name);
std::string to_string(LossKind kind);

struct ObjectiveTerm {
  LossKind kind;
  double weight = 1.0;
};

/// A weighted sum of named losses evaluated at a fixed noise draw.
struct Objective {
  std::vector<ObjectiveTerm> terms;
  int label = 0;
  NoiseVector eps;  // empty = NS path
  double sd_scale = 1.0;
  std::optional<EncoderOutput> latent_target;
  std::vector<NoiseVector> ensemble_eps;
  std::vector<int> ensemble_targets;
};

struct ObjectiveValue {
  double value = 0;
  Vector input_grad;  // empty when not requested
};

ObjectiveValue evaluate_objective(const ModelParams& params, const Vector& x, const Objective& objective,
                                  bool with_gradient = true);

/// Gradient of a single named loss with respect to the input, eps held fixed.
/// Kinds that need a target (latent_*, ce_ensemble) must go through
/// evaluate_objective.
Vector input_gradient(const ModelParams& params, const Vector& x, const NoiseVector& eps, int label,
                      LossKind kind);

}  // namespace flss

#endif  // FLSS_STOCHCLF_HPP
