#include "flss/attacks.hpp"

#include <cmath>
#include <memory>

#include "flss/random.hpp"

namespace flss {

namespace {

Vector sign(const Vector& g) {
  return g.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

void check_inside_box(const Vector& x, const std::optional<Box>& box) {
  if (!box) return;
  if (x.size() > 0 && (x.minCoeff() < box->low || x.maxCoeff() > box->high)) {
    throw ValueError("attack: clean input lies outside the box");
  }
}

AscentObjective model_objective(const ModelParams& model, Objective objective) {
  return [&model, objective = std::move(objective)](const Vector& x) {
    return evaluate_objective(model, x, objective, true);
  };
}

Objective base_objective(int label, const AttackSpec& spec) {
  Objective obj;
  obj.label = label;
  obj.eps = spec.fixed_eps;
  obj.sd_scale = spec.sd_scale;
  return obj;
}

}  // namespace

double AttackSpec::effective_step_size() const {
  if (step_size > 0) return step_size;
  return steps > 0 ? 2.5 * delta / static_cast<double>(steps) : 0.0;
}

void AttackSpec::validate() const {
  if (!(delta >= 0)) throw ValueError("AttackSpec: delta must be non-negative");
  if (steps < 0) throw ValueError("AttackSpec: steps must be non-negative");
  if (step_size < 0) throw ValueError("AttackSpec: step_size must be non-negative");
  if (restarts < 1) throw ValueError("AttackSpec: restarts must be at least 1");
  if (eot_k < 1) throw ValueError("AttackSpec: eot_k must be at least 1");
  if (!(sd_scale > 0)) throw ValueError("AttackSpec: sd_scale must be positive");
  if (box && !(box->low <= box->high)) throw ValueError("AttackSpec: empty box");
}

Vector project(const Vector& candidate, const Vector& x, double delta, const std::optional<Box>& box) {
  if (candidate.size() != x.size()) throw ShapeError("project: length mismatch");
  Vector out = candidate.array().max(x.array() - delta).min(x.array() + delta);
  if (box) out = out.array().max(box->low).min(box->high);
  return out;
}

AttackResult pgd_maximize(const Vector& x, const AttackSpec& spec, const AscentObjective& objective) {
  spec.validate();
  check_inside_box(x, spec.box);
  const double alpha = spec.effective_step_size();

  AttackResult best;
  bool have_best = false;
  for (int r = 0; r < spec.restarts; ++r) {
    Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(r), 0x9d}));
    Vector current = x;
    if (spec.delta > 0) current += uniform_vector<double>(x.size(), -spec.delta, spec.delta, rng);
    current = project(current, x, spec.delta, spec.box);

    std::vector<double> trace;
    trace.reserve(static_cast<std::size_t>(spec.steps) + 1);
    ObjectiveValue v = objective(current);
    trace.push_back(v.value);
    Vector run_best = current;
    double run_best_value = v.value;

    for (int t = 0; t < spec.steps; ++t) {
      current = project(current + alpha * sign(v.input_grad), x, spec.delta, spec.box);
      v = objective(current);
      trace.push_back(v.value);
      if (v.value > run_best_value) {
        run_best_value = v.value;
        run_best = current;
      }
    }

    if (!have_best || run_best_value > best.best_loss) {
      best.x_adv = std::move(run_best);
      best.best_loss = run_best_value;
      best.loss_trace = std::move(trace);
      best.restart_index = r;
      have_best = true;
    }
  }
  return best;
}

AttackResult fgsm(const ModelParams& model, const Vector& x, int label, const AttackSpec& spec) {
  spec.validate();
  check_inside_box(x, spec.box);
  Objective obj = base_objective(label, spec);
  obj.terms = {{LossKind::ce, 1.0}};
  const ObjectiveValue at_x = evaluate_objective(model, x, obj, true);
  AttackResult out;
  out.x_adv = project(x + spec.delta * sign(at_x.input_grad), x, spec.delta, spec.box);
  const double at_adv = evaluate_objective(model, out.x_adv, obj, false).value;
  out.loss_trace = {at_x.value, at_adv};
  out.best_loss = at_adv;
  return out;
}

AttackResult pgd(const ModelParams& model, const Vector& x, int label, const AttackSpec& spec, LossKind loss) {
  if (loss != LossKind::ce && loss != LossKind::cw_margin) throw ValueError("pgd: loss must be ce or cw_margin");
  Objective obj = base_objective(label, spec);
  obj.terms = {{loss, 1.0}};
  return pgd_maximize(x, spec, model_objective(model, std::move(obj)));
}

NoiseSampler gaussian_sampler(Index latent_dim, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(derive_seed(seed, {0xe07}));
  return [rng, latent_dim]() { return standard_normal<double>(latent_dim, *rng); };
}

ObjectiveValue eot_gradient(const ModelParams& model, const Vector& x, Objective objective,
                            const NoiseSampler& sampler, int k) {
  if (k < 1) throw ValueError("eot_gradient: k must be at least 1");
  ObjectiveValue acc;
  acc.input_grad = Vector::Zero(x.size());
  for (int i = 0; i < k; ++i) {
    objective.eps = sampler();
    const ObjectiveValue v = evaluate_objective(model, x, objective, true);
    acc.value += v.value;
    acc.input_grad += v.input_grad;
  }
  acc.value /= k;
  acc.input_grad /= k;
  return acc;
}

AttackResult eot_pgd(const ModelParams& model, const Vector& x, int label, const AttackSpec& spec,
                     const NoiseSampler& sampler, LossKind loss) {
  if (loss != LossKind::ce && loss != LossKind::cw_margin) throw ValueError("eot_pgd: loss must be ce or cw_margin");
  Objective obj = base_objective(label, spec);
  obj.terms = {{loss, 1.0}};
  const int k = spec.eot_k;
  return pgd_maximize(x, spec, [&](const Vector& xi) { return eot_gradient(model, xi, obj, sampler, k); });
}

std::pair<ModelParams, AwpRestoreToken> awp_perturb(const ModelParams& model, const ParamGrads& ascent_grads,
                                                    double gamma) {
  if (!(gamma >= 0)) throw ValueError("awp_perturb: gamma must be non-negative");
  if (ascent_grads.size() != model.layers.size()) throw ShapeError("awp_perturb: gradient set does not mirror model");
  AwpRestoreToken token;
  token.original_weights.reserve(model.layers.size());
  ModelParams perturbed = model;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    token.original_weights.push_back(model.layers[i].weight);
    const Matrix& g = ascent_grads[i].weight;
    if (g.rows() != model.layers[i].weight.rows() || g.cols() != model.layers[i].weight.cols()) {
      throw ShapeError("awp_perturb: gradient shape mismatch");
    }
    const double gnorm = g.norm();
    if (gamma == 0 || gnorm == 0) continue;
    const double wnorm = model.layers[i].weight.norm();
    perturbed.layers[i].weight += (gamma * wnorm / gnorm) * g;
  }
  return {std::move(perturbed), std::move(token)};
}

std::pair<ModelParams, AwpRestoreToken> awp_perturb(const ModelParams& model, const Step1Batch& batch,
                                                    double gamma, const LossCoeffs& coeffs) {
  const LossAndGrads lg = batch_loss_step1(model, batch, coeffs);
  return awp_perturb(model, lg.grads, gamma);
}

ModelParams awp_restore(ModelParams perturbed, const AwpRestoreToken& token) {
  if (token.original_weights.size() != perturbed.layers.size()) {
    throw ShapeError("awp_restore: token does not match the model");
  }
  for (std::size_t i = 0; i < perturbed.layers.size(); ++i) perturbed.layers[i].weight = token.original_weights[i];
  return perturbed;
}

Objective feature_objective(const ModelParams& model, const Vector& x, int label, FeatureVariant variant,
                            const AttackSpec& spec, const AdaptiveInputs& inputs) {
  Objective obj = base_objective(label, spec);
  auto guide_encoding = [&]() {
    if (!inputs.guide) throw ValueError("feature attack: this variant needs a guide input");
    return encode(model, *inputs.guide);
  };
  switch (variant) {
    case FeatureVariant::a1:
      obj.latent_target = guide_encoding();
      obj.terms = {{LossKind::latent_kl_to_target, -1.0}};
      break;
    case FeatureVariant::a2:
      obj.latent_target = guide_encoding();
      obj.terms = {{LossKind::latent_mse_to_target, -1.0}};
      break;
    case FeatureVariant::a3:
      obj.latent_target = encode(model, x);
      obj.terms = {{LossKind::latent_kl_to_target, 1.0}};
      break;
    case FeatureVariant::a4:
      obj.latent_target = encode(model, x);
      obj.terms = {{LossKind::latent_mse_to_target, 1.0}};
      break;
    case FeatureVariant::a5:
      obj.latent_target = guide_encoding();
      obj.terms = {{LossKind::latent_mse_to_target, -1.0}, {LossKind::variance, -kVariancePenalty}};
      break;
    case FeatureVariant::a6:
      if (!inputs.target) throw ValueError("feature attack a6 needs a target class");
      if (inputs.ensemble_eps.empty()) throw ValueError("feature attack a6 needs pre-sampled noise vectors");
      obj.ensemble_eps = inputs.ensemble_eps;
      obj.ensemble_targets.assign(inputs.ensemble_eps.size(), *inputs.target);
      obj.terms = {{LossKind::ce_ensemble, -1.0}};
      break;
  }
  return obj;
}

Objective reject_objective(const ModelParams& model, const Vector& x, int label, RejectVariant variant,
                           const AttackSpec& spec, const AdaptiveInputs& inputs) {
  (void)x;
  Objective obj = base_objective(label, spec);
  switch (variant) {
    case RejectVariant::ra1:
      obj.eps = NoiseVector();
      obj.terms = {{LossKind::entropy, 1.0}};
      break;
    case RejectVariant::ra2:
      obj.eps = NoiseVector();
      obj.terms = {{LossKind::entropy, 1.0}, {LossKind::ce, -1.0}};
      break;
    case RejectVariant::ra3: {
      if (inputs.ensemble_eps.empty()) throw ValueError("reject attack ra3 needs pre-sampled noise vectors");
      Rng rng(derive_seed(spec.seed, {0x3a3}));
      std::uniform_int_distribution<int> pick(0, static_cast<int>(model.arch.num_classes) - 1);
      obj.ensemble_eps = inputs.ensemble_eps;
      obj.ensemble_targets.clear();
      for (std::size_t n = 0; n < inputs.ensemble_eps.size(); ++n) obj.ensemble_targets.push_back(pick(rng));
      obj.terms = {{LossKind::ce_ensemble, -1.0}};
      break;
    }
    case RejectVariant::ra4:
      obj.terms = {{LossKind::variance, 1.0}};
      break;
  }
  return obj;
}

AttackResult feature_attack(const ModelParams& model, const Vector& x, int label, FeatureVariant variant,
                            const AttackSpec& spec, const AdaptiveInputs& inputs) {
  return pgd_maximize(x, spec, model_objective(model, feature_objective(model, x, label, variant, spec, inputs)));
}

AttackResult reject_attack(const ModelParams& model, const Vector& x, int label, RejectVariant variant,
                           const AttackSpec& spec, const AdaptiveInputs& inputs) {
  return pgd_maximize(x, spec, model_objective(model, reject_objective(model, x, label, variant, spec, inputs)));
}

GuidedAttackResult worst_guide_attack(const ModelParams& model, const Vector& x, int label, FeatureVariant variant,
                                      const AttackSpec& spec, std::span<const Vector> guides) {
  if (guides.empty()) throw ValueError("worst_guide_attack: no guides");
  GuidedAttackResult best;
  bool have = false;
  for (std::size_t g = 0; g < guides.size(); ++g) {
    AdaptiveInputs in;
    in.guide = guides[g];
    AttackResult r = feature_attack(model, x, label, variant, spec, in);
    const double conf = forward_ns(model, r.x_adv)[label];
    if (!have || conf < best.true_class_confidence) {
      best.result = std::move(r);
      best.guide_index = g;
      best.true_class_confidence = conf;
      have = true;
    }
  }
  return best;
}

CorruptionKind parse_corruption_kind(std::string_view name) {
  if (name == "uniform") return CorruptionKind::uniform;
  if (name == "bernoulli") return CorruptionKind::bernoulli;
  if (name == "gaussian") return CorruptionKind::gaussian;
  throw ValueError("unknown corruption kind: " + std::string(name));
}

std::vector<Vector> random_corruption(const Vector& x, CorruptionKind kind, double magnitude, int count,
                                      std::uint64_t seed, const std::optional<Box>& box) {
  if (!(magnitude >= 0)) throw ValueError("random_corruption: magnitude must be non-negative");
  if (count < 0) throw ValueError("random_corruption: count must be non-negative");
  Rng rng(derive_seed(seed, {0xc0}));
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int c = 0; c < count; ++c) {
    Vector noisy = x;
    if (magnitude > 0) {
      switch (kind) {
        case CorruptionKind::uniform:
          noisy += uniform_vector<double>(x.size(), -magnitude, magnitude, rng);
          break;
        case CorruptionKind::bernoulli: {
          std::bernoulli_distribution coin(0.5);
          for (Index i = 0; i < x.size(); ++i) noisy[i] += coin(rng) ? magnitude : -magnitude;
          break;
        }
        case CorruptionKind::gaussian:
          noisy += magnitude * standard_normal<double>(x.size(), rng);
          break;
      }
    }
    if (box) noisy = noisy.array().max(box->low).min(box->high);
    out.push_back(std::move(noisy));
  }
  return out;
}

}  // namespace flss
