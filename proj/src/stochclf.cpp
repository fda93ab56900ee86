#include "flss/stochclf.hpp"

#include <cmath>
#include <stdexcept>

#include "flss/random.hpp"

namespace flss {

namespace {

using Cache = DenseCache<double>;

struct EncoderPass {
  std::vector<Cache> trunk;
  Cache mean;
  Cache logvar;
  Vector raw_logvar;
  EncoderOutput out;
};

struct HeadPass {
  std::vector<Cache> layers;
  Vector logits;
};

EncoderPass run_encoder(const ModelParams& p, const Vector& x) {
  if (x.size() != p.arch.input_dim) throw ShapeError("encode: input length does not match architecture");
  EncoderPass pass;
  pass.trunk.reserve(p.trunk_count());
  Vector h = x;
  for (std::size_t i = 0; i < p.trunk_count(); ++i) {
    auto f = dense_forward(p.layers[i], h, Activation::relu);
    pass.trunk.push_back(std::move(f.cache));
    h = std::move(f.output);
  }
  auto m = dense_forward(p.mean_head(), h, Activation::identity);
  auto l = dense_forward(p.logvar_head(), h, Activation::identity);
  pass.out.mu = std::move(m.output);
  pass.mean = std::move(m.cache);
  pass.raw_logvar = std::move(l.output);
  pass.logvar = std::move(l.cache);
  pass.out.logvar = pass.raw_logvar.cwiseMax(kLogvarMin).cwiseMin(kLogvarMax);
  return pass;
}

Vector backward_layer(const Cache& cache, const Vector& upstream, ParamGrads* accum, std::size_t index) {
  if (accum != nullptr) return dense_backward_accumulate(cache, upstream, (*accum)[index]);
  return dense_backward_input(cache, upstream);
}

/// Backpropagates through the encoder; returns the input gradient.
Vector encoder_backward(const ModelParams& p, const EncoderPass& pass, const Vector& grad_mu,
                        const Vector& grad_logvar, ParamGrads* accum) {
  // The clamp passes gradient only where the raw value is inside the bounds.
  const Vector grad_raw =
      ((pass.raw_logvar.array() >= kLogvarMin) && (pass.raw_logvar.array() <= kLogvarMax))
          .select(grad_logvar, 0.0);
  Vector g = backward_layer(pass.mean, grad_mu, accum, p.mean_index());
  g += backward_layer(pass.logvar, grad_raw, accum, p.logvar_index());
  for (std::size_t i = p.trunk_count(); i-- > 0;) g = backward_layer(pass.trunk[i], g, accum, i);
  return g;
}

HeadPass run_head(const ModelParams& p, const Vector& z) {
  if (z.size() != p.arch.latent_dim) throw ShapeError("head: latent length does not match architecture");
  HeadPass pass;
  const std::size_t first = p.head_begin();
  const std::size_t last = p.layers.size() - 1;
  pass.layers.reserve(p.layers.size() - first);
  Vector h = z;
  for (std::size_t i = first; i <= last; ++i) {
    auto f = dense_forward(p.layers[i], h, i == last ? Activation::identity : Activation::relu);
    pass.layers.push_back(std::move(f.cache));
    h = std::move(f.output);
  }
  pass.logits = std::move(h);
  return pass;
}

Vector head_backward(const ModelParams& p, const HeadPass& pass, const Vector& grad_logits, ParamGrads* accum) {
  Vector g = grad_logits;
  const std::size_t first = p.head_begin();
  for (std::size_t k = pass.layers.size(); k-- > 0;) g = backward_layer(pass.layers[k], g, accum, first + k);
  return g;
}

/// d z / d logvar for z = mu + sd * exp(0.5 logvar) .* eps, applied to grad_z.
Vector logvar_grad_from_latent(const EncoderOutput& enc, const NoiseVector& eps, double sd_scale,
                               const Vector& grad_z) {
  return (grad_z.array() * (0.5 * sd_scale) * (0.5 * enc.logvar.array()).exp() * eps.array()).matrix();
}

void check_label(const ModelParams& p, int label) {
  if (label < 0 || label >= p.arch.num_classes) throw ValueError("label out of range");
}

void check_eps(const ModelParams& p, const NoiseVector& eps) {
  if (eps.size() != 0 && eps.size() != p.arch.latent_dim) {
    throw ShapeError("noise vector length does not match latent_dim");
  }
}

}  // namespace

ModelParams ModelParams::initialize(const Architecture& arch, std::uint64_t seed) {
  if (arch.input_dim <= 0 || arch.latent_dim <= 0 || arch.num_classes <= 0) {
    throw ShapeError("Architecture: dimensions must be positive");
  }
  Rng rng(derive_seed(seed, {0x1417}));
  auto make = [&rng](Index out, Index in) {
    Layer layer(out, in);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in)));
    for (Index r = 0; r < out; ++r)
      for (Index c = 0; c < in; ++c) layer.weight(r, c) = dist(rng);
    return layer;
  };
  ModelParams p;
  p.arch = arch;
  Index width = arch.input_dim;
  for (Index w : arch.trunk) {
    p.layers.push_back(make(w, width));
    width = w;
  }
  p.layers.push_back(make(arch.latent_dim, width));
  p.layers.push_back(make(arch.latent_dim, width));
  width = arch.latent_dim;
  for (Index w : arch.head) {
    p.layers.push_back(make(w, width));
    width = w;
  }
  p.layers.push_back(make(arch.num_classes, width));
  return p;
}

void ModelParams::validate() const {
  const std::size_t expected = arch.trunk.size() + 2 + arch.head.size() + 1;
  if (layers.size() != expected) throw ShapeError("ModelParams: layer count does not match architecture");
  auto expect = [this](std::size_t i, Index out, Index in) {
    const Layer& l = layers[i];
    if (l.out_dim() != out || l.in_dim() != in || l.bias.size() != out) {
      throw ShapeError("ModelParams: layer " + std::to_string(i) + " shape does not match architecture");
    }
  };
  Index width = arch.input_dim;
  std::size_t i = 0;
  for (Index w : arch.trunk) {
    expect(i++, w, width);
    width = w;
  }
  expect(i++, arch.latent_dim, width);
  expect(i++, arch.latent_dim, width);
  width = arch.latent_dim;
  for (Index w : arch.head) {
    expect(i++, w, width);
    width = w;
  }
  expect(i, arch.num_classes, width);
}

ParamGrads ModelParams::zero_grads() const {
  ParamGrads g;
  g.reserve(layers.size());
  for (const auto& l : layers) g.push_back(l.zeros_like());
  return g;
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  for (const auto& l : params.layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

EncoderOutput encode(const ModelParams& params, const Vector& x) { return run_encoder(params, x).out; }

Vector reparameterize(const EncoderOutput& enc, const NoiseVector& eps, double sd_scale) {
  if (!(sd_scale > 0)) throw ValueError("sd_scale must be positive");
  if (eps.size() == 0) return enc.mu + Vector::Zero(enc.mu.size());
  if (eps.size() != enc.mu.size()) throw ShapeError("noise vector length does not match latent_dim");
  return enc.mu.array() + sd_scale * (0.5 * enc.logvar.array()).exp() * eps.array();
}

Vector head_logits(const ModelParams& params, const Vector& z) { return run_head(params, z).logits; }

Vector forward_logits(const ModelParams& params, const Vector& x, const NoiseVector& eps, double sd_scale) {
  check_eps(params, eps);
  return head_logits(params, reparameterize(encode(params, x), eps, sd_scale));
}

Vector forward(const ModelParams& params, const Vector& x, const NoiseVector& eps, double sd_scale) {
  return softmax(forward_logits(params, x, eps, sd_scale));
}

Vector forward_ns(const ModelParams& params, const Vector& x) {
  return forward(params, x, Vector::Zero(params.arch.latent_dim), 1.0);
}

LossAndGrads loss_step1(const ModelParams& params, const Vector& x_clean, const Vector& x_adv,
                        const NoiseVector& eps, int label, const LossCoeffs& coeffs) {
  check_label(params, label);
  if (eps.size() != params.arch.latent_dim) throw ShapeError("loss_step1: noise vector length mismatch");
  const EncoderPass ec = run_encoder(params, x_clean);
  const EncoderPass ea = run_encoder(params, x_adv);

  const auto kl1 = gaussian_kl_std(ec.out.mu, ec.out.logvar);
  const auto kl2 = gaussian_kl_pair(ea.out.mu, ea.out.logvar, ec.out.mu, ec.out.logvar);

  const HeadPass hs = run_head(params, reparameterize(ea.out, eps, 1.0));
  const HeadPass h0 = run_head(params, ea.out.mu);
  const auto ce = softmax_ce(hs.logits, label);
  const auto kl3 = categorical_kl(softmax(hs.logits), softmax(h0.logits));

  LossAndGrads out;
  out.loss.ce = ce.loss;
  out.loss.kl1 = kl1.value;
  out.loss.kl2 = kl2.value;
  out.loss.kl3 = kl3.value;
  out.loss.total = ce.loss + coeffs.kl1 * kl1.value + coeffs.kl2 * kl2.value + coeffs.kl3 * kl3.value;

  out.grads = params.zero_grads();
  const Vector g_zs = head_backward(params, hs, ce.grad + coeffs.kl3 * kl3.grad_p_logits, &out.grads);
  const Vector g_z0 = head_backward(params, h0, coeffs.kl3 * kl3.grad_q_logits, &out.grads);

  const Vector g_mu_adv = g_zs + g_z0 + coeffs.kl2 * kl2.grad_mu_p;
  const Vector g_lv_adv = logvar_grad_from_latent(ea.out, eps, 1.0, g_zs) + coeffs.kl2 * kl2.grad_logvar_p;
  encoder_backward(params, ea, g_mu_adv, g_lv_adv, &out.grads);

  const Vector g_mu_clean = coeffs.kl1 * kl1.grad_mu + coeffs.kl2 * kl2.grad_mu_q;
  const Vector g_lv_clean = coeffs.kl1 * kl1.grad_logvar + coeffs.kl2 * kl2.grad_logvar_q;
  encoder_backward(params, ec, g_mu_clean, g_lv_clean, &out.grads);
  return out;
}

LossAndGrads loss_step2(const ModelParams& params, const Vector& x_clean, const NoiseVector& eps_prime,
                        int label, const LossCoeffs& coeffs) {
  check_label(params, label);
  if (eps_prime.size() != params.arch.latent_dim) throw ShapeError("loss_step2: noise vector length mismatch");
  const EncoderPass ec = run_encoder(params, x_clean);
  const auto kl1 = gaussian_kl_std(ec.out.mu, ec.out.logvar);
  const HeadPass hs = run_head(params, reparameterize(ec.out, eps_prime, 1.0));
  const HeadPass h0 = run_head(params, ec.out.mu);
  const auto ce = softmax_ce(hs.logits, label);
  const auto kl4 = categorical_kl(softmax(hs.logits), softmax(h0.logits));

  LossAndGrads out;
  out.loss.ce = ce.loss;
  out.loss.kl1 = kl1.value;
  out.loss.kl4 = kl4.value;
  out.loss.total = ce.loss + coeffs.kl1 * kl1.value + coeffs.kl4 * kl4.value;

  out.grads = params.zero_grads();
  const Vector g_zs = head_backward(params, hs, ce.grad + coeffs.kl4 * kl4.grad_p_logits, &out.grads);
  const Vector g_z0 = head_backward(params, h0, coeffs.kl4 * kl4.grad_q_logits, &out.grads);
  const Vector g_mu = g_zs + g_z0 + coeffs.kl1 * kl1.grad_mu;
  const Vector g_lv = logvar_grad_from_latent(ec.out, eps_prime, 1.0, g_zs) + coeffs.kl1 * kl1.grad_logvar;
  encoder_backward(params, ec, g_mu, g_lv, &out.grads);
  return out;
}

LossAndGrads loss_ns_ce(const ModelParams& params, const Vector& x, int label) {
  check_label(params, label);
  const EncoderPass enc = run_encoder(params, x);
  const HeadPass h = run_head(params, enc.out.mu);
  const auto ce = softmax_ce(h.logits, label);
  LossAndGrads out;
  out.loss.ce = ce.loss;
  out.loss.total = ce.loss;
  out.grads = params.zero_grads();
  const Vector g_mu = head_backward(params, h, ce.grad, &out.grads);
  encoder_backward(params, enc, g_mu, Vector::Zero(params.arch.latent_dim), &out.grads);
  return out;
}

LossAndGrads batch_loss_step1(const ModelParams& params, const Step1Batch& batch, const LossCoeffs& coeffs) {
  const std::size_t n = batch.labels.size();
  if (n == 0) throw ValueError("batch_loss_step1: empty batch");
  if (batch.x_clean.size() != n || batch.x_adv.size() != n || batch.eps.size() != n) {
    throw ShapeError("batch_loss_step1: batch fields differ in length");
  }
  LossAndGrads acc;
  acc.grads = params.zero_grads();
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = loss_step1(params, batch.x_clean[i], batch.x_adv[i], batch.eps[i], batch.labels[i], coeffs);
    acc.loss.total += r.loss.total;
    acc.loss.ce += r.loss.ce;
    acc.loss.kl1 += r.loss.kl1;
    acc.loss.kl2 += r.loss.kl2;
    acc.loss.kl3 += r.loss.kl3;
    for (std::size_t l = 0; l < acc.grads.size(); ++l) {
      acc.grads[l].weight += r.grads[l].weight;
      acc.grads[l].bias += r.grads[l].bias;
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  acc.loss.total *= inv;
  acc.loss.ce *= inv;
  acc.loss.kl1 *= inv;
  acc.loss.kl2 *= inv;
  acc.loss.kl3 *= inv;
  for (auto& g : acc.grads) {
    g.weight *= inv;
    g.bias *= inv;
  }
  return acc;
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "ce") return LossKind::ce;
  if (name == "cw_margin") return LossKind::cw_margin;
  if (name == "entropy") return LossKind::entropy;
  if (name == "latent_kl_to_target") return LossKind::latent_kl_to_target;
  if (name == "latent_mse_to_target") return LossKind::latent_mse_to_target;
  if (name == "variance") return LossKind::variance;
  if (name == "ce_ensemble" || name == "per-sample-ce-ensemble") return LossKind::ce_ensemble;
  throw ValueError("unknown loss kind: " + std::string(name));
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::ce: return "ce";
    case LossKind::cw_margin: return "cw_margin";
    case LossKind::entropy: return "entropy";
    case LossKind::latent_kl_to_target: return "latent_kl_to_target";
    case LossKind::latent_mse_to_target: return "latent_mse_to_target";
    case LossKind::variance: return "variance";
    case LossKind::ce_ensemble: return "ce_ensemble";
  }
  return "unknown";
}

ObjectiveValue evaluate_objective(const ModelParams& params, const Vector& x, const Objective& objective,
                                  bool with_gradient) {
  check_eps(params, objective.eps);
  const EncoderPass pass = run_encoder(params, x);
  const Index d = params.arch.latent_dim;
  Vector g_mu = Vector::Zero(d);
  Vector g_lv = Vector::Zero(d);
  double value = 0;

  bool needs_output = false;
  for (const auto& t : objective.terms) {
    needs_output |= t.kind == LossKind::ce || t.kind == LossKind::cw_margin || t.kind == LossKind::entropy;
  }

  std::optional<HeadPass> head;
  Vector g_logits;
  if (needs_output) {
    head = run_head(params, reparameterize(pass.out, objective.eps, objective.sd_scale));
    g_logits = Vector::Zero(head->logits.size());
  }

  auto require_target = [&objective]() -> const EncoderOutput& {
    if (!objective.latent_target) throw ValueError("objective: latent target required");
    return *objective.latent_target;
  };

  for (const auto& term : objective.terms) {
    const double w = term.weight;
    switch (term.kind) {
      case LossKind::ce: {
        check_label(params, objective.label);
        const auto r = softmax_ce(head->logits, objective.label);
        value += w * r.loss;
        g_logits += w * r.grad;
        break;
      }
      case LossKind::cw_margin: {
        check_label(params, objective.label);
        const Vector& z = head->logits;
        if (z.size() < 2) throw ValueError("cw_margin needs at least two classes");
        Index best = -1;
        for (Index j = 0; j < z.size(); ++j) {
          if (j == objective.label) continue;
          if (best < 0 || z[j] > z[best]) best = j;
        }
        value += w * (z[best] - z[objective.label]);
        g_logits[best] += w;
        g_logits[objective.label] -= w;
        break;
      }
      case LossKind::entropy: {
        const Vector logp = log_softmax(head->logits);
        const Vector p = logp.array().exp();
        const double h = -(p.array() * logp.array()).sum();
        value += w * h;
        g_logits += (w * -(p.array() * (logp.array() + h))).matrix();
        break;
      }
      case LossKind::latent_kl_to_target: {
        const auto& t = require_target();
        const auto kl = gaussian_kl_pair(pass.out.mu, pass.out.logvar, t.mu, t.logvar);
        value += w * kl.value;
        g_mu += w * kl.grad_mu_p;
        g_lv += w * kl.grad_logvar_p;
        break;
      }
      case LossKind::latent_mse_to_target: {
        const auto& t = require_target();
        if (t.mu.size() != d) throw ShapeError("objective: latent target length mismatch");
        const Vector diff = pass.out.mu - t.mu;
        value += w * diff.squaredNorm();
        g_mu += 2.0 * w * diff;
        break;
      }
      case LossKind::variance: {
        const Vector var = pass.out.logvar.array().exp();
        value += w * var.sum();
        g_lv += w * var;
        break;
      }
      case LossKind::ce_ensemble: {
        if (objective.ensemble_eps.size() != objective.ensemble_targets.size() || objective.ensemble_eps.empty()) {
          throw ValueError("objective: ce_ensemble needs one target per noise vector");
        }
        for (std::size_t n = 0; n < objective.ensemble_eps.size(); ++n) {
          const NoiseVector& e = objective.ensemble_eps[n];
          check_eps(params, e);
          check_label(params, objective.ensemble_targets[n]);
          const HeadPass hn = run_head(params, reparameterize(pass.out, e, objective.sd_scale));
          const auto r = softmax_ce(hn.logits, objective.ensemble_targets[n]);
          value += w * r.loss;
          if (with_gradient) {
            const Vector gz = head_backward(params, hn, w * r.grad, nullptr);
            g_mu += gz;
            if (e.size() != 0) g_lv += logvar_grad_from_latent(pass.out, e, objective.sd_scale, gz);
          }
        }
        break;
      }
    }
  }

  ObjectiveValue out;
  out.value = value;
  if (!with_gradient) return out;
  if (head) {
    const Vector gz = head_backward(params, *head, g_logits, nullptr);
    g_mu += gz;
    if (objective.eps.size() != 0) g_lv += logvar_grad_from_latent(pass.out, objective.eps, objective.sd_scale, gz);
  }
  out.input_grad = encoder_backward(params, pass, g_mu, g_lv, nullptr);
  return out;
}

Vector input_gradient(const ModelParams& params, const Vector& x, const NoiseVector& eps, int label,
                      LossKind kind) {
  Objective obj;
  obj.terms = {{kind, 1.0}};
  obj.label = label;
  obj.eps = eps;
  return evaluate_objective(params, x, obj, true).input_grad;
}

}  // namespace flss
