#include "flss/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "flss/errors.hpp"
#include "flss/random.hpp"

namespace flss {

TrainMethod parse_train_method(std::string_view name) {
  if (name == "flss") return TrainMethod::flss;
  if (name == "pgd_at") return TrainMethod::pgd_at;
  throw ConfigError("unknown training method: " + std::string(name));
}

std::string to_string(TrainMethod method) {
  return method == TrainMethod::flss ? "flss" : "pgd_at";
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(lr_max >= 0)) throw ConfigError("lr_max must be non-negative");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (!(coeffs.kl1 >= 0 && coeffs.kl2 >= 0 && coeffs.kl3 >= 0 && coeffs.kl4 >= 0)) {
    throw ConfigError("loss coefficients must be non-negative");
  }
  if (!(awp_gamma >= 0)) throw ConfigError("awp_gamma must be non-negative");
  if (eval_steps < 0) throw ConfigError("eval_steps must be non-negative");
  try {
    attack.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
}

void TrainLog::write_csv(std::ostream& out) const {
  out << "epoch,lr,ce1,kl1,kl2,kl3,total1,ce2,kl1_2,kl4,total2,val_clean_ns,val_adv_ns,val_step1_loss,improved\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.lr_last << ',' << e.step1.ce << ',' << e.step1.kl1 << ',' << e.step1.kl2 << ','
        << e.step1.kl3 << ',' << e.step1.total << ',' << e.step2.ce << ',' << e.step2.kl1 << ',' << e.step2.kl4 << ','
        << e.step2.total << ',' << e.val_clean_ns << ',' << e.val_adv_ns << ',' << e.val_step1_loss << ','
        << (e.improved ? 1 : 0) << '\n';
  }
}

const Checkpoint& early_stop_select(const TrainLog& log, const std::vector<Checkpoint>& checkpoints) {
  if (checkpoints.empty()) throw ValueError("early_stop_select: no checkpoints");
  const Checkpoint* best = nullptr;
  double best_acc = 0;
  for (const auto& c : checkpoints) {
    auto it = std::find_if(log.epochs.begin(), log.epochs.end(), [&](const EpochRecord& e) { return e.epoch == c.epoch; });
    if (it == log.epochs.end()) throw ValueError("early_stop_select: checkpoint epoch missing from log");
    if (best == nullptr || it->val_adv_ns > best_acc || (it->val_adv_ns == best_acc && c.epoch < best->epoch)) {
      best = &c;
      best_acc = it->val_adv_ns;
    }
  }
  return *best;
}

RobustEval ns_robust_accuracy(const ModelParams& model, const std::vector<Vector>& inputs,
                              const std::vector<int>& labels, const AttackSpec& attack) {
  if (inputs.size() != labels.size()) throw ShapeError("ns_robust_accuracy: inputs and labels differ in length");
  if (inputs.empty()) return {};
  AttackSpec spec = attack;
  spec.fixed_eps = NoiseVector();
  std::size_t clean = 0, adv = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Vector p = forward_ns(model, inputs[i]);
    Index cls = 0;
    p.maxCoeff(&cls);
    if (cls == labels[i]) ++clean;
    spec.seed = derive_seed(attack.seed, {i});
    const Vector x_adv = spec.delta > 0 ? pgd(model, inputs[i], labels[i], spec).x_adv : inputs[i];
    forward_ns(model, x_adv).maxCoeff(&cls);
    if (cls == labels[i]) ++adv;
  }
  const double n = static_cast<double>(inputs.size());
  return {100.0 * clean / n, 100.0 * adv / n};
}

namespace {

void notify(const TrainObserver& observer, TrainEvent event, const ModelParams& params) {
  if (observer) observer(event, params);
}

void accumulate(ParamGrads& into, const ParamGrads& g, double scale) {
  for (std::size_t i = 0; i < into.size(); ++i) {
    into[i].weight += scale * g[i].weight;
    into[i].bias += scale * g[i].bias;
  }
}

void add_loss(LossBreakdown& into, const LossBreakdown& l, double scale) {
  into.total += scale * l.total;
  into.ce += scale * l.ce;
  into.kl1 += scale * l.kl1;
  into.kl2 += scale * l.kl2;
  into.kl3 += scale * l.kl3;
  into.kl4 += scale * l.kl4;
}

void check_finite(const LossBreakdown& loss, const ParamGrads& grads, int epoch) {
  bool ok = std::isfinite(loss.total);
  for (const auto& g : grads) ok = ok && all_finite(g.weight) && all_finite(g.bias);
  if (!ok) throw NumericError("training diverged: non-finite loss or gradient in epoch " + std::to_string(epoch));
}

/// Shared epoch/batch/validation scaffolding. batch_fn runs one minibatch in
/// place and returns its step-1 and step-2 losses.
class Loop {
 public:
  Loop(const Dataset& data, const TrainConfig& cfg, const TrainObserver& observer, int steps_per_batch)
      : cfg_(cfg), observer_(observer), train_(data.subset(Split::train)), val_(data.subset(Split::val)) {
    cfg.validate();
    data.validate();
    if (train_.size() == 0) throw ValueError("training split is empty");
    if (val_.size() == 0) val_ = train_;
    batches_ = (static_cast<long long>(train_.size()) + cfg.batch_size - 1) / cfg.batch_size;
    total_steps_ = batches_ * cfg.epochs * steps_per_batch;

    Rng val_rng(derive_seed(cfg.seed, {0x7a1}));
    for (std::size_t i = 0; i < val_.size(); ++i) val_eps_.push_back(standard_normal<double>(cfg.arch.latent_dim, val_rng));
  }

  const Dataset& train() const { return train_; }

  ModelParams sgd(const ModelParams& params, const ParamGrads& grads) {
    ModelParams out = params;
    last_lr_ = cyclic_lr<double>(step_, total_steps_, cfg_.lr_max);
    out.layers = sgd_step(std::move(out.layers), grads, last_lr_, cfg_.weight_decay);
    ++step_;
    notify(observer_, TrainEvent::sgd_step, out);
    return out;
  }

  template <typename BatchFn>
  TrainResult run(ModelParams params, BatchFn&& batch_fn) {
    TrainResult result;
    std::vector<Checkpoint> checkpoints;
    double best_adv = -1;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::vector<std::size_t> order(train_.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle_rng(derive_seed(cfg_.seed, {static_cast<std::uint64_t>(epoch), 0x5f}));
      std::shuffle(order.begin(), order.end(), shuffle_rng);

      EpochRecord rec;
      rec.epoch = epoch;
      for (long long b = 0; b < batches_; ++b) {
        const std::size_t begin = static_cast<std::size_t>(b) * static_cast<std::size_t>(cfg_.batch_size);
        const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg_.batch_size));
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
        const auto [l1, l2] = batch_fn(params, idx, epoch, b);
        add_loss(rec.step1, l1, 1.0 / static_cast<double>(batches_));
        add_loss(rec.step2, l2, 1.0 / static_cast<double>(batches_));
        notify(observer_, TrainEvent::minibatch_done, params);
      }
      rec.lr_last = last_lr_;
      validate_epoch(params, rec);
      if (rec.val_adv_ns > best_adv) {
        best_adv = rec.val_adv_ns;
        rec.improved = true;
        checkpoints.push_back({epoch, params});
      }
      result.log.epochs.push_back(rec);
      notify(observer_, TrainEvent::epoch_done, params);
    }
    const Checkpoint& best = early_stop_select(result.log, checkpoints);
    result.log.best_epoch = best.epoch;
    result.params = best.params;
    return result;
  }

 private:
  void validate_epoch(const ModelParams& params, EpochRecord& rec) const {
    AttackSpec spec = cfg_.attack;
    spec.steps = cfg_.eval_steps;
    spec.step_size = 0;
    spec.restarts = 1;
    spec.fixed_eps = NoiseVector();
    std::size_t clean = 0, adv = 0;
    double loss = 0;
    for (std::size_t i = 0; i < val_.size(); ++i) {
      const Vector& x = val_.inputs[i];
      const int y = val_.labels[i];
      Index cls = 0;
      forward_ns(params, x).maxCoeff(&cls);
      if (cls == y) ++clean;
      spec.seed = derive_seed(cfg_.seed, {static_cast<std::uint64_t>(val_.ids[i]), 0x7a2});
      const Vector x_adv = spec.delta > 0 ? pgd(params, x, y, spec).x_adv : x;
      forward_ns(params, x_adv).maxCoeff(&cls);
      if (cls == y) ++adv;
      loss += loss_step1(params, x, x_adv, val_eps_[i], y, cfg_.coeffs).loss.total;
    }
    const double n = static_cast<double>(val_.size());
    rec.val_clean_ns = 100.0 * clean / n;
    rec.val_adv_ns = 100.0 * adv / n;
    rec.val_step1_loss = loss / n;
  }

  const TrainConfig& cfg_;
  const TrainObserver& observer_;
  Dataset train_;
  Dataset val_;
  std::vector<NoiseVector> val_eps_;
  long long batches_ = 0;
  long long total_steps_ = 0;
  long long step_ = 0;
  double last_lr_ = 0;
};

}  // namespace

TrainResult train_flss(const Dataset& data, const TrainConfig& cfg, const TrainObserver& observer) {
  if (data.input_dim != cfg.arch.input_dim || data.num_classes != cfg.arch.num_classes) {
    throw ConfigError("architecture does not match the dataset");
  }
  Loop loop(data, cfg, observer, 2);
  const Dataset& train = loop.train();
  const Index latent = cfg.arch.latent_dim;

  auto batch_fn = [&](ModelParams& params, const std::vector<std::size_t>& idx, int epoch, long long b) {
    Rng eps_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b), 0xe5}));
    Step1Batch batch;
    for (std::size_t i : idx) {
      const Vector& x = train.inputs[i];
      const int y = train.labels[i];
      NoiseVector eps = standard_normal<double>(latent, eps_rng);
      Vector x_adv = x;
      if (cfg.attack.delta > 0) {
        AttackSpec spec = cfg.attack;
        spec.fixed_eps = eps;
        spec.seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(train.ids[i]), 0xa7});
        x_adv = pgd(params, x, y, spec).x_adv;
      }
      batch.x_clean.push_back(x);
      batch.x_adv.push_back(std::move(x_adv));
      batch.eps.push_back(std::move(eps));
      batch.labels.push_back(y);
    }
    notify(observer, TrainEvent::pgd_generated, params);

    auto [perturbed, token] = cfg.awp_gamma > 0 ? awp_perturb(params, batch, cfg.awp_gamma, cfg.coeffs)
                                                : awp_perturb(params, params.zero_grads(), 0.0);
    notify(observer, TrainEvent::awp_perturbed, perturbed);
    const LossAndGrads step1 = batch_loss_step1(perturbed, batch, cfg.coeffs);
    params = awp_restore(std::move(perturbed), token);
    notify(observer, TrainEvent::awp_restored, params);
    check_finite(step1.loss, step1.grads, epoch);
    params = loop.sgd(params, step1.grads);

    LossAndGrads step2;
    step2.grads = params.zero_grads();
    const double scale = 1.0 / static_cast<double>(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const NoiseVector eps_prime = standard_normal<double>(latent, eps_rng);
      const LossAndGrads lg = loss_step2(params, batch.x_clean[k], eps_prime, batch.labels[k], cfg.coeffs);
      add_loss(step2.loss, lg.loss, scale);
      accumulate(step2.grads, lg.grads, scale);
    }
    check_finite(step2.loss, step2.grads, epoch);
    params = loop.sgd(params, step2.grads);
    return std::pair{step1.loss, step2.loss};
  };

  ModelParams init = ModelParams::initialize(cfg.arch, cfg.seed);
  return loop.run(std::move(init), batch_fn);
}

TrainResult train_pgd_at(const Dataset& data, const TrainConfig& cfg, const TrainObserver& observer) {
  if (data.input_dim != cfg.arch.input_dim || data.num_classes != cfg.arch.num_classes) {
    throw ConfigError("architecture does not match the dataset");
  }
  Loop loop(data, cfg, observer, 1);
  const Dataset& train = loop.train();

  ModelParams init = ModelParams::initialize(cfg.arch, cfg.seed);
  init.logvar_head().weight.setZero();
  init.logvar_head().bias.setConstant(kLogvarMin);

  auto batch_fn = [&](ModelParams& params, const std::vector<std::size_t>& idx, int epoch, long long) {
    AttackSpec spec = cfg.attack;
    spec.fixed_eps = NoiseVector();
    std::vector<Vector> adv;
    for (std::size_t i : idx) {
      const Vector& x = train.inputs[i];
      if (cfg.attack.delta > 0) {
        spec.seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(train.ids[i]), 0xa7});
        adv.push_back(pgd(params, x, train.labels[i], spec).x_adv);
      } else {
        adv.push_back(x);
      }
    }
    notify(observer, TrainEvent::pgd_generated, params);

    LossAndGrads total;
    total.grads = params.zero_grads();
    const double scale = 1.0 / static_cast<double>(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const LossAndGrads lg = loss_ns_ce(params, adv[k], train.labels[idx[k]]);
      add_loss(total.loss, lg.loss, scale);
      accumulate(total.grads, lg.grads, scale);
    }
    check_finite(total.loss, total.grads, epoch);
    const std::size_t lv = params.logvar_index();
    total.grads[lv].weight.setZero();
    total.grads[lv].bias.setZero();
    params = loop.sgd(params, total.grads);
    return std::pair{total.loss, LossBreakdown{}};
  };

  return loop.run(init, batch_fn);
}

TrainResult train(const Dataset& data, const TrainConfig& cfg, const TrainObserver& observer) {
  return cfg.method == TrainMethod::flss ? train_flss(data, cfg, observer) : train_pgd_at(data, cfg, observer);
}

}  // namespace flss
