// Acceptance suite. Prints one PASS/FAIL line per criterion, followed by
// the individual checks behind it.
//
// Exit status is 0 when every check passes or the only failures are the
// known gaps listed in kKnownGaps; anything else exits 1.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "flss/commands.hpp"
#include "flss/errors.hpp"
#include "support.hpp"

using namespace flss;
using namespace flss::testing;

namespace {

// Pinned tolerances and sizes.
constexpr double kGradRelTol = 1e-5;
constexpr int kGradInstances = 20;
constexpr double kSuiteSecondsFast = 60.0;

constexpr int kMcDraws = 1'000'000;
constexpr int kMcCases = 10;
constexpr Index kMcDim = 8;
constexpr double kMcAbsTol = 1e-2;
constexpr double kMcCaseScale = 0.3;
constexpr double kCategoricalTol = 1e-10;
constexpr double kKlRoundingSlack = 1e-12;
constexpr int kKlFuzz = 100'000;

constexpr int kReparamFuzz = 2000;

constexpr int kAttackFuzz = 100'000;
constexpr double kFeasibilitySlack = 1e-9;
constexpr int kMonotoneCases = 300;

constexpr int kMetricLogs = 200;
constexpr int kMetricSamples = 500;

constexpr int kCalibrationTables = 50;
constexpr double kCalibrationBudget = 0.10;

constexpr int kBinomialMaxN = 200;
constexpr double kBinomialTol = 1e-12;

constexpr double kDeskDelta = 0.1;
constexpr int kDeskPgdSteps = 100;
constexpr double kRequiredNsGain = 20.0;
constexpr double kRejectionSlack = 1.0;
constexpr double kDeskBudgetSeconds = 15 * 60.0;

constexpr double kMaskingDelta = 5 * kDeskDelta;
constexpr double kMaskingMaxAccuracy = 1.0;
constexpr double kFgsmMonotoneFraction = 0.90;
constexpr double kEotWindow = 3.0;

constexpr double kBudgetShiftTol = 0.5;

const std::set<std::string> kKnownGaps = {"8a", "9a", "9b"};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int precision = 3) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

struct Check {
  std::string tag;
  std::string what;
  bool pass = false;
  std::string detail;
};

class Criterion {
 public:
  Criterion(int id, std::string title) : id_(id), title_(std::move(title)), t0_(Clock::now()) {}

  void check(const std::string& what, bool pass, const std::string& detail, const std::string& tag = "") {
    checks_.push_back({tag.empty() ? std::to_string(id_) : tag, what, pass, detail});
  }

  bool pass() const {
    return std::all_of(checks_.begin(), checks_.end(), [](const Check& c) { return c.pass; });
  }

  double elapsed() const { return seconds_since(t0_); }

  /// Failing checks outside the known gaps.
  int report(std::ostream& out) const {
    out << "criterion " << id_ << ": " << (pass() ? "PASS" : "FAIL") << "  " << title_ << "  ("
        << num(elapsed(), 3) << " s)\n";
    int unexpected = 0;
    for (const auto& c : checks_) {
      const bool gap = kKnownGaps.contains(c.tag);
      out << "    " << (c.pass ? "ok      " : (gap ? "gap     " : "NOT MET ")) << c.what << ": " << c.detail << '\n';
      if (!c.pass && !gap) ++unexpected;
    }
    out.flush();
    return unexpected;
  }

 private:
  int id_;
  std::string title_;
  Clock::time_point t0_;
  std::vector<Check> checks_;
};

// --- criterion 1 -----------------------------------------------------------------

struct GradFixture {
  ModelParams model;
  Vector x, x_adv, eps;
  int label;
};

GradFixture grad_fixture(std::uint64_t seed) {
  const Architecture arch = small_arch();
  Rng rng(derive_seed(seed, {0xacc1}));
  GradFixture f{random_model(arch, seed + 1000), random_vector(3, rng), Vector(), random_vector(4, rng),
                static_cast<int>(seed % 3)};
  f.x_adv = f.x + random_vector(3, rng, 0.1);
  return f;
}

class WorstError {
 public:
  void add(double e) { worst_ = std::max(worst_, std::isfinite(e) ? e : 1e300); ++count_; }
  bool ok() const { return count_ >= kGradInstances && worst_ <= kGradRelTol; }
  std::string detail() const { return std::to_string(count_) + " instances, worst rel err " + num(worst_); }

 private:
  double worst_ = 0;
  int count_ = 0;
};

Criterion criterion_gradients() {
  Criterion c(1, "gradient integrity against central finite differences");
  std::map<std::string, WorstError> errors;
  const LossCoeffs coeffs{0.3, 0.7, 0.5, 0.9};

  for (int s = 0; s < kGradInstances; ++s) {
    const auto f = grad_fixture(static_cast<std::uint64_t>(s));
    Rng rng(derive_seed(s, {0xacc2}));

    const auto r1 = loss_step1(f.model, f.x, f.x_adv, f.eps, f.label, coeffs);
    errors["step-1 loss (params)"].add(max_rel_error(
        flatten(r1.grads),
        fd_param_gradient(
            [&](const ModelParams& m) { return loss_step1(m, f.x, f.x_adv, f.eps, f.label, coeffs).loss.total; },
            f.model)));

    const auto r2 = loss_step2(f.model, f.x, f.eps, f.label, coeffs);
    errors["step-2 loss (params)"].add(max_rel_error(
        flatten(r2.grads),
        fd_param_gradient([&](const ModelParams& m) { return loss_step2(m, f.x, f.eps, f.label, coeffs).loss.total; },
                          f.model)));

    const auto r3 = loss_ns_ce(f.model, f.x, f.label);
    errors["NS cross-entropy (params)"].add(max_rel_error(
        flatten(r3.grads),
        fd_param_gradient([&](const ModelParams& m) { return loss_ns_ce(m, f.x, f.label).loss.total; }, f.model)));

    Objective base;
    base.label = f.label;
    base.eps = f.eps;
    base.sd_scale = 1.5;
    base.latent_target = EncoderOutput{random_vector(4, rng), random_vector(4, rng, 0.5)};
    base.ensemble_eps = {random_vector(4, rng), random_vector(4, rng), Vector()};
    base.ensemble_targets = {0, 1, 2};
    for (LossKind kind : {LossKind::ce, LossKind::cw_margin, LossKind::entropy, LossKind::latent_kl_to_target,
                          LossKind::latent_mse_to_target, LossKind::variance, LossKind::ce_ensemble}) {
      Objective obj = base;
      obj.terms = {{kind, 0.7}};
      const auto v = evaluate_objective(f.model, f.x, obj);
      errors["input objective " + to_string(kind)].add(max_rel_error(
          v.input_grad,
          fd_gradient([&](const Vector& xx) { return evaluate_objective(f.model, xx, obj, false).value; }, f.x)));
    }

    AttackSpec spec;
    spec.sd_scale = 2.0;
    spec.seed = static_cast<std::uint64_t>(s);
    spec.fixed_eps = f.eps;
    AdaptiveInputs in;
    in.guide = f.x + random_vector(3, rng);
    in.target = (f.label + 1) % 3;
    in.ensemble_eps = {random_vector(4, rng), random_vector(4, rng)};
    auto add_attack_objective = [&](const std::string& name, const Objective& obj) {
      const auto v = evaluate_objective(f.model, f.x_adv, obj);
      errors[name].add(max_rel_error(
          v.input_grad,
          fd_gradient([&](const Vector& xx) { return evaluate_objective(f.model, xx, obj, false).value; }, f.x_adv)));
    };
    const char* feature_names[] = {"a1", "a2", "a3", "a4", "a5", "a6"};
    for (int v = 0; v < 6; ++v) {
      add_attack_objective(std::string("attack objective ") + feature_names[v],
                           feature_objective(f.model, f.x, f.label, static_cast<FeatureVariant>(v), spec, in));
    }
    for (int v = 0; v < 4; ++v) {
      add_attack_objective("attack objective ra" + std::to_string(v + 1),
                           reject_objective(f.model, f.x, f.label, static_cast<RejectVariant>(v), spec, in));
    }

    const Vector lp = random_vector(5, rng, 2.0), lq = random_vector(5, rng, 2.0);
    const auto kl = categorical_kl(softmax(lp), softmax(lq));
    errors["categorical KL (logits)"].add(max_rel_error(
        kl.grad_p_logits, fd_gradient([&](const Vector& l) { return categorical_kl(softmax(l), softmax(lq)).value; }, lp)));
    errors["categorical KL (logits)"].add(max_rel_error(
        kl.grad_q_logits, fd_gradient([&](const Vector& l) { return categorical_kl(softmax(lp), softmax(l)).value; }, lq)));

    const Vector mu = random_vector(6, rng), lv = random_vector(6, rng), mu2 = random_vector(6, rng),
                 lv2 = random_vector(6, rng);
    const auto gs = gaussian_kl_std(mu, lv);
    errors["Gaussian KL to N(0,I)"].add(
        max_rel_error(gs.grad_mu, fd_gradient([&](const Vector& m) { return gaussian_kl_std(m, lv).value; }, mu)));
    errors["Gaussian KL to N(0,I)"].add(
        max_rel_error(gs.grad_logvar, fd_gradient([&](const Vector& l) { return gaussian_kl_std(mu, l).value; }, lv)));
    const auto gp = gaussian_kl_pair(mu, lv, mu2, lv2);
    errors["Gaussian KL pair"].add(max_rel_error(
        gp.grad_mu_p, fd_gradient([&](const Vector& m) { return gaussian_kl_pair(m, lv, mu2, lv2).value; }, mu)));
    errors["Gaussian KL pair"].add(max_rel_error(
        gp.grad_logvar_p, fd_gradient([&](const Vector& l) { return gaussian_kl_pair(mu, l, mu2, lv2).value; }, lv)));
    errors["Gaussian KL pair"].add(max_rel_error(
        gp.grad_mu_q, fd_gradient([&](const Vector& m) { return gaussian_kl_pair(mu, lv, m, lv2).value; }, mu2)));
    errors["Gaussian KL pair"].add(max_rel_error(
        gp.grad_logvar_q, fd_gradient([&](const Vector& l) { return gaussian_kl_pair(mu, lv, mu2, l).value; }, lv2)));

    const auto ce = softmax_ce(lp, s % 5);
    errors["softmax cross-entropy"].add(
        max_rel_error(ce.grad, fd_gradient([&](const Vector& l) { return softmax_ce(l, s % 5).loss; }, lp)));
  }
  for (const auto& [name, e] : errors) c.check(name, e.ok(), e.detail());
  c.check("runtime", c.elapsed() < kSuiteSecondsFast, num(c.elapsed()) + " s");
  return c;
}

// --- criterion 2 -----------------------------------------------------------------

struct McEstimate {
  double mean = 0;
  double std_error = 0;
};

McEstimate mc_kl(const Vector& mu_p, const Vector& lv_p, const Vector& mu_q, const Vector& lv_q, Rng& rng) {
  const Vector sd_p = (0.5 * lv_p.array()).exp();
  const Vector inv_var_q = (-lv_q.array()).exp();
  double acc = 0, acc_sq = 0;
  Vector e(mu_p.size());
  std::normal_distribution<double> normal;
  for (int n = 0; n < kMcDraws; ++n) {
    for (Index i = 0; i < e.size(); ++i) e[i] = normal(rng);
    const Vector z = mu_p + sd_p.cwiseProduct(e);
    const double log_p = -0.5 * e.squaredNorm() - 0.5 * lv_p.sum();
    const double log_q = -0.5 * ((z - mu_q).array().square() * inv_var_q.array()).sum() - 0.5 * lv_q.sum();
    acc += log_p - log_q;
    acc_sq += (log_p - log_q) * (log_p - log_q);
  }
  const double mean = acc / kMcDraws;
  return {mean, std::sqrt((acc_sq / kMcDraws - mean * mean) / kMcDraws)};
}

Criterion criterion_kl() {
  Criterion c(2, "KL divergences against Monte-Carlo and direct summation");
  Rng rng(2024);
  double worst_std = 0, worst_pair = 0, worst_se = 0;
  for (int k = 0; k < kMcCases; ++k) {
    const Vector mu = random_vector(kMcDim, rng, kMcCaseScale), lv = random_vector(kMcDim, rng, kMcCaseScale);
    const Vector mu_q = random_vector(kMcDim, rng, kMcCaseScale), lv_q = random_vector(kMcDim, rng, kMcCaseScale);
    const Vector zero = Vector::Zero(kMcDim);
    const McEstimate to_std = mc_kl(mu, lv, zero, zero, rng);
    const McEstimate to_q = mc_kl(mu, lv, mu_q, lv_q, rng);
    worst_std = std::max(worst_std, std::abs(to_std.mean - gaussian_kl_std(mu, lv).value));
    worst_pair = std::max(worst_pair, std::abs(to_q.mean - gaussian_kl_pair(mu, lv, mu_q, lv_q).value));
    worst_se = std::max({worst_se, to_std.std_error, to_q.std_error});
  }
  const std::string cases = std::to_string(kMcCases) + " cases x " + std::to_string(kMcDraws) + " draws, ";
  c.check("gaussian_kl_std vs Monte-Carlo", worst_std <= kMcAbsTol,
          cases + "worst |diff| " + num(worst_std) + ", largest standard error " + num(worst_se));
  c.check("gaussian_kl_pair vs Monte-Carlo", worst_pair <= kMcAbsTol,
          cases + "worst |diff| " + num(worst_pair) + ", largest standard error " + num(worst_se));

  double worst_cat = 0;
  for (int k = 0; k < 1000; ++k) {
    const Index n = 2 + static_cast<Index>(rng() % 9);
    const Vector p = softmax(random_vector(n, rng, 3.0)), q = softmax(random_vector(n, rng, 3.0));
    double direct = 0;
    for (Index i = 0; i < n; ++i) direct += p[i] * std::log(p[i] / q[i]);
    worst_cat = std::max(worst_cat, std::abs(categorical_kl(p, q).value - direct));
  }
  c.check("categorical_kl vs direct sum", worst_cat <= kCategoricalTol, "1000 cases, worst |diff| " + num(worst_cat));

  double lowest = 0;
  std::uniform_real_distribution<double> scale(0.0, 10.0);
  for (int k = 0; k < kKlFuzz; ++k) {
    const Index n = 1 + static_cast<Index>(rng() % 8);
    const double s = scale(rng);
    const Vector mu = random_vector(n, rng, s), lv = random_vector(n, rng, s);
    const bool same = rng() % 8 == 0;
    const Vector mu_q = same ? mu : random_vector(n, rng, s), lv_q = same ? lv : random_vector(n, rng, s);
    Vector p = softmax(random_vector(n, rng, 4 * s));
    if (n > 1 && rng() % 4 == 0) {
      p[0] = 0;
      p /= p.sum();
    }
    const Vector q = same ? p : softmax(random_vector(n, rng, 4 * s));
    lowest = std::min({lowest, gaussian_kl_std(mu, lv).value, gaussian_kl_pair(mu, lv, mu_q, lv_q).value,
                       categorical_kl(p, q).value});
  }
  c.check("all KLs non-negative under fuzzing", lowest >= -kKlRoundingSlack,
          std::to_string(kKlFuzz) + " cases, lowest value " + num(lowest));
  c.check("runtime", c.elapsed() < kSuiteSecondsFast, num(c.elapsed()) + " s");
  return c;
}

// --- criterion 3 -----------------------------------------------------------------

Criterion criterion_reparameterization() {
  Criterion c(3, "zero-noise forward pass equals the NS path bitwise");
  Rng rng(33);
  const double sds[] = {1e-300, 1e-3, 0.25, 0.5, 1.0, 2.0, 4.0, 10.0, 1e3, 1e300};
  int compared = 0, mismatched = 0;
  for (int k = 0; k < kReparamFuzz; ++k) {
    Architecture arch;
    arch.input_dim = 1 + static_cast<Index>(rng() % 6);
    arch.trunk.assign(1 + rng() % 3, 0);
    for (auto& w : arch.trunk) w = 1 + static_cast<Index>(rng() % 12);
    arch.latent_dim = 1 + static_cast<Index>(rng() % 8);
    arch.head.assign(rng() % 3, 0);
    for (auto& w : arch.head) w = 1 + static_cast<Index>(rng() % 8);
    arch.num_classes = 2 + static_cast<Index>(rng() % 5);
    const ModelParams model = random_model(arch, rng(), 0.1 + (rng() % 10) * 0.2);
    const Vector x = random_vector(arch.input_dim, rng, 1.0 + (rng() % 5));
    const Vector zero = Vector::Zero(arch.latent_dim);
    const Vector ns = forward_ns(model, x);
    const Vector ns_logits = forward_logits(model, x, NoiseVector());
    for (double sd : sds) {
      ++compared;
      if (!(forward(model, x, zero, sd) == ns) || !(forward_logits(model, x, zero, sd) == ns_logits)) ++mismatched;
    }
    const double sd = std::ldexp(static_cast<double>(rng() % 1000 + 1), -static_cast<int>(rng() % 20));
    ++compared;
    if (!(forward(model, x, zero, sd) == ns)) ++mismatched;
  }
  c.check("forward(x, 0, sd) == forward_ns(x)", mismatched == 0,
          std::to_string(compared) + " (model, input, sd) triples, " + std::to_string(mismatched) + " mismatches");
  return c;
}

// --- criterion 4 -----------------------------------------------------------------

Criterion criterion_attack_feasibility() {
  Criterion c(4, "attack feasibility and monotone best loss");
  std::vector<ModelParams> models;
  for (std::uint64_t s = 0; s < 16; ++s) models.push_back(random_model(small_arch(), 400 + s));
  Rng rng(44);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int violations = 0;
  double worst_excess = -1;
  std::map<std::string, int> calls;
  for (int k = 0; k < kAttackFuzz; ++k) {
    const ModelParams& model = models[rng() % models.size()];
    const int label = static_cast<int>(rng() % 3);
    AttackSpec spec;
    spec.delta = rng() % 20 == 0 ? 0.0 : 0.5 * unit(rng);
    spec.steps = 1 + static_cast<int>(rng() % 4);
    spec.restarts = 1 + static_cast<int>(rng() % 2);
    spec.step_size = rng() % 2 == 0 ? 0.0 : 0.3 * unit(rng);
    spec.sd_scale = 0.5 + 2.5 * unit(rng);
    spec.seed = rng();
    if (rng() % 2 == 0) spec.fixed_eps = random_vector(4, rng);
    const bool boxed = rng() % 2 == 0;
    if (boxed) spec.box = Box{};
    const Vector x = boxed ? uniform_vector<double>(3, 0.0, 1.0, rng) : random_vector(3, rng);
    AdaptiveInputs in;
    in.guide = boxed ? uniform_vector<double>(3, 0.0, 1.0, rng) : random_vector(3, rng);
    in.target = (label + 1 + static_cast<int>(rng() % 2)) % 3;
    in.ensemble_eps = {random_vector(4, rng), random_vector(4, rng)};

    const int kind = static_cast<int>(rng() % 15);
    Vector out;
    std::string name;
    if (kind == 0) {
      name = "fgsm";
      out = fgsm(model, x, label, spec).x_adv;
    } else if (kind == 1) {
      name = "pgd";
      out = pgd(model, x, label, spec, LossKind::ce).x_adv;
    } else if (kind == 2) {
      name = "pgd_cw";
      out = pgd(model, x, label, spec, LossKind::cw_margin).x_adv;
    } else if (kind == 3) {
      name = "eot";
      spec.eot_k = 1 + static_cast<int>(rng() % 3);
      out = eot_pgd(model, x, label, spec, gaussian_sampler(4, spec.seed)).x_adv;
    } else if (kind < 10) {
      name = "a" + std::to_string(kind - 3);
      out = feature_attack(model, x, label, static_cast<FeatureVariant>(kind - 4), spec, in).x_adv;
    } else if (kind < 14) {
      name = "ra" + std::to_string(kind - 9);
      out = reject_attack(model, x, label, static_cast<RejectVariant>(kind - 10), spec, in).x_adv;
    } else {
      name = "worst-guide";
      const FeatureVariant v = std::array{FeatureVariant::a1, FeatureVariant::a2, FeatureVariant::a5}[rng() % 3];
      const std::vector<Vector> guides{*in.guide, x + random_vector(3, rng)};
      out = worst_guide_attack(model, x, label, v, spec, guides).result.x_adv;
    }
    ++calls[name];
    const double excess = (out - x).cwiseAbs().maxCoeff() - spec.delta;
    worst_excess = std::max(worst_excess, excess);
    bool bad = excess > kFeasibilitySlack || !out.allFinite();
    if (boxed) bad = bad || out.minCoeff() < 0.0 || out.maxCoeff() > 1.0;
    violations += bad;
  }
  std::string mix;
  for (const auto& [name, n] : calls) mix += (mix.empty() ? "" : " ") + name + "=" + std::to_string(n);
  c.check("L-inf ball and box", violations == 0,
          std::to_string(kAttackFuzz) + " calls, " + std::to_string(violations) + " violations, max(|x'-x|_inf - delta) " +
              num(worst_excess));
  c.check("attack mix", calls.size() == 15, mix);

  int non_monotone = 0;
  for (int k = 0; k < kMonotoneCases; ++k) {
    const ModelParams& model = models[rng() % models.size()];
    const Vector x = random_vector(3, rng);
    const int label = static_cast<int>(rng() % 3);
    const LossKind loss = k % 2 == 0 ? LossKind::ce : LossKind::cw_margin;
    AttackSpec spec;
    spec.delta = 0.05 + 0.45 * unit(rng);
    spec.step_size = spec.delta * (0.05 + 0.3 * unit(rng));
    spec.seed = rng();
    if (k % 3 == 0) spec.fixed_eps = random_vector(4, rng);
    double prev = -1e300;
    for (int r : {1, 2, 4, 8}) {
      AttackSpec s = spec;
      s.steps = 10;
      s.restarts = r;
      const double best = pgd(model, x, label, s, loss).best_loss;
      non_monotone += best < prev;
      prev = best;
    }
    prev = -1e300;
    for (int steps : {5, 10, 20, 40}) {
      AttackSpec s = spec;
      s.steps = steps;
      const double best = pgd(model, x, label, s, loss).best_loss;
      non_monotone += best < prev;
      prev = best;
    }
  }
  c.check("best loss non-decreasing in restarts {1,2,4,8} and steps {5,10,20,40}", non_monotone == 0,
          std::to_string(kMonotoneCases) + " cases, " + std::to_string(non_monotone) + " decreases");
  return c;
}

// --- criterion 5 -----------------------------------------------------------------

double pct(std::size_t k, std::size_t n) { return 100.0 * static_cast<double>(k) / static_cast<double>(n); }

std::optional<double> ratio_pct(std::size_t a, std::size_t b) {
  if (a + b == 0) return std::nullopt;
  return pct(a, a + b);
}

/// Recomputes every report field from a per-sample grouping.
bool brute_force_matches(const std::vector<PredictionRecord>& log, const std::vector<PredictionRecord>& ns_log) {
  std::map<std::int64_t, std::vector<const PredictionRecord*>> by_sample;
  for (const auto& r : log) by_sample[r.sample_id].push_back(&r);
  std::map<std::int64_t, std::vector<const PredictionRecord*>> ns_by_sample;
  for (const auto& r : ns_log) ns_by_sample[r.sample_id].push_back(&r);
  const std::size_t n = by_sample.size();

  SampleSet fc, fw, rej, fc_all;
  std::size_t ns_all = 0, ns_clean = 0;
  for (const auto& [id, recs] : by_sample) {
    bool good = true, wrong = false, rejected = false, all_correct = true;
    for (const auto* r : recs) {
      good = good && r->accepted && r->predicted == r->true_label;
      wrong = wrong || (r->accepted && r->predicted != r->true_label);
      rejected = rejected || !r->accepted;
      all_correct = all_correct && r->predicted == r->true_label;
    }
    if (good) fc.insert(id);
    if (wrong) fw.insert(id);
    if (rejected) rej.insert(id);
    if (all_correct) fc_all.insert(id);
    bool ns_ok = true, ns_clean_ok = true;
    for (const auto* r : ns_by_sample.at(id)) {
      ns_ok = ns_ok && r->predicted == r->true_label;
      if (r->attack_id == "clean") ns_clean_ok = ns_clean_ok && r->predicted == r->true_label;
    }
    ns_all += ns_ok;
    ns_clean += ns_clean_ok;
  }

  const EvalReport rep = compute_report(log, ns_log);
  bool ok = rep.universe_size == n && rep.sets.fully_correct == fc && rep.sets.falsely_wrong == fw &&
            rep.sets.rejected == rej;
  ok = ok && rep.fc == pct(fc.size(), n) && rep.fw == pct(fw.size(), n) && rep.mpr == pct(rej.size(), n);
  ok = ok && rep.acc_adv_10 == ratio_pct(fc.size(), fw.size()) && rep.acc_adv_0 == pct(fc_all.size(), n);
  ok = ok && rep.acc_adv_ns == pct(ns_all, n) && rep.acc_nat_ns == pct(ns_clean, n);

  std::map<std::string, std::array<std::size_t, 4>> rows;  // accepted-correct, accepted-wrong, rejected, correct
  for (const auto& r : log) {
    auto& row = rows[r.attack_id];
    const bool right = r.predicted == r.true_label;
    row[0] += r.accepted && right;
    row[1] += r.accepted && !right;
    row[2] += !r.accepted;
    row[3] += right;
  }
  ok = ok && rep.per_attack.size() == rows.size();
  for (const auto& row : rep.per_attack) {
    const auto& b = rows.at(row.attack_id);
    ok = ok && row.accepted_correct == pct(b[0], n) && row.accepted_wrong == pct(b[1], n) &&
         row.rejected == pct(b[2], n) && row.accuracy_all == pct(b[3], n) &&
         row.accuracy_accepted == ratio_pct(b[0], b[1]);
    if (row.attack_id == "clean") {
      ok = ok && rep.acc_nat_0 == pct(b[3], n) && rep.acc_nat_10 == ratio_pct(b[0], b[1]);
    }
  }
  return ok;
}

Criterion criterion_metrics() {
  Criterion c(5, "ensemble metrics equal a brute-force recomputation");
  Rng rng(55);
  const std::vector<std::string> attacks{"clean", "pgd", "a1"};
  int mismatches = 0;
  for (int t = 0; t < kMetricLogs; ++t) {
    const int classes = 2 + static_cast<int>(rng() % 9);
    const unsigned wrong_rate = 2 + rng() % 6, reject_rate = 2 + rng() % 8;
    std::vector<PredictionRecord> log, ns_log;
    for (const auto& a : attacks) {
      for (int i = 0; i < kMetricSamples; ++i) {
        PredictionRecord r;
        r.sample_id = 7 * i + t;
        r.attack_id = a;
        r.true_label = static_cast<int>(rng() % classes);
        r.predicted = rng() % wrong_rate == 0 ? static_cast<int>(rng() % classes) : r.true_label;
        r.accepted = rng() % reject_rate != 0;
        r.vote_count = static_cast<int>(rng() % 101);
        log.push_back(r);
        PredictionRecord ns = r;
        ns.predicted = rng() % wrong_rate == 0 ? static_cast<int>(rng() % classes) : r.true_label;
        ns.accepted = true;
        ns_log.push_back(ns);
      }
    }
    std::shuffle(log.begin(), log.end(), rng);
    std::shuffle(ns_log.begin(), ns_log.end(), rng);
    mismatches += !brute_force_matches(log, ns_log);
  }
  c.check("S_FC, S_FW, R and every metric", mismatches == 0,
          std::to_string(kMetricLogs) + " logs of 3 attacks x " + std::to_string(kMetricSamples) + " samples, " +
              std::to_string(mismatches) + " mismatches");
  const double published = 43.16 / (43.16 + 33.69) * 100.0;
  c.check("FC=43.16, FW=33.69 gives 56.16", std::abs(published - 56.16) < 0.005, num(published, 6));
  return c;
}

// --- criteria 8 (shared state), 6, 9, 10 -------------------------------------------

struct DeskSeed {
  std::uint64_t seed = 0;
  Dataset test;
  ModelCheckpoint flss, undefended, pgd_at;
  EvalOutput flss_eval, undefended_eval, pgd_at_eval;
};

struct Desk {
  std::vector<DeskSeed> seeds;
  double seconds = 0;
};

TrainJob desk_job(std::uint64_t seed, TrainMethod method, double delta) {
  TrainJob job;
  job.dataset = parse_dataset_spec("two_moons:n=2000,noise=0.05,seed=" + std::to_string(seed));
  job.train.method = method;
  job.train.epochs = 60;
  job.train.attack.delta = delta;
  job.train.seed = seed;
  return job;
}

EvalOptions desk_options(std::vector<std::string> attacks) {
  EvalOptions o;
  o.attacks = std::move(attacks);
  o.delta = kDeskDelta;
  o.steps = kDeskPgdSteps;
  return o;
}

const std::vector<std::string> kEnsemble{"clean", "pgd", "pgd_cw", "a1", "ra1"};

const Desk& desk() {
  static std::unique_ptr<Desk> built;
  if (built) return *built;
  const auto t0 = Clock::now();
  built = std::make_unique<Desk>();
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    DeskSeed d;
    d.seed = seed;
    d.test = make_dataset(desk_job(seed, TrainMethod::flss, kDeskDelta).dataset).subset(Split::test);
    d.flss = train_checkpoint(desk_job(seed, TrainMethod::flss, kDeskDelta));
    d.undefended = train_checkpoint(desk_job(seed, TrainMethod::pgd_at, 0.0));
    d.pgd_at = train_checkpoint(desk_job(seed, TrainMethod::pgd_at, kDeskDelta));
    const EvalOptions opts = desk_options(kEnsemble);
    d.flss_eval = evaluate_model(d.flss, d.test, opts);
    d.undefended_eval = evaluate_model(d.undefended, d.test, opts);
    d.pgd_at_eval = evaluate_model(d.pgd_at, d.test, opts);
    std::cout << "  [desk] seed " << seed << " trained and evaluated after " << num(seconds_since(t0)) << " s\n"
              << std::flush;
    built->seeds.push_back(std::move(d));
  }
  built->seconds = seconds_since(t0);
  return *built;
}

double ns_accuracy_under(const EvalOutput& out, const std::string& attack) {
  std::size_t total = 0, correct = 0;
  for (const auto& r : out.ns_records) {
    if (r.attack_id != attack) continue;
    ++total;
    correct += r.correct();
  }
  return pct(correct, total);
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string list(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += (out.empty() ? "" : " / ") + num(x, 4);
  return out;
}

// --- criterion 6 -----------------------------------------------------------------

Criterion criterion_calibration() {
  Criterion c(6, "threshold calibration contract");
  Rng rng(66);
  int mismatches = 0;
  for (int t = 0; t < kCalibrationTables; ++t) {
    const int n = 1 + static_cast<int>(rng() % 200);
    const int m = 1 + static_cast<int>(rng() % 500);
    std::vector<CleanVote> votes;
    for (int i = 0; i < m; ++i) votes.push_back({static_cast<int>(rng() % (n + 1)), rng() % 5 != 0});
    int best = 0;
    for (int f = 0; f < n; ++f) {
      int bad = 0;
      for (const auto& v : votes) bad += v.correct && v.vote_count <= f;
      if (static_cast<double>(bad) / static_cast<double>(m) <= kCalibrationBudget) best = f;
    }
    mismatches += calibrate_threshold_from_votes(votes, n, kCalibrationBudget) != best;
  }
  c.check("calibrate_threshold equals an exhaustive scan", mismatches == 0,
          std::to_string(kCalibrationTables) + " fuzzed vote tables, " + std::to_string(mismatches) + " mismatches");

  std::vector<double> fractions;
  for (const auto& d : desk().seeds) fractions.push_back(100.0 * d.flss_eval.clean_correct_rejected);
  const double worst = *std::max_element(fractions.begin(), fractions.end());
  c.check("two-moons correct-and-rejected clean fraction <= 10%", worst <= 100.0 * kCalibrationBudget,
          "seeds 0/1/2: " + list(fractions) + " %");
  return c;
}

// --- criterion 7 -----------------------------------------------------------------

Criterion criterion_binomial() {
  Criterion c(7, "two-sided binomial p-values");
  std::vector<long double> row{1.0L};
  double worst = 0;
  int pairs = 0;
  bool ties_one = true;
  for (int n = 0; n <= kBinomialMaxN; ++n) {
    if (n > 0) {
      std::vector<long double> next(n + 1, 0.0L);
      for (int k = 0; k <= n; ++k) {
        const long double left = k > 0 ? row[k - 1] : 0.0L;
        const long double right = k < n ? row[k] : 0.0L;
        next[k] = 0.5L * (left + right);
      }
      row = std::move(next);
    }
    for (int a = (n + 1) / 2; a <= n; ++a) {
      const int b = n - a;
      long double p = 0;
      for (int k = 0; k <= n; ++k) {
        if (std::max(k, n - k) >= a) p += row[k];
      }
      const double expected = static_cast<double>(std::min(1.0L, p));
      worst = std::max(worst, std::abs(binomial_pvalue(a, b) - expected));
      ++pairs;
      if (a == b) ties_one = ties_one && binomial_pvalue(a, b) == 1.0;
    }
  }
  c.check("matches exact enumeration for n_A + n_B <= 200", worst <= kBinomialTol,
          std::to_string(pairs) + " pairs, worst |diff| " + num(worst));
  c.check("p(n, n) = 1", ties_one, "n = 0..100");
  const double p10 = binomial_pvalue(10, 0);
  c.check("p(10, 0) = 1/512", p10 == 1.0 / 512.0, num(p10, 17));
  return c;
}

// --- criterion 8 -----------------------------------------------------------------

Criterion criterion_desk() {
  Criterion c(8, "two-moons desk experiment (delta 0.1, seeds 0/1/2)");
  const Desk& d = desk();
  std::vector<double> flss_ns, plain_ns, adv10, adv0, at10;
  bool rejection_ok = true;
  for (const auto& s : d.seeds) {
    flss_ns.push_back(ns_accuracy_under(s.flss_eval, "pgd"));
    plain_ns.push_back(ns_accuracy_under(s.undefended_eval, "pgd"));
    adv10.push_back(s.flss_eval.report.acc_adv_10.value_or(0.0));
    adv0.push_back(*s.flss_eval.report.acc_adv_0);
    at10.push_back(s.pgd_at_eval.report.acc_adv_10.value_or(0.0));
    rejection_ok = rejection_ok && adv10.back() >= adv0.back() - kRejectionSlack;
  }
  const double gain = mean(flss_ns) - mean(plain_ns);
  c.check("(a) FLSS Acc_adv_NS under PGD-100 beats undefended by >= 20 points", gain >= kRequiredNsGain,
          "FLSS " + list(flss_ns) + ", undefended " + list(plain_ns) + ", mean gain " + num(gain) + " points", "8a");
  c.check("(b) Acc_adv_10 >= Acc_adv_0 - 1 on every seed", rejection_ok,
          "Acc_adv_10 " + list(adv10) + ", Acc_adv_0 " + list(adv0), "8b");
  c.check("(c) FLSS Acc_adv_10 >= confidence-thresholded PGD-AT", mean(adv10) >= mean(at10),
          "ensemble {clean, pgd, pgd_cw, a1, ra1}; FLSS " + list(adv10) + " (mean " + num(mean(adv10), 4) +
              "), PGD-AT " + list(at10) + " (mean " + num(mean(at10), 4) + ")",
          "8c");
  c.check("training and evaluation runtime < 15 min", d.seconds < kDeskBudgetSeconds, num(d.seconds) + " s", "8d");
  return c;
}

// --- criterion 9 -----------------------------------------------------------------

struct FgsmRise {
  std::size_t pairs = 0, rising = 0, small_pairs = 0, small_rising = 0;
  double all() const { return static_cast<double>(rising) / static_cast<double>(pairs); }
  double small() const { return static_cast<double>(small_rising) / static_cast<double>(small_pairs); }
};

FgsmRise fgsm_rise(const Desk& d, ModelCheckpoint DeskSeed::*which, const std::vector<double>& grid) {
  FgsmRise out;
  for (const auto& s : d.seeds) {
    const ModelParams& model = (s.*which).params;
    for (std::size_t i = 0; i < s.test.size(); ++i) {
      const int y = s.test.labels[i];
      double prev = 0;
      for (std::size_t g = 0; g < grid.size(); ++g) {
        AttackSpec spec;
        spec.delta = grid[g];
        const Vector x = fgsm(model, s.test.inputs[i], y, spec).x_adv;
        const double loss = softmax_ce(forward_logits(model, x, NoiseVector()), y).loss;
        if (g > 0) {
          ++out.pairs;
          out.rising += loss >= prev;
          if (grid[g] <= kMaskingDelta) {
            ++out.small_pairs;
            out.small_rising += loss >= prev;
          }
        }
        prev = loss;
      }
    }
  }
  return out;
}

Criterion criterion_masking() {
  Criterion c(9, "gradient-masking sanity checks");
  const Desk& d = desk();

  std::vector<double> pgd7;
  for (const auto& s : d.seeds) {
    AttackSpec spec;
    spec.delta = kMaskingDelta;
    spec.steps = 7;
    spec.seed = 11;
    pgd7.push_back(ns_robust_accuracy(s.flss.params, s.test.inputs, s.test.labels, spec).adv);
  }
  const double worst = *std::max_element(pgd7.begin(), pgd7.end());
  c.check("PGD-7 NS accuracy <= 1% at delta 0.5", worst <= kMaskingMaxAccuracy, "seeds 0/1/2: " + list(pgd7) + " %",
          "9a");

  const std::vector<double> grid{0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0};
  const FgsmRise flss_rise = fgsm_rise(d, &DeskSeed::flss, grid);
  const FgsmRise plain_rise = fgsm_rise(d, &DeskSeed::undefended, grid);
  c.check("FGSM loss non-decreasing in delta", flss_rise.all() >= kFgsmMonotoneFraction,
          num(100 * flss_rise.all(), 4) + "% of " + std::to_string(flss_rise.pairs) +
              " consecutive pairs on the grid 0..1; pairs with delta <= 0.5: " + num(100 * flss_rise.small(), 4) +
              "%; undefended model on the full grid: " + num(100 * plain_rise.all(), 4) + "%",
          "9b");

  std::map<std::string, std::vector<double>> acc;
  for (const auto& s : d.seeds) {
    EvalOptions opts = desk_options({"clean", "pgd", "eot:10", "eot:50", "eot:100"});
    opts.ns_metrics = false;
    const auto out = evaluate_model(s.flss, s.test, opts);
    for (const auto& row : out.report.per_attack) acc[row.attack_id].push_back(row.accuracy_accepted.value_or(0.0));
  }
  const double base = mean(acc["pgd"]);
  double widest = 0;
  std::string detail = "accepted accuracy, mean over seeds: pgd " + num(base, 4);
  for (const char* eot : {"eot:10", "eot:50", "eot:100"}) {
    widest = std::max(widest, std::abs(mean(acc[eot]) - base));
    detail += ", " + std::string(eot) + " " + num(mean(acc[eot]), 4);
  }
  c.check("EOT-{10,50,100} within 3 points of PGD", widest <= kEotWindow, detail, "9c");
  return c;
}

// --- criterion 10 ----------------------------------------------------------------

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Criterion criterion_determinism() {
  Criterion c(10, "determinism and attack-budget stability");
  const DeskSeed& s = desk().seeds.front();
  const auto dir = std::filesystem::temp_directory_path() / ("flss_acceptance_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  save_checkpoint((dir / "flss.json").string(), s.flss);

  EvaluateCommand cmd;
  cmd.checkpoint = (dir / "flss.json").string();
  cmd.data = {"two_moons:n=2000,noise=0.05,seed=0", "test", 0};
  cmd.options = desk_options({"clean", "pgd", "a1", "ra1"});
  std::ostringstream out, err;
  cmd.out_dir = (dir / "run1").string();
  const int rc1 = cmd_evaluate(cmd, out, err);
  cmd.out_dir = (dir / "run2").string();
  const int rc2 = cmd_evaluate(cmd, out, err);
  bool same = rc1 == kExitOk && rc2 == kExitOk;
  std::size_t bytes = 0;
  for (const char* name : {"report.json", "predictions.csv", "predictions_ns.csv"}) {
    const std::string a = slurp(dir / "run1" / name), b = slurp(dir / "run2" / name);
    same = same && !a.empty() && a == b;
    bytes += a.size();
  }
  std::filesystem::remove_all(dir);
  c.check("cmd_evaluate reruns are byte-identical", same,
          "report.json, predictions.csv, predictions_ns.csv (" + std::to_string(bytes) + " bytes)" +
              (err.str().empty() ? "" : ", stderr: " + err.str()));

  auto acc10 = [&](int steps, int restarts) {
    EvalOptions opts = desk_options({"clean", "pgd"});
    opts.steps = steps;
    opts.restarts = restarts;
    opts.ns_metrics = false;
    return evaluate_model(s.flss, s.test, opts).report.acc_adv_10.value_or(0.0);
  };
  const double base = acc10(100, 1), long_run = acc10(1000, 1), restarts = acc10(100, 10);
  c.check("1000-step PGD shifts Acc_adv_10 by <= 0.5", std::abs(long_run - base) <= kBudgetShiftTol,
          "100 steps " + num(base, 4) + ", 1000 steps " + num(long_run, 4));
  c.check("10-restart PGD shifts Acc_adv_10 by <= 0.5", std::abs(restarts - base) <= kBudgetShiftTol,
          "1 restart " + num(base, 4) + ", 10 restarts " + num(restarts, 4));
  return c;
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  int unexpected = 0, passed = 0;
  auto run = [&](int id, Criterion (*fn)()) {
    try {
      const Criterion c = fn();
      unexpected += c.report(std::cout);
      passed += c.pass();
    } catch (const std::exception& e) {
      std::cout << "criterion " << id << ": FAIL  aborted by an exception: " << e.what() << '\n';
      ++unexpected;
    }
  };
  run(1, criterion_gradients);
  run(2, criterion_kl);
  run(3, criterion_reparameterization);
  run(4, criterion_attack_feasibility);
  run(5, criterion_metrics);
  run(6, criterion_calibration);
  run(7, criterion_binomial);
  run(8, criterion_desk);
  run(9, criterion_masking);
  run(10, criterion_determinism);
  std::cout << passed << " of 10 criteria PASS; " << unexpected << " failing checks outside the known gaps; total "
            << num(seconds_since(t0)) << " s\n";
  return unexpected == 0 ? 0 : 1;
}
