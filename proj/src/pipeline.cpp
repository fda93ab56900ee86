#include "flss/pipeline.hpp"

#include <cmath>
#include <limits>
#include <ostream>

#include "flss/errors.hpp"
#include "flss/random.hpp"

namespace flss {

AttackId parse_attack_id(std::string_view text) {
  AttackId a;
  a.text = std::string(text);
  auto bad = [&](const std::string& why) { return ValueError("attack '" + a.text + "': " + why); };
  if (text == "clean") return a;
  if (text == "fgsm") {
    a.kind = AttackKind::fgsm;
  } else if (text == "pgd") {
    a.kind = AttackKind::pgd;
  } else if (text == "pgd_cw") {
    a.kind = AttackKind::pgd_cw;
  } else if (text.starts_with("eot:")) {
    a.kind = AttackKind::eot;
    try {
      std::size_t used = 0;
      const std::string k(text.substr(4));
      a.eot_k = std::stoi(k, &used);
      if (used != k.size() || a.eot_k < 1) throw std::invalid_argument("k");
    } catch (const std::exception&) {
      throw bad("expected eot:k with k >= 1");
    }
  } else if (text.size() == 2 && text[0] == 'a' && text[1] >= '1' && text[1] <= '6') {
    a.kind = AttackKind::feature;
    a.feature = static_cast<FeatureVariant>(text[1] - '1');
  } else if (text.size() == 3 && text.starts_with("ra") && text[2] >= '1' && text[2] <= '4') {
    a.kind = AttackKind::reject;
    a.reject = static_cast<RejectVariant>(text[2] - '1');
  } else if (text.starts_with("transfer:")) {
    a.kind = AttackKind::transfer;
    a.transfer_path = std::string(text.substr(9));
    if (a.transfer_path.empty()) throw bad("missing source checkpoint path");
  } else if (text.starts_with("noise:")) {
    a.kind = AttackKind::noise;
    const std::string_view rest = text.substr(6);
    const auto colon = rest.find(':');
    if (colon == std::string_view::npos) throw bad("expected noise:kind:magnitude");
    a.corruption = parse_corruption_kind(rest.substr(0, colon));
    try {
      std::size_t used = 0;
      const std::string mag(rest.substr(colon + 1));
      a.magnitude = std::stod(mag, &used);
      if (used != mag.size() || !(a.magnitude >= 0)) throw std::invalid_argument("magnitude");
    } catch (const std::exception&) {
      throw bad("magnitude must be a non-negative number");
    }
  } else {
    throw bad("unknown attack");
  }
  return a;
}

std::vector<AttackId> parse_attack_list(std::string_view comma_separated) {
  std::vector<AttackId> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = comma_separated.find(',', start);
    const auto item = comma_separated.substr(start, pos == std::string_view::npos ? pos : pos - start);
    if (!item.empty()) out.push_back(parse_attack_id(item));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (out.empty()) throw ValueError("empty attack list");
  return out;
}

// --- attack context -----------------------------------------------------------------

AttackContext::AttackContext(const ModelCheckpoint& target, const Dataset& pool, const EvalOptions& options,
                             const SmoothingConfig& smoothing, const NoiseBank& bank)
    : target_(target), pool_(pool), options_(options), smoothing_(smoothing), bank_(bank) {}

AttackSpec AttackContext::spec_for(const AttackId& attack, std::int64_t sample_id, bool ns_path) const {
  AttackSpec spec;
  spec.delta = options_.delta;
  spec.steps = options_.steps;
  spec.restarts = options_.restarts;
  spec.step_size = options_.step_size;
  spec.box = options_.box;
  spec.sd_scale = smoothing_.sd_scale;
  spec.seed = derive_seed(options_.seed, {static_cast<std::uint64_t>(sample_id), fnv1a(attack.text), ns_path ? 1u : 0u});
  if (!ns_path) {
    Rng rng(derive_seed(spec.seed, {0xf1}));
    spec.fixed_eps = standard_normal<double>(target_.params.arch.latent_dim, rng);
  }
  return spec;
}

const ModelParams& AttackContext::source_model(const AttackId& attack) const {
  auto it = transfer_sources_.find(attack.transfer_path);
  if (it == transfer_sources_.end()) {
    auto ckpt = std::make_shared<ModelCheckpoint>(load_checkpoint(attack.transfer_path));
    if (ckpt->params.arch.input_dim != target_.params.arch.input_dim ||
        ckpt->params.arch.num_classes != target_.params.arch.num_classes) {
      throw ValueError("transfer source " + attack.transfer_path + " has a different input or class count");
    }
    it = transfer_sources_.emplace(attack.transfer_path, std::move(ckpt)).first;
  }
  return it->second->params;
}

std::vector<Vector> AttackContext::guides_for(std::size_t i) const {
  const int label = pool_.labels[i];
  Rng rng(derive_seed(options_.seed, {static_cast<std::uint64_t>(pool_.ids[i]), 0x9d1}));
  std::vector<Vector> guides;
  for (Index c = 0; c < pool_.num_classes; ++c) {
    if (c == label) continue;
    std::vector<std::size_t> members;
    for (std::size_t j = 0; j < pool_.size(); ++j)
      if (pool_.labels[j] == c) members.push_back(j);
    if (members.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
    guides.push_back(pool_.inputs[members[pick(rng)]]);
  }
  if (guides.empty()) throw ValueError("guided attack: no samples of any other class to guide toward");
  return guides;
}

Vector AttackContext::generate(const AttackId& attack, std::size_t i, bool ns_path) const {
  const Vector& x = pool_.inputs[i];
  const int y = pool_.labels[i];
  const ModelParams& model = target_.params;
  const AttackSpec spec = spec_for(attack, pool_.ids[i], ns_path);
  switch (attack.kind) {
    case AttackKind::clean:
      return x;
    case AttackKind::fgsm:
      return fgsm(model, x, y, spec).x_adv;
    case AttackKind::pgd:
      return pgd(model, x, y, spec, LossKind::ce).x_adv;
    case AttackKind::pgd_cw:
      return pgd(model, x, y, spec, LossKind::cw_margin).x_adv;
    case AttackKind::eot: {
      if (ns_path) return pgd(model, x, y, spec, LossKind::ce).x_adv;
      AttackSpec eot = spec;
      eot.eot_k = attack.eot_k;
      return eot_pgd(model, x, y, eot, gaussian_sampler(model.arch.latent_dim, spec.seed)).x_adv;
    }
    case AttackKind::feature: {
      const FeatureVariant v = attack.feature;
      if (v == FeatureVariant::a1 || v == FeatureVariant::a2 || v == FeatureVariant::a5) {
        const auto guides = guides_for(i);
        return worst_guide_attack(model, x, y, v, spec, guides).result.x_adv;
      }
      AdaptiveInputs in;
      if (v == FeatureVariant::a6) {
        Rng rng(derive_seed(spec.seed, {0xa6}));
        std::uniform_int_distribution<int> pick(0, static_cast<int>(model.arch.num_classes) - 2);
        int t = pick(rng);
        if (t >= y) ++t;
        in.target = t;
        in.ensemble_eps = bank_.vectors;
      }
      return feature_attack(model, x, y, v, spec, in).x_adv;
    }
    case AttackKind::reject: {
      AdaptiveInputs in;
      if (attack.reject == RejectVariant::ra3) in.ensemble_eps = bank_.vectors;
      return reject_attack(model, x, y, attack.reject, spec, in).x_adv;
    }
    case AttackKind::transfer: {
      AttackSpec src = spec;
      src.fixed_eps = NoiseVector();
      return pgd(source_model(attack), x, y, src, LossKind::ce).x_adv;
    }
    case AttackKind::noise:
      return random_corruption(x, attack.corruption, attack.magnitude, 1, spec.seed, options_.box).front();
  }
  throw ValueError("unhandled attack kind");
}

// --- evaluation ---------------------------------------------------------------------

SmoothingConfig effective_smoothing(const ModelCheckpoint& ckpt, const EvalOptions& options) {
  SmoothingConfig cfg = ckpt.smoothing;
  if (options.mode) cfg.mode = *options.mode;
  if (options.sd_scale) cfg.sd_scale = *options.sd_scale;
  if (options.n) cfg.n = *options.n;
  cfg.box = options.box;
  if (cfg.threshold_f >= cfg.n) cfg.threshold_f = cfg.n - 1;
  cfg.validate();
  return cfg;
}

NoiseBank effective_bank(const ModelCheckpoint& ckpt, const EvalOptions& options) {
  if (!options.n && !options.bank_seed) return ckpt.bank;
  const int n = options.n.value_or(ckpt.bank.size());
  return NoiseBank::sample(n, ckpt.params.arch.latent_dim, options.bank_seed.value_or(ckpt.bank.seed));
}

namespace {

bool is_vote_mode(SmoothingMode mode) {
  return mode == SmoothingMode::flss_vote || mode == SmoothingMode::input_noise_vote ||
         mode == SmoothingMode::gaussian_rs_vote;
}

void calibrate(const ModelCheckpoint& ckpt, const Dataset& data, const NoiseBank& bank, const EvalOptions& options,
               SmoothingConfig& cfg) {
  switch (options.threshold) {
    case ThresholdPolicy::checkpoint:
      return;
    case ThresholdPolicy::fixed:
      if (options.fixed_f < 0 || options.fixed_f >= cfg.n) throw ValueError("fixed threshold must lie in [0, N)");
      cfg.threshold_f = options.fixed_f;
      return;
    case ThresholdPolicy::calibrate:
      break;
  }
  if (is_vote_mode(cfg.mode)) {
    cfg.threshold_f = calibrate_threshold(ckpt.params, data.inputs, data.labels, bank, cfg, options.max_frac);
  } else if (cfg.mode == SmoothingMode::confidence_threshold) {
    std::vector<CleanScore> scores;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto [cls, p] = predict_ns(ckpt.params, data.inputs[i]);
      scores.push_back({p[cls], cls == data.labels[i]});
    }
    cfg.confidence_threshold = calibrate_confidence_from_scores(scores, options.max_frac);
    cfg.threshold_f = 0;
  } else {
    cfg.threshold_f = 0;
  }
}

PredictionRecord make_record(std::int64_t id, const std::string& attack, int label, const Decision& d) {
  return {id, attack, label, d.predicted, d.accepted, d.vote_count};
}

double clean_correct_rejected(const std::vector<PredictionRecord>& records) {
  std::size_t total = 0, hit = 0;
  for (const auto& r : records) {
    if (r.attack_id != kCleanAttack) continue;
    ++total;
    if (r.correct() && !r.accepted) ++hit;
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace

EvalOutput evaluate_model(const ModelCheckpoint& ckpt, const Dataset& data, const EvalOptions& options) {
  data.validate();
  if (data.size() == 0) throw ValueError("evaluate: empty dataset");
  if (data.input_dim != ckpt.params.arch.input_dim || data.num_classes > ckpt.params.arch.num_classes) {
    throw ValueError("evaluate: dataset does not match the model");
  }
  const auto attacks = [&] {
    std::vector<AttackId> out;
    for (const auto& a : options.attacks) out.push_back(parse_attack_id(a));
    if (out.empty()) throw ValueError("evaluate: no attacks given");
    return out;
  }();

  EvalOutput out;
  out.smoothing = effective_smoothing(ckpt, options);
  const NoiseBank bank = effective_bank(ckpt, options);
  calibrate(ckpt, data, bank, options, out.smoothing);

  const bool attack_ns = out.smoothing.mode != SmoothingMode::flss_vote;
  AttackContext ctx(ckpt, data, options, out.smoothing, bank);
  for (const auto& attack : attacks) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Vector x_adv = ctx.generate(attack, i, attack_ns);
      const SmoothedPrediction pred = predict(ckpt.params, x_adv, bank, out.smoothing);
      out.records.push_back(make_record(data.ids[i], attack.text, data.labels[i], pred.decision));
      out.histograms.push_back(pred.histogram);
      if (options.ns_metrics) {
        const bool same_input = attack_ns || attack.kind == AttackKind::clean || attack.kind == AttackKind::noise ||
                                attack.kind == AttackKind::transfer;
        const Vector x_ns = same_input ? x_adv : ctx.generate(attack, i, true);
        const int cls = predict_ns(ckpt.params, x_ns).first;
        out.ns_records.push_back({data.ids[i], attack.text, data.labels[i], cls, true, 1});
      }
    }
  }
  out.report = compute_report(out.records, out.ns_records);
  out.clean_correct_rejected = clean_correct_rejected(out.records);
  if (is_vote_mode(out.smoothing.mode)) {
    std::vector<VoteHistogram> accepted;
    for (std::size_t k = 0; k < out.records.size(); ++k)
      if (out.records[k].accepted) accepted.push_back(out.histograms[k]);
    if (!accepted.empty()) out.alpha = alpha_bound(accepted);
  }
  return out;
}

Json eval_output_to_json(const EvalOutput& out, const EvalOptions& options) {
  Json j;
  j["settings"] = {{"mode", to_string(out.smoothing.mode)},
                   {"N", out.smoothing.n},
                   {"sd_scale", out.smoothing.sd_scale},
                   {"threshold_f", out.smoothing.threshold_f},
                   {"confidence_threshold", out.smoothing.confidence_threshold},
                   {"max_frac", options.max_frac},
                   {"delta", options.delta},
                   {"steps", options.steps},
                   {"restarts", options.restarts},
                   {"seed", options.seed}};
  j["clean_correct_rejected"] = out.clean_correct_rejected;
  j["alpha"] = out.alpha ? Json(*out.alpha) : Json(nullptr);
  j["report"] = report_to_json(out.report);
  return j;
}

// --- sweeps -------------------------------------------------------------------------

void SweepTable::write_csv(std::ostream& out) const {
  for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << ',';
      if (std::isnan(row[c])) out << "nan";
      else out << row[c];
    }
    out << '\n';
  }
}

namespace {

double or_nan(const std::optional<double>& v) {
  return v ? *v : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

SweepTable sweep_threshold(const ModelCheckpoint& ckpt, const Dataset& data, const EvalOptions& options) {
  EvalOptions opts = options;
  opts.threshold = ThresholdPolicy::fixed;
  opts.fixed_f = 0;
  opts.ns_metrics = false;
  const EvalOutput base = evaluate_model(ckpt, data, opts);
  if (!is_vote_mode(base.smoothing.mode)) throw ValueError("threshold sweep needs a vote mode");

  SweepTable table;
  table.columns = {"f", "MPR", "FC", "FW", "Acc_adv_10", "clean_rejected", "clean_correct_rejected"};
  std::vector<PredictionRecord> records = base.records;
  for (int f = 0; f < base.smoothing.n; ++f) {
    for (auto& r : records) r.accepted = r.vote_count >= f + 1;
    const EvalReport rep = compute_report(records);
    std::size_t clean = 0, clean_rej = 0;
    for (const auto& r : records) {
      if (r.attack_id != kCleanAttack) continue;
      ++clean;
      if (!r.accepted) ++clean_rej;
    }
    const double clean_rate = clean == 0 ? 0.0 : 100.0 * static_cast<double>(clean_rej) / static_cast<double>(clean);
    table.rows.push_back({static_cast<double>(f), rep.mpr, rep.fc, rep.fw, or_nan(rep.acc_adv_10), clean_rate,
                          100.0 * clean_correct_rejected(records)});
  }
  return table;
}

SweepTable sweep_n(const ModelCheckpoint& ckpt, const Dataset& data, const EvalOptions& options,
                   const std::vector<int>& ns, int repeats) {
  if (repeats < 1) throw ValueError("N sweep needs at least one repeat");
  SweepTable table;
  table.columns = {"N", "mean_Acc_adv_10", "var_Acc_adv_10", "min_Acc_adv_10", "max_Acc_adv_10"};
  for (int n : ns) {
    std::vector<double> values;
    for (int r = 0; r < repeats; ++r) {
      EvalOptions opts = options;
      opts.n = n;
      opts.bank_seed = derive_seed(ckpt.bank.seed, {static_cast<std::uint64_t>(r), 0x5e});
      opts.ns_metrics = false;
      values.push_back(or_nan(evaluate_model(ckpt, data, opts).report.acc_adv_10));
    }
    double mean = 0, var = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    table.rows.push_back({static_cast<double>(n), mean, var, *lo, *hi});
  }
  return table;
}

SweepTable sweep_delta(const ModelCheckpoint& ckpt, const Dataset& data, const EvalOptions& options,
                       const std::vector<double>& deltas) {
  SweepTable table;
  table.columns = {"delta", "pgd_ns_accuracy", "fgsm_ns_accuracy", "fgsm_mean_loss"};
  const ModelParams& model = ckpt.params;
  for (double delta : deltas) {
    if (!(delta >= 0)) throw ValueError("delta grid values must be non-negative");
    std::size_t pgd_ok = 0, fgsm_ok = 0;
    double loss = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      AttackSpec spec;
      spec.delta = delta;
      spec.steps = options.steps;
      spec.restarts = options.restarts;
      spec.step_size = options.step_size;
      spec.box = options.box;
      spec.seed = derive_seed(options.seed, {static_cast<std::uint64_t>(data.ids[i]), 0xde1});
      const int y = data.labels[i];
      if (predict_ns(model, pgd(model, data.inputs[i], y, spec).x_adv).first == y) ++pgd_ok;
      const Vector x_f = fgsm(model, data.inputs[i], y, spec).x_adv;
      if (predict_ns(model, x_f).first == y) ++fgsm_ok;
      loss += softmax_ce(forward_logits(model, x_f, NoiseVector()), y).loss;
    }
    const double n = static_cast<double>(data.size());
    table.rows.push_back({delta, 100.0 * pgd_ok / n, 100.0 * fgsm_ok / n, loss / n});
  }
  return table;
}

// --- cascade --------------------------------------------------------------------------

EvalOutput combine_with_detector(const std::vector<PredictionRecord>& detector_log, const ModelCheckpoint& ckpt,
                                 const Dataset& data, const EvalOptions& options) {
  data.validate();
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < data.size(); ++i) index.emplace(data.ids[i], i);

  EvalOutput out;
  out.smoothing = effective_smoothing(ckpt, options);
  out.smoothing.mode = SmoothingMode::flss_vote;
  const NoiseBank bank = effective_bank(ckpt, options);
  calibrate(ckpt, data, bank, options, out.smoothing);

  AttackContext ctx(ckpt, data, options, out.smoothing, bank);
  std::map<std::string, AttackId> parsed;
  for (const auto& rec : detector_log) {
    auto it = index.find(rec.sample_id);
    if (it == index.end()) throw FormatError("detector log names sample " + std::to_string(rec.sample_id) + " absent from the dataset");
    const std::size_t i = it->second;
    if (rec.true_label != data.labels[i]) {
      throw FormatError("detector log label differs from the dataset for sample " + std::to_string(rec.sample_id));
    }
    auto pit = parsed.find(rec.attack_id);
    if (pit == parsed.end()) pit = parsed.emplace(rec.attack_id, parse_attack_id(rec.attack_id)).first;
    const Vector x_adv = ctx.generate(pit->second, i, false);
    Decision detector;
    detector.predicted = rec.predicted;
    detector.accepted = rec.accepted;
    const Decision d = cascade(detector, ckpt.params, x_adv, bank, out.smoothing);
    out.records.push_back(make_record(rec.sample_id, rec.attack_id, rec.true_label, d));
  }
  out.report = compute_report(out.records);
  out.clean_correct_rejected = clean_correct_rejected(out.records);
  return out;
}

}  // namespace flss
