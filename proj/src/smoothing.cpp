#include "flss/smoothing.hpp"

#include <algorithm>
#include <cmath>

#include "flss/random.hpp"

namespace flss {

NoiseBank NoiseBank::sample(int n, Index latent_dim, std::uint64_t seed) {
  if (n < 1) throw ValueError("NoiseBank: N must be at least 1");
  NoiseBank bank;
  bank.seed = seed;
  bank.vectors.reserve(static_cast<std::size_t>(n));
  Rng rng(derive_seed(seed, {0xba}));
  for (int i = 0; i < n; ++i) bank.vectors.push_back(standard_normal<double>(latent_dim, rng));
  return bank;
}

int VoteHistogram::total() const {
  int t = 0;
  for (int c : counts) t += c;
  return t;
}

SmoothingMode parse_smoothing_mode(std::string_view name) {
  if (name == "flss_vote") return SmoothingMode::flss_vote;
  if (name == "flss_ns") return SmoothingMode::flss_ns;
  if (name == "confidence_threshold") return SmoothingMode::confidence_threshold;
  if (name == "input_noise_vote") return SmoothingMode::input_noise_vote;
  if (name == "gaussian_rs_vote") return SmoothingMode::gaussian_rs_vote;
  throw ValueError("unknown smoothing mode: " + std::string(name));
}

std::string to_string(SmoothingMode mode) {
  switch (mode) {
    case SmoothingMode::flss_vote: return "flss_vote";
    case SmoothingMode::flss_ns: return "flss_ns";
    case SmoothingMode::confidence_threshold: return "confidence_threshold";
    case SmoothingMode::input_noise_vote: return "input_noise_vote";
    case SmoothingMode::gaussian_rs_vote: return "gaussian_rs_vote";
  }
  return "unknown";
}

void SmoothingConfig::validate() const {
  if (n < 1) throw ValueError("SmoothingConfig: N must be at least 1");
  if (threshold_f < 0 || threshold_f >= n) throw ValueError("SmoothingConfig: threshold_f must lie in [0, N)");
  if (!(sd_scale > 0)) throw ValueError("SmoothingConfig: sd_scale must be positive");
}

int argmax(const Vector& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int>(best);
}

VoteHistogram tally_votes(std::span<const int> votes, Index num_classes) {
  VoteHistogram h;
  h.counts.assign(static_cast<std::size_t>(num_classes), 0);
  for (int v : votes) {
    if (v < 0 || v >= num_classes) throw ValueError("tally_votes: class out of range");
    ++h.counts[static_cast<std::size_t>(v)];
  }
  std::size_t top = 0;
  for (std::size_t c = 1; c < h.counts.size(); ++c)
    if (h.counts[c] > h.counts[top]) top = c;
  h.n_a = h.counts.empty() ? 0 : h.counts[top];
  for (std::size_t c = 0; c < h.counts.size(); ++c)
    if (c != top) h.n_b = std::max(h.n_b, h.counts[c]);
  return h;
}

Decision decide(const VoteHistogram& hist, int threshold_f) {
  Decision d;
  std::size_t top = 0;
  for (std::size_t c = 1; c < hist.counts.size(); ++c)
    if (hist.counts[c] > hist.counts[top]) top = c;
  d.predicted = static_cast<int>(top);
  d.vote_count = hist.counts.empty() ? 0 : hist.counts[top];
  d.threshold_f = threshold_f;
  d.accepted = d.vote_count >= threshold_f + 1;
  const int total = hist.total();
  d.confidence = total > 0 ? static_cast<double>(d.vote_count) / total : 0.0;
  return d;
}

std::pair<int, Vector> predict_ns(const ModelParams& model, const Vector& x) {
  Vector p = forward_ns(model, x);
  return {argmax(p), std::move(p)};
}

SmoothedPrediction predict_smoothed(const ModelParams& model, const Vector& x, const NoiseBank& bank,
                                    const SmoothingConfig& cfg) {
  cfg.validate();
  if (bank.size() != cfg.n) throw ValueError("predict_smoothed: noise bank size differs from N");
  const EncoderOutput enc = encode(model, x);
  std::vector<int> votes;
  votes.reserve(bank.vectors.size());
  for (const auto& eps : bank.vectors) votes.push_back(argmax(head_logits(model, reparameterize(enc, eps, cfg.sd_scale))));
  SmoothedPrediction out;
  out.histogram = tally_votes(votes, model.arch.num_classes);
  out.decision = decide(out.histogram, cfg.threshold_f);
  return out;
}

int calibrate_threshold_from_votes(std::span<const CleanVote> votes, int n, double max_frac) {
  if (votes.empty()) throw ValueError("calibrate_threshold: empty clean set");
  if (n < 1) throw ValueError("calibrate_threshold: N must be at least 1");
  if (!(max_frac >= 0 && max_frac <= 1)) throw ValueError("calibrate_threshold: max_frac must lie in [0, 1]");
  // correct_at[v] = number of correct samples whose top count is v.
  std::vector<long long> correct_at(static_cast<std::size_t>(n) + 1, 0);
  for (const auto& v : votes) {
    if (v.vote_count < 0 || v.vote_count > n) throw ValueError("calibrate_threshold: vote count out of range");
    if (v.correct) ++correct_at[static_cast<std::size_t>(v.vote_count)];
  }
  const double total = static_cast<double>(votes.size());
  long long rejected = 0;  // correct with vote_count <= f
  int best = 0;
  for (int f = 0; f < n; ++f) {
    rejected += correct_at[static_cast<std::size_t>(f)];
    if (static_cast<double>(rejected) / total > max_frac) break;  // monotone in f
    best = f;
  }
  return best;
}

int calibrate_threshold(const ModelParams& model, std::span<const Vector> inputs, std::span<const int> labels,
                        const NoiseBank& bank, const SmoothingConfig& cfg, double max_frac) {
  if (inputs.size() != labels.size()) throw ShapeError("calibrate_threshold: inputs and labels differ in length");
  if (cfg.mode == SmoothingMode::flss_ns || cfg.mode == SmoothingMode::confidence_threshold) {
    throw ValueError("calibrate_threshold: mode has no vote threshold");
  }
  std::vector<CleanVote> votes;
  votes.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto pred = predict(model, inputs[i], bank, cfg);
    votes.push_back({pred.decision.vote_count, pred.decision.predicted == labels[i]});
  }
  return calibrate_threshold_from_votes(votes, cfg.n, max_frac);
}

double calibrate_confidence_from_scores(std::span<const CleanScore> scores, double max_frac) {
  if (scores.empty()) throw ValueError("calibrate_confidence: empty clean set");
  std::vector<double> good;
  for (const auto& s : scores)
    if (s.correct) good.push_back(s.confidence);
  if (good.empty()) return 1.0;
  std::sort(good.begin(), good.end());
  const double total = static_cast<double>(scores.size());
  std::size_t allowed = 0;  // largest k with k / total <= max_frac
  while (allowed < good.size() && static_cast<double>(allowed + 1) / total <= max_frac) ++allowed;
  return good[std::min(allowed, good.size() - 1)];
}

double binomial_pvalue(int n_a, int n_b) {
  if (n_b < 0 || n_a < n_b) throw ValueError("binomial_pvalue: requires n_a >= n_b >= 0");
  const int n = n_a + n_b;
  if (n_a == n_b) return 1.0;
  // Upper tail P(X >= n_a) by the downward recurrence P(k-1) = P(k) k / (n-k+1).
  long double term = std::ldexp(1.0L, -n);
  long double tail = 0.0L;
  for (int k = n; k >= n_a; --k) {
    tail += term;
    term = term * k / (n - k + 1);
  }
  return static_cast<double>(std::min<long double>(1.0L, 2.0L * tail));
}

double alpha_bound(std::span<const VoteHistogram> histograms) {
  if (histograms.empty()) throw ValueError("alpha_bound: empty list");
  double worst = 0.0;
  for (const auto& h : histograms) worst = std::max(worst, binomial_pvalue(h.n_a, h.n_b));
  return worst;
}

std::vector<Vector> input_noise_offsets(Index input_dim, const SmoothingConfig& cfg) {
  const bool gaussian = cfg.mode == SmoothingMode::gaussian_rs_vote;
  const double magnitude = gaussian ? cfg.rs_sigma : cfg.input_noise_magnitude;
  const Vector zero = Vector::Zero(input_dim);
  auto kind = gaussian ? CorruptionKind::gaussian : CorruptionKind::uniform;
  return random_corruption(zero, kind, magnitude, cfg.n, derive_seed(cfg.input_noise_seed, {gaussian ? 2u : 1u}),
                           std::nullopt);
}

SmoothedPrediction predict_baseline(const ModelParams& model, const Vector& x, const SmoothingConfig& cfg) {
  cfg.validate();
  SmoothedPrediction out;
  switch (cfg.mode) {
    case SmoothingMode::flss_vote:
      throw ValueError("predict_baseline: flss_vote is not a baseline mode");
    case SmoothingMode::flss_ns:
    case SmoothingMode::confidence_threshold: {
      const auto [cls, p] = predict_ns(model, x);
      const double conf = p[cls];
      const bool accepted = cfg.mode == SmoothingMode::flss_ns || conf >= cfg.confidence_threshold;
      out.histogram.counts.assign(static_cast<std::size_t>(model.arch.num_classes), 0);
      out.histogram.counts[static_cast<std::size_t>(cls)] = 1;
      out.histogram.n_a = 1;
      out.decision.predicted = cls;
      out.decision.accepted = accepted;
      out.decision.vote_count = accepted ? 1 : 0;
      out.decision.threshold_f = 0;
      out.decision.confidence = conf;
      return out;
    }
    case SmoothingMode::input_noise_vote:
    case SmoothingMode::gaussian_rs_vote: {
      const auto offsets = input_noise_offsets(x.size(), cfg);
      std::vector<int> votes;
      votes.reserve(offsets.size());
      for (const auto& off : offsets) {
        Vector noisy = x + off;
        if (cfg.box) noisy = noisy.array().max(cfg.box->low).min(cfg.box->high);
        votes.push_back(argmax(forward_ns(model, noisy)));
      }
      out.histogram = tally_votes(votes, model.arch.num_classes);
      out.decision = decide(out.histogram, cfg.threshold_f);
      return out;
    }
  }
  throw ValueError("predict_baseline: unknown mode");
}

SmoothedPrediction predict(const ModelParams& model, const Vector& x, const NoiseBank& bank,
                           const SmoothingConfig& cfg) {
  if (cfg.mode == SmoothingMode::flss_vote) return predict_smoothed(model, x, bank, cfg);
  return predict_baseline(model, x, cfg);
}

Decision cascade(const Decision& detector_decision, const ModelParams& model, const Vector& x, const NoiseBank& bank,
                 const SmoothingConfig& cfg) {
  if (detector_decision.accepted) {
    SmoothingConfig ns = cfg;
    ns.mode = SmoothingMode::flss_ns;
    return predict_baseline(model, x, ns).decision;
  }
  return predict_smoothed(model, x, bank, cfg).decision;
}

}  // namespace flss
