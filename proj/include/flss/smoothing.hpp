#ifndef FLSS_SMOOTHING_HPP
#define FLSS_SMOOTHING_HPP

// Test-time prediction: N-draw majority vote over latent samples,
// frequency-threshold rejection, threshold calibration, the binomial test on
// the top-two vote counts, input-noise and confidence baselines, and the
// detector cascade.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flss/attacks.hpp"
#include "flss/stochclf.hpp"

namespace flss {

/// N latent noise vectors drawn once and reused for every prediction.
struct NoiseBank {
  std::uint64_t seed = 0;
  std::vector<NoiseVector> vectors;

  int size() const { return static_cast<int>(vectors.size()); }

  /// Vectors are generated sequentially from seed, so a bank of size N is a
  /// prefix of any larger bank with the same seed.
  static NoiseBank sample(int n, Index latent_dim, std::uint64_t seed);
};

struct VoteHistogram {
  std::vector<int> counts;
  int n_a = 0;  // top class count
  int n_b = 0;  // runner-up count

  int total() const;
};

struct Decision {
  int predicted = 0;
  bool accepted = true;
  int vote_count = 0;
  int threshold_f = 0;
  /// Top-class softmax probability on paths that have one (NS, confidence).
  double confidence = 0.0;
};

enum class SmoothingMode { flss_vote, flss_ns, confidence_threshold, input_noise_vote, gaussian_rs_vote };

SmoothingMode parse_smoothing_mode(std::string_view name);
std::string to_string(SmoothingMode mode);

struct SmoothingConfig {
  int n = 100;
  double sd_scale = 2.0;
  int threshold_f = 0;
  SmoothingMode mode = SmoothingMode::flss_vote;
  /// Real-valued threshold for confidence_threshold mode.
  double confidence_threshold = 0.0;
  /// Half-width of U[-m, m] input noise (input_noise_vote).
  double input_noise_magnitude = 32.0 / 255.0;
  /// Gaussian input-noise sigma (gaussian_rs_vote).
  double rs_sigma = 0.25;
  /// Seed of the input-noise images shared by every prediction.
  std::uint64_t input_noise_seed = 0;
  std::optional<Box> box;

  void validate() const;
};

/// Builds a histogram from per-draw class predictions.
VoteHistogram tally_votes(std::span<const int> votes, Index num_classes);

/// Majority class with ties broken toward the smaller index; accepted iff
/// the top count is at least threshold_f + 1.
Decision decide(const VoteHistogram& hist, int threshold_f);

int argmax(const Vector& v);

std::pair<int, Vector> predict_ns(const ModelParams& model, const Vector& x);

struct SmoothedPrediction {
  VoteHistogram histogram;
  Decision decision;
};

/// One encoder pass, then bank.size() latent draws through the head.
SmoothedPrediction predict_smoothed(const ModelParams& model, const Vector& x, const NoiseBank& bank,
                                    const SmoothingConfig& cfg);

struct CleanVote {
  int vote_count = 0;
  bool correct = false;
};

/// Largest f in [0, n - 1] such that the fraction of samples that are
/// correct and have vote_count <= f stays within max_frac.
int calibrate_threshold_from_votes(std::span<const CleanVote> votes, int n, double max_frac);

int calibrate_threshold(const ModelParams& model, std::span<const Vector> inputs, std::span<const int> labels,
                        const NoiseBank& bank, const SmoothingConfig& cfg, double max_frac = 0.10);

struct CleanScore {
  double confidence = 0.0;
  bool correct = false;
};

/// Largest confidence cut (among observed confidences) such that correct
/// samples with confidence below it stay within max_frac.
double calibrate_confidence_from_scores(std::span<const CleanScore> scores, double max_frac);

/// Two-sided exact binomial test of n_a successes in n_a + n_b trials at p = 1/2.
double binomial_pvalue(int n_a, int n_b);

/// Max p-value over the given (accepted) histograms.
double alpha_bound(std::span<const VoteHistogram> histograms);

/// Input-noise copies used by the vote baselines; identical for every input
/// given the config seed.
std::vector<Vector> input_noise_offsets(Index input_dim, const SmoothingConfig& cfg);

/// Any mode except flss_vote. Vote baselines tally NS predictions of the
/// noisy copies exactly as predict_smoothed tallies latent draws.
SmoothedPrediction predict_baseline(const ModelParams& model, const Vector& x, const SmoothingConfig& cfg);

/// Mode dispatch, flss_vote included.
SmoothedPrediction predict(const ModelParams& model, const Vector& x, const NoiseBank& bank,
                           const SmoothingConfig& cfg);

/// Detector-accepted inputs take the NS prediction and stay accepted;
/// detector-rejected inputs go through the thresholded vote.
Decision cascade(const Decision& detector_decision, const ModelParams& model, const Vector& x, const NoiseBank& bank,
                 const SmoothingConfig& cfg);

}  // namespace flss

#endif  // FLSS_SMOOTHING_HPP
