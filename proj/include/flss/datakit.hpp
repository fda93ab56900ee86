#ifndef FLSS_DATAKIT_HPP
#define FLSS_DATAKIT_HPP

// Small datasets: 2-D synthetic generators and an IDX image loader.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "flss/stochclf.hpp"

namespace flss {

enum class Split : std::uint8_t { train, val, test };

Split parse_split(std::string_view name);
std::string to_string(Split split);

struct Dataset {
  std::vector<Vector> inputs;
  std::vector<int> labels;
  std::vector<Split> splits;
  std::vector<std::int64_t> ids;
  Index num_classes = 0;
  Index input_dim = 0;

  std::size_t size() const { return inputs.size(); }

  /// Samples tagged with the given split, ids preserved.
  Dataset subset(Split split) const;

  /// First n samples (or all, if fewer).
  Dataset head(std::size_t n) const;

  /// Throws ShapeError / ValueError on inconsistent fields.
  void validate() const;
};

/// Shuffled 80/10/10 split tags for n samples.
std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed);

/// Two interleaved unit half-circles; class 1 is the lower moon shifted to
/// (1, 0.5). Classes alternate so the counts differ by at most one.
Dataset two_moons(std::size_t n, double noise_sigma, std::uint64_t seed);

/// Isotropic Gaussian clusters, n_per_class around each center.
Dataset gaussian_blobs(std::size_t k_classes, std::size_t n_per_class, const std::vector<Vector>& centers,
                       double sigma, std::uint64_t seed);

/// IDX image/label pair (magic 0x00000803 / 0x00000801), pixels scaled to
/// [0, 1]. limit = 0 loads everything. Every sample is tagged test unless
/// assign_splits is applied afterwards.
Dataset load_idx_images(const std::string& images_path, const std::string& labels_path, std::size_t limit = 0);
Dataset read_idx(std::istream& images, std::istream& labels, std::size_t limit = 0);

/// CSV with header id,label,x0,...,x{d-1}. Split tags are not stored;
/// rows read back are tagged test. num_classes = 0 infers max label + 1.
void write_dataset_csv(std::ostream& out, const Dataset& data);
Dataset read_dataset_csv(std::istream& in, Index num_classes = 0);

}  // namespace flss

#endif  // FLSS_DATAKIT_HPP
