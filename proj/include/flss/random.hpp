#ifndef FLSS_RANDOM_HPP
#define FLSS_RANDOM_HPP

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace flss {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a master seed and a salt path,
/// e.g. (master, sample id, attack id).
inline std::uint64_t derive_seed(std::uint64_t master,
                                 std::initializer_list<std::uint64_t> salt) {
  std::uint64_t h = splitmix64(master);
  for (std::uint64_t s : salt) h = splitmix64(h ^ splitmix64(s + 0x632be59bd9b4e019ULL));
  return h;
}

/// Stable 64-bit FNV-1a, used to turn attack ids into salts.
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> standard_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<Scalar> dist(Scalar(0), Scalar(1));
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> uniform_vector(Eigen::Index n, Scalar low, Scalar high,
                                                        Rng& rng) {
  std::uniform_real_distribution<Scalar> dist(low, high);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

}  // namespace flss

#endif  // FLSS_RANDOM_HPP
