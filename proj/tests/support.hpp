#ifndef FLSS_TESTS_SUPPORT_HPP
#define FLSS_TESTS_SUPPORT_HPP

// Shared helpers for the test binaries: small random models and central
// finite differences.

#include <algorithm>
#include <cmath>
#include <functional>

#include "flss/random.hpp"
#include "flss/stochclf.hpp"

namespace flss::testing {

inline constexpr double kFdStep = 1e-6;
inline constexpr double kFdRelTol = 1e-5;

inline Architecture small_arch(Index input_dim = 3, Index classes = 3) {
  Architecture a;
  a.input_dim = input_dim;
  a.trunk = {8, 6};
  a.latent_dim = 4;
  a.head = {5};
  a.num_classes = classes;
  return a;
}

/// He-initialized model with random biases, so no unit sits at a ReLU kink
/// and the log-variance head is non-trivial.
inline ModelParams random_model(const Architecture& arch, std::uint64_t seed, double bias_scale = 0.3) {
  ModelParams m = ModelParams::initialize(arch, seed);
  Rng rng(derive_seed(seed, {0x7e57}));
  for (auto& layer : m.layers) layer.bias = bias_scale * standard_normal<double>(layer.bias.size(), rng);
  return m;
}

inline Vector random_vector(Index n, Rng& rng, double scale = 1.0) {
  return scale * standard_normal<double>(n, rng);
}

/// max |a - b| / max(|a|_inf, |b|_inf, floor).
inline double max_rel_error(const Vector& analytic, const Vector& numeric, double floor = 1e-4) {
  const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), floor});
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h = kFdStep) {
  Vector g(x.size());
  Vector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// Every parameter flattened layer by layer: weights (row-major) then bias.
inline Vector flatten(const std::vector<Layer>& layers) {
  Index n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  Vector out(n);
  Index k = 0;
  for (const auto& l : layers) {
    for (Index r = 0; r < l.weight.rows(); ++r)
      for (Index c = 0; c < l.weight.cols(); ++c) out[k++] = l.weight(r, c);
    for (Index i = 0; i < l.bias.size(); ++i) out[k++] = l.bias[i];
  }
  return out;
}

inline void unflatten(const Vector& flat, std::vector<Layer>& layers) {
  Index k = 0;
  for (auto& l : layers) {
    for (Index r = 0; r < l.weight.rows(); ++r)
      for (Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = flat[k++];
    for (Index i = 0; i < l.bias.size(); ++i) l.bias[i] = flat[k++];
  }
}

inline Vector fd_param_gradient(const std::function<double(const ModelParams&)>& f, const ModelParams& model,
                                double h = kFdStep) {
  ModelParams probe = model;
  return fd_gradient(
      [&](const Vector& theta) {
        unflatten(theta, probe.layers);
        return f(probe);
      },
      flatten(model.layers), h);
}

}  // namespace flss::testing

#endif  // FLSS_TESTS_SUPPORT_HPP
