#ifndef FLSS_NETCORE_HPP
#define FLSS_NETCORE_HPP

// Minimal differentiable numeric core: dense layers, activations and the
// closed-form losses used by the stochastic classifier. Everything is a pure
// function of its arguments; nothing here owns mutable state.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "flss/errors.hpp"

namespace flss {

using Index = Eigen::Index;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Probabilities are clamped to this floor before any log. Only entries that
/// underflowed to zero are affected.
inline constexpr double kProbabilityFloor = std::numeric_limits<double>::min();

enum class Activation { relu, identity };

/// weight is (out x in), bias is (out).
template <typename Scalar>
struct DenseLayer {
  Mat<Scalar> weight;
  Vec<Scalar> bias;

  DenseLayer() = default;
  DenseLayer(Index out, Index in) : weight(Mat<Scalar>::Zero(out, in)), bias(Vec<Scalar>::Zero(out)) {}
  DenseLayer(Mat<Scalar> w, Vec<Scalar> b) : weight(std::move(w)), bias(std::move(b)) {
    if (weight.rows() != bias.size()) throw ShapeError("DenseLayer: bias length must equal weight rows");
  }

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }

  /// Zero-valued layer with this layer's shape (gradient accumulator).
  DenseLayer zeros_like() const { return DenseLayer(out_dim(), in_dim()); }

  bool operator==(const DenseLayer& other) const {
    return weight.rows() == other.weight.rows() && weight.cols() == other.weight.cols() &&
           bias.size() == other.bias.size() && weight == other.weight && bias == other.bias;
  }
};

/// Everything dense_backward needs. Holds a pointer to the layer used in the
/// forward call, so it must not outlive that layer.
template <typename Scalar>
struct DenseCache {
  const DenseLayer<Scalar>* layer = nullptr;
  Vec<Scalar> input;
  Vec<Scalar> pre_activation;
  Activation activation = Activation::identity;
};

template <typename Scalar>
struct DenseForward {
  Vec<Scalar> output;
  DenseCache<Scalar> cache;
};

template <typename Scalar>
struct DenseGrads {
  DenseLayer<Scalar> layer;
  Vec<Scalar> input;
};

template <typename Scalar, typename Derived>
DenseForward<Scalar> dense_forward(const DenseLayer<Scalar>& layer, const Eigen::MatrixBase<Derived>& x,
                                   Activation activation) {
  if (x.size() != layer.in_dim()) throw ShapeError("dense_forward: input length does not match layer");
  DenseForward<Scalar> out;
  out.cache.layer = &layer;
  out.cache.input = x;
  out.cache.pre_activation.noalias() = layer.weight * out.cache.input;
  out.cache.pre_activation += layer.bias;
  out.cache.activation = activation;
  if (activation == Activation::relu) {
    out.output = out.cache.pre_activation.cwiseMax(Scalar(0));
  } else {
    out.output = out.cache.pre_activation;
  }
  return out;
}

namespace detail {

template <typename Scalar, typename Derived>
Vec<Scalar> activation_delta(const DenseCache<Scalar>& cache, const Eigen::MatrixBase<Derived>& upstream) {
  if (cache.layer == nullptr) throw ValueError("dense_backward: cache was not produced by dense_forward");
  if (upstream.size() != cache.layer->out_dim() || cache.pre_activation.size() != cache.layer->out_dim() ||
      cache.input.size() != cache.layer->in_dim()) {
    throw ShapeError("dense_backward: cache or upstream gradient does not match the layer");
  }
  if (cache.activation == Activation::identity) return upstream;
  // Subgradient of ReLU at exactly 0 is 0.
  return (cache.pre_activation.array() > Scalar(0)).select(upstream, Scalar(0));
}

}  // namespace detail

template <typename Scalar, typename Derived>
DenseGrads<Scalar> dense_backward(const DenseCache<Scalar>& cache, const Eigen::MatrixBase<Derived>& upstream) {
  const Vec<Scalar> delta = detail::activation_delta(cache, upstream);
  DenseGrads<Scalar> g;
  g.layer.weight.noalias() = delta * cache.input.transpose();
  g.layer.bias = delta;
  g.input.noalias() = cache.layer->weight.transpose() * delta;
  return g;
}

/// Accumulates parameter gradients into `accum`; returns the input gradient.
template <typename Scalar, typename Derived>
Vec<Scalar> dense_backward_accumulate(const DenseCache<Scalar>& cache, const Eigen::MatrixBase<Derived>& upstream,
                                      DenseLayer<Scalar>& accum) {
  const Vec<Scalar> delta = detail::activation_delta(cache, upstream);
  accum.weight.noalias() += delta * cache.input.transpose();
  accum.bias += delta;
  return cache.layer->weight.transpose() * delta;
}

/// Input gradient only; skips the outer product.
template <typename Scalar, typename Derived>
Vec<Scalar> dense_backward_input(const DenseCache<Scalar>& cache, const Eigen::MatrixBase<Derived>& upstream) {
  const Vec<Scalar> delta = detail::activation_delta(cache, upstream);
  return cache.layer->weight.transpose() * delta;
}

template <typename Derived>
Vec<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0) throw ValueError("softmax: empty logits");
  Vec<Scalar> p = (logits.array() - logits.maxCoeff()).exp();
  p /= p.sum();
  return p;
}

template <typename Derived>
Vec<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0) throw ValueError("log_softmax: empty logits");
  const Scalar m = logits.maxCoeff();
  const Scalar lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

template <typename Scalar>
struct LossAndGrad {
  Scalar loss;
  Vec<Scalar> grad;
};

/// Stable softmax cross-entropy; grad is with respect to the logits.
template <typename Derived>
LossAndGrad<typename Derived::Scalar> softmax_ce(const Eigen::MatrixBase<Derived>& logits, int label) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0) throw ValueError("softmax_ce: empty logits");
  if (label < 0 || label >= logits.size()) throw ValueError("softmax_ce: label out of range");
  const Vec<Scalar> logp = log_softmax(logits);
  LossAndGrad<Scalar> out;
  out.loss = -logp[label];
  out.grad = logp.array().exp();
  out.grad[label] -= Scalar(1);
  return out;
}

template <typename Scalar>
struct CategoricalKl {
  Scalar value;
  Vec<Scalar> grad_p_logits;
  Vec<Scalar> grad_q_logits;
};

/// KL(p || q) for two softmax outputs. Gradients are with respect to the
/// logits that produced p and q respectively.
template <typename DerivedP, typename DerivedQ>
CategoricalKl<typename DerivedP::Scalar> categorical_kl(const Eigen::MatrixBase<DerivedP>& p,
                                                        const Eigen::MatrixBase<DerivedQ>& q) {
  using Scalar = typename DerivedP::Scalar;
  if (p.size() != q.size()) throw ShapeError("categorical_kl: length mismatch");
  const Scalar floor = Scalar(kProbabilityFloor);
  const Vec<Scalar> log_ratio =
      p.array().max(floor).log() - q.array().max(floor).log();
  CategoricalKl<Scalar> out;
  out.value = (p.array() * log_ratio.array()).sum();
  out.grad_p_logits = p.array() * (log_ratio.array() - out.value);
  out.grad_q_logits = q - p;
  return out;
}

template <typename Scalar>
struct GaussianKlStd {
  Scalar value;
  Vec<Scalar> grad_mu;
  Vec<Scalar> grad_logvar;
};

/// KL(N(mu, exp(logvar)) || N(0, I)) for a diagonal Gaussian.
template <typename DerivedM, typename DerivedL>
GaussianKlStd<typename DerivedM::Scalar> gaussian_kl_std(const Eigen::MatrixBase<DerivedM>& mu,
                                                         const Eigen::MatrixBase<DerivedL>& logvar) {
  using Scalar = typename DerivedM::Scalar;
  if (mu.size() != logvar.size()) throw ShapeError("gaussian_kl_std: length mismatch");
  const Vec<Scalar> var = logvar.array().exp();
  GaussianKlStd<Scalar> out;
  out.value = Scalar(0.5) * (var.array() + mu.array().square() - Scalar(1) - logvar.array()).sum();
  out.grad_mu = mu;
  out.grad_logvar = Scalar(0.5) * (var.array() - Scalar(1));
  return out;
}

template <typename Scalar>
struct GaussianKlPair {
  Scalar value;
  Vec<Scalar> grad_mu_p;
  Vec<Scalar> grad_logvar_p;
  Vec<Scalar> grad_mu_q;
  Vec<Scalar> grad_logvar_q;
};

/// KL(N(mu_p, exp(logvar_p)) || N(mu_q, exp(logvar_q))), diagonal covariances.
template <typename D1, typename D2, typename D3, typename D4>
GaussianKlPair<typename D1::Scalar> gaussian_kl_pair(const Eigen::MatrixBase<D1>& mu_p,
                                                     const Eigen::MatrixBase<D2>& logvar_p,
                                                     const Eigen::MatrixBase<D3>& mu_q,
                                                     const Eigen::MatrixBase<D4>& logvar_q) {
  using Scalar = typename D1::Scalar;
  const Index n = mu_p.size();
  if (logvar_p.size() != n || mu_q.size() != n || logvar_q.size() != n) {
    throw ShapeError("gaussian_kl_pair: length mismatch");
  }
  const auto ratio = (logvar_p - logvar_q).array().exp();
  const Vec<Scalar> diff = mu_q - mu_p;
  const auto inv_var_q = (-logvar_q.array()).exp();
  const Vec<Scalar> scaled_sq = diff.array().square() * inv_var_q;
  GaussianKlPair<Scalar> out;
  out.value = Scalar(0.5) * (ratio + scaled_sq.array() - Scalar(1) + logvar_q.array() - logvar_p.array()).sum();
  out.grad_mu_p = -diff.array() * inv_var_q;
  out.grad_mu_q = diff.array() * inv_var_q;
  out.grad_logvar_p = Scalar(0.5) * (ratio - Scalar(1));
  out.grad_logvar_q = Scalar(0.5) * (Scalar(1) - ratio - scaled_sq.array());
  return out;
}

/// Plain SGD (no momentum) with L2 decay on weights: w <- w - lr (g + wd w).
/// Biases are not decayed.
template <typename Scalar>
std::vector<DenseLayer<Scalar>> sgd_step(std::vector<DenseLayer<Scalar>> params,
                                         const std::vector<DenseLayer<Scalar>>& grads, Scalar lr,
                                         Scalar weight_decay) {
  if (lr < 0 || weight_decay < 0) throw ValueError("sgd_step: lr and weight_decay must be non-negative");
  if (params.size() != grads.size()) throw ShapeError("sgd_step: gradient set does not mirror parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& g = grads[i];
    if (g.weight.rows() != p.weight.rows() || g.weight.cols() != p.weight.cols() || g.bias.size() != p.bias.size()) {
      throw ShapeError("sgd_step: gradient shape mismatch");
    }
    if (lr == 0) continue;
    p.weight -= lr * (g.weight + weight_decay * p.weight);
    p.bias -= lr * g.bias;
  }
  return params;
}

/// Triangular cyclic schedule: 0 -> lr_max over the first half, lr_max -> 0
/// over the second half, reaching 0 at the last step.
template <typename Scalar>
Scalar cyclic_lr(long long step, long long total_steps, Scalar lr_max) {
  if (total_steps <= 0) throw ValueError("cyclic_lr: total_steps must be positive");
  if (step < 0 || step >= total_steps) throw ValueError("cyclic_lr: step out of range");
  const Scalar half = Scalar(total_steps) / Scalar(2);
  const Scalar s = Scalar(step);
  if (s <= half) return lr_max * s / half;
  const Scalar tail = Scalar(total_steps - 1) - half;
  return lr_max * (Scalar(total_steps - 1) - s) / tail;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace flss

#endif  // FLSS_NETCORE_HPP
