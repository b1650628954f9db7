#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "saematch/error.hpp"
#include "saematch/matrix.hpp"

namespace saematch {

/// One layer's JumpReLU sparse autoencoder.
///
/// Shapes: w_enc is F x d (one row per feature), w_dec is d x F (one column per
/// feature), b_enc and theta have length F, b_dec has length d. Unfolded SAEs
/// need strictly positive thresholds; folded SAEs have every threshold equal
/// to exactly 1.
template <std::floating_point T>
struct BasicSaeParams {
  Matrix<T> w_enc;
  std::vector<T> b_enc;
  Matrix<T> w_dec;
  std::vector<T> b_dec;
  std::vector<T> theta;
  int layer_id = 0;
  bool folded = false;

  std::size_t num_features() const noexcept { return w_enc.rows(); }
  std::size_t hidden_dim() const noexcept { return w_enc.cols(); }

  /// Throws on inconsistent shapes or thresholds that break the folded /
  /// unfolded invariant.
  void validate() const {
    const std::size_t F = w_enc.rows();
    const std::size_t d = w_enc.cols();
    require(F >= 1 && d >= 1, ErrorKind::dimension, "SAE needs F >= 1 and d >= 1");
    require(w_dec.rows() == d && w_dec.cols() == F, ErrorKind::dimension,
            "w_dec must be d x F");
    require(b_enc.size() == F, ErrorKind::dimension, "b_enc must have length F");
    require(b_dec.size() == d, ErrorKind::dimension, "b_dec must have length d");
    require(theta.size() == F, ErrorKind::dimension, "theta must have length F");
    require(layer_id >= 0, ErrorKind::domain, "layer_id must be non-negative");
    for (std::size_t i = 0; i < F; ++i) {
      if (folded) {
        require(theta[i] == T(1), ErrorKind::invalid_theta,
                "folded SAE must have theta == 1 (feature " + std::to_string(i) + ")");
      } else {
        require(std::isfinite(theta[i]) && theta[i] > T(0), ErrorKind::invalid_theta,
                "unfolded SAE needs theta > 0 (feature " + std::to_string(i) + ")");
      }
    }
  }

  template <std::floating_point U>
  BasicSaeParams<U> cast() const {
    return {w_enc.template cast<U>(), cast_vector<U>(b_enc), w_dec.template cast<U>(),
            cast_vector<U>(b_dec), cast_vector<U>(theta), layer_id, folded};
  }

  friend bool operator==(const BasicSaeParams&, const BasicSaeParams&) = default;
};

using SaeParams = BasicSaeParams<double>;

enum class ActivationKind { hidden, feature, logits };

/// T tokens by n dims of hidden states, feature activations, or logits.
struct ActivationBatch {
  Matrix<double> data;
  ActivationKind kind = ActivationKind::hidden;
  int layer_id = 0;

  std::size_t tokens() const noexcept { return data.rows(); }
  std::size_t width() const noexcept { return data.cols(); }

  void validate() const {
    require(data.rows() >= 1, ErrorKind::dimension, "activation batch needs T >= 1");
    for (double v : data.flat())
      require(std::isfinite(v), ErrorKind::domain, "activation batch has non-finite entries");
  }

  /// Copy without the first `n` tokens (e.g. a BOS position).
  ActivationBatch drop_first(std::size_t n) const {
    require(n < tokens(), ErrorKind::dimension, "cannot drop every token");
    Matrix<double> out(tokens() - n, width());
    for (std::size_t t = n; t < tokens(); ++t)
      std::copy(data.row(t).begin(), data.row(t).end(), out.row(t - n).begin());
    return {std::move(out), kind, layer_id};
  }
};

/// z * H(z - theta) with H(0) = 0: a component survives only when it is
/// strictly above its threshold.
template <std::floating_point T>
std::vector<T> jump_relu(std::span<const T> z, std::span<const T> theta) {
  require(z.size() == theta.size(), ErrorKind::dimension, "jump_relu: length mismatch");
  std::vector<T> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] > theta[i] ? z[i] : T(0);
  return out;
}

template <std::floating_point T>
std::vector<T> jump_relu(const std::vector<T>& z, const std::vector<T>& theta) {
  return jump_relu(std::span<const T>(z), std::span<const T>(theta));
}

template <std::floating_point T>
std::vector<T> encode(const BasicSaeParams<T>& sae, std::span<const T> x) {
  const std::size_t F = sae.num_features();
  const std::size_t d = sae.hidden_dim();
  require(x.size() == d, ErrorKind::dimension,
          "encode: input has length " + std::to_string(x.size()) + ", expected " +
              std::to_string(d));
  for (T v : x) require(std::isfinite(v), ErrorKind::domain, "encode: non-finite input");
  std::vector<T> f(F);
  for (std::size_t i = 0; i < F; ++i) {
    const auto row = sae.w_enc.row(i);
    T z = sae.b_enc[i];
    for (std::size_t k = 0; k < d; ++k) z += row[k] * x[k];
    f[i] = z > sae.theta[i] ? z : T(0);
  }
  return f;
}

template <std::floating_point T>
std::vector<T> encode(const BasicSaeParams<T>& sae, const std::vector<T>& x) {
  return encode(sae, std::span<const T>(x));
}

/// w_dec * f + b_dec. Inactive (zero) features are skipped, so the sum runs
/// over active features in ascending index order.
template <std::floating_point T>
std::vector<T> decode(const BasicSaeParams<T>& sae, std::span<const T> f) {
  const std::size_t F = sae.num_features();
  const std::size_t d = sae.hidden_dim();
  require(f.size() == F, ErrorKind::dimension,
          "decode: feature vector has length " + std::to_string(f.size()) + ", expected " +
              std::to_string(F));
  std::vector<T> x(sae.b_dec);
  for (std::size_t i = 0; i < F; ++i) {
    if (f[i] == T(0)) continue;
    for (std::size_t k = 0; k < d; ++k) x[k] += sae.w_dec(k, i) * f[i];
  }
  return x;
}

template <std::floating_point T>
std::vector<T> decode(const BasicSaeParams<T>& sae, const std::vector<T>& f) {
  return decode(sae, std::span<const T>(f));
}

template <std::floating_point T>
std::vector<T> reconstruct(const BasicSaeParams<T>& sae, std::span<const T> x) {
  const auto f = encode(sae, x);
  return decode(sae, std::span<const T>(f));
}

template <std::floating_point T>
std::vector<T> reconstruct(const BasicSaeParams<T>& sae, const std::vector<T>& x) {
  return reconstruct(sae, std::span<const T>(x));
}

/// Moves the JumpReLU thresholds into the weights: encoder row i and b_enc[i]
/// are divided by theta[i], decoder column i is multiplied by theta[i], and
/// theta becomes all ones. Because jump_relu(c z, c theta) = c jump_relu(z,
/// theta) for c > 0, the reconstruction is unchanged.
template <std::floating_point T>
BasicSaeParams<T> fold_params(const BasicSaeParams<T>& sae) {
  require(!sae.folded, ErrorKind::state, "SAE is already folded");
  sae.validate();
  BasicSaeParams<T> out = sae;
  const std::size_t F = sae.num_features();
  const std::size_t d = sae.hidden_dim();
  for (std::size_t i = 0; i < F; ++i) {
    const T th = sae.theta[i];
    for (T& w : out.w_enc.row(i)) w /= th;
    out.b_enc[i] /= th;
    for (std::size_t k = 0; k < d; ++k) out.w_dec(k, i) *= th;
    out.theta[i] = T(1);
  }
  out.folded = true;
  return out;
}

/// Inverse of fold_params for a chosen positive threshold vector.
template <std::floating_point T>
BasicSaeParams<T> unfold_params(const BasicSaeParams<T>& folded, std::span<const T> theta) {
  require(folded.folded, ErrorKind::state, "unfold_params needs a folded SAE");
  const std::size_t F = folded.num_features();
  const std::size_t d = folded.hidden_dim();
  require(theta.size() == F, ErrorKind::dimension, "unfold_params: theta length mismatch");
  BasicSaeParams<T> out = folded;
  for (std::size_t i = 0; i < F; ++i) {
    const T th = theta[i];
    require(std::isfinite(th) && th > T(0), ErrorKind::invalid_theta,
            "unfold_params: theta must be positive");
    for (T& w : out.w_enc.row(i)) w *= th;
    out.b_enc[i] *= th;
    for (std::size_t k = 0; k < d; ++k) out.w_dec(k, i) /= th;
    out.theta[i] = th;
  }
  out.folded = false;
  return out;
}

/// Relabels features: feature i of `sae` becomes feature map[i] of the result.
template <std::floating_point T>
BasicSaeParams<T> permute_features(const BasicSaeParams<T>& sae,
                                   std::span<const std::size_t> map) {
  const std::size_t F = sae.num_features();
  const std::size_t d = sae.hidden_dim();
  require(map.size() == F, ErrorKind::dimension, "permute_features: map length mismatch");
  BasicSaeParams<T> out = sae;
  std::vector<bool> seen(F, false);
  for (std::size_t i = 0; i < F; ++i) {
    const std::size_t j = map[i];
    require(j < F && !seen[j], ErrorKind::domain, "permute_features: map is not a bijection");
    seen[j] = true;
    std::copy(sae.w_enc.row(i).begin(), sae.w_enc.row(i).end(), out.w_enc.row(j).begin());
    out.b_enc[j] = sae.b_enc[i];
    for (std::size_t k = 0; k < d; ++k) out.w_dec(k, j) = sae.w_dec(k, i);
    out.theta[j] = sae.theta[i];
  }
  return out;
}

struct L0Stats {
  double mean_l0 = 0.0;
  std::vector<std::size_t> per_token_l0;
};

/// Count of strictly positive entries per token and their mean.
inline L0Stats l0_stats(const ActivationBatch& features) {
  require(features.kind == ActivationKind::feature, ErrorKind::type,
          "l0_stats needs feature activations");
  require(features.tokens() >= 1, ErrorKind::dimension, "l0_stats needs T >= 1");
  L0Stats out;
  out.per_token_l0.resize(features.tokens());
  std::size_t total = 0;
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    std::size_t n = 0;
    for (double v : features.data.row(t)) n += v > 0.0 ? 1 : 0;
    out.per_token_l0[t] = n;
    total += n;
  }
  out.mean_l0 = static_cast<double>(total) / static_cast<double>(features.tokens());
  return out;
}

/// Applies `encode` to every token of a hidden-state batch.
inline ActivationBatch encode_batch(const SaeParams& sae, const ActivationBatch& hidden) {
  require(hidden.kind == ActivationKind::hidden, ErrorKind::type,
          "encode_batch needs hidden states");
  Matrix<double> out(hidden.tokens(), sae.num_features());
  for (std::size_t t = 0; t < hidden.tokens(); ++t) {
    const auto f = encode(sae, hidden.data.row(t));
    std::copy(f.begin(), f.end(), out.row(t).begin());
  }
  return {std::move(out), ActivationKind::feature, sae.layer_id};
}

inline ActivationBatch reconstruct_batch(const SaeParams& sae, const ActivationBatch& hidden) {
  require(hidden.kind == ActivationKind::hidden, ErrorKind::type,
          "reconstruct_batch needs hidden states");
  Matrix<double> out(hidden.tokens(), sae.hidden_dim());
  for (std::size_t t = 0; t < hidden.tokens(); ++t) {
    const auto x = reconstruct(sae, hidden.data.row(t));
    std::copy(x.begin(), x.end(), out.row(t).begin());
  }
  return {std::move(out), ActivationKind::hidden, sae.layer_id};
}

}  // namespace saematch
