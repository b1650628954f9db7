#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "saematch/assignment.hpp"
#include "saematch/error.hpp"
#include "saematch/matching.hpp"
#include "saematch/rng.hpp"
#include "saematch/sae.hpp"

namespace saematch {

/// Parameters of every synthetic scenario. All generators are pure functions
/// of this struct.
struct SynthSpec {
  std::size_t d = 32;
  std::size_t F = 256;
  std::uint64_t seed = 0;
  /// Noise std as a fraction of each feature's folded weight norm.
  double noise_sigma = 0.0;
  /// Thresholds are drawn log-uniform in [theta_lo, theta_hi].
  double theta_lo = 0.1;
  double theta_hi = 1.0;
  /// Hidden-norm multiplier between consecutive layers.
  double scale_growth = 1.0;
  std::size_t chain_len = 2;

  void validate() const {
    require(d >= 1 && F >= 1, ErrorKind::dimension, "synth: need d >= 1 and F >= 1");
    require(noise_sigma >= 0.0 && std::isfinite(noise_sigma), ErrorKind::domain,
            "synth: noise_sigma must be >= 0");
    require(theta_lo > 0.0 && theta_hi >= theta_lo, ErrorKind::domain,
            "synth: theta range must satisfy 0 < lo <= hi");
    require(scale_growth >= 1.0 && std::isfinite(scale_growth), ErrorKind::domain,
            "synth: scale_growth must be >= 1");
    require(chain_len >= 2, ErrorKind::domain, "synth: chain_len must be >= 2");
  }
};

/// Stream ids. Layer k -> k+1 draws its permutation from stream 1 + 2k and its
/// noise from stream 2 + 2k, so a two-layer chain equals a planted pair.
namespace streams {
inline constexpr std::uint64_t base_sae = 0;
inline constexpr std::uint64_t step_permutation(std::size_t k) { return 1 + 2 * k; }
inline constexpr std::uint64_t step_noise(std::size_t k) { return 2 + 2 * k; }
}  // namespace streams

namespace detail {

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Builds the layer after `prev`: relabel features by a uniform random
/// bijection, then (when noise or growth apply) fold, scale by the growth
/// factor, add Gaussian noise proportional to each feature's folded norms and
/// unfold with thresholds re-extracted as the noisy folded decoder column
/// norms, which keeps unfolded decoder columns at unit norm.
inline std::pair<SaeParams, Permutation> next_layer(const SaeParams& prev, Rng perm_rng,
                                                    Rng noise_rng, double sigma, double growth,
                                                    int layer_id) {
  const std::size_t F = prev.num_features();
  const std::size_t d = prev.hidden_dim();
  Permutation truth{perm_rng.permutation(F), prev.layer_id, layer_id, Provenance::exact};
  SaeParams next = permute_features(prev, truth.map);
  next.layer_id = layer_id;
  if (sigma == 0.0 && growth == 1.0) return {std::move(next), std::move(truth)};

  SaeParams f = next.folded ? next : fold_params(next);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> theta(F);
  std::vector<double> col(d);
  for (std::size_t j = 0; j < F; ++j) {
    for (std::size_t k = 0; k < d; ++k) col[k] = f.w_dec(k, j) * growth;
    const double dec_std = sigma * norm2(col) * inv_sqrt_d;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      std::vector<double> noisy(d);
      for (std::size_t k = 0; k < d; ++k) noisy[k] = col[k] + dec_std * noise_rng.normal();
      const double n = norm2(noisy);
      if (std::isfinite(n) && n > 0.0) {
        for (std::size_t k = 0; k < d; ++k) f.w_dec(k, j) = noisy[k];
        theta[j] = n;
        ok = true;
      }
    }
    require(ok, ErrorKind::domain,
            "synth: noise produced a non-positive threshold after 100 attempts");

    auto row = f.w_enc.row(j);
    for (double& w : row) w /= growth;
    const double enc_std = sigma * norm2(row) * inv_sqrt_d;
    for (double& w : row) w += enc_std * noise_rng.normal();
    // the pre-activation of a g-times larger input keeps its bias unscaled
    f.b_enc[j] += sigma * std::abs(f.b_enc[j]) * noise_rng.normal();
  }
  for (double& b : f.b_dec) b *= growth;
  SaeParams out = unfold_params(f, std::span<const double>(theta));
  out.layer_id = layer_id;
  return {std::move(out), std::move(truth)};
}

}  // namespace detail

/// Random unfolded SAE: encoder entries N(0, 1/d), unit-norm decoder columns,
/// log-uniform thresholds, small normal biases.
inline SaeParams gen_sae(const SynthSpec& spec, int layer_id = 0) {
  spec.validate();
  Rng rng = Rng(spec.seed).split(streams::base_sae);
  const std::size_t F = spec.F;
  const std::size_t d = spec.d;
  SaeParams sae;
  sae.layer_id = layer_id;
  sae.folded = false;

  const double enc_scale = 1.0 / std::sqrt(static_cast<double>(d));
  sae.w_enc = Matrix<double>(F, d);
  for (double& w : sae.w_enc.flat()) w = enc_scale * rng.normal();

  sae.w_dec = Matrix<double>(d, F);
  std::vector<double> col(d);
  for (std::size_t i = 0; i < F; ++i) {
    double n = 0.0;
    do {
      for (double& c : col) c = rng.normal();
      n = detail::norm2(col);
    } while (n == 0.0);
    for (std::size_t k = 0; k < d; ++k) sae.w_dec(k, i) = col[k] / n;
  }

  const double log_lo = std::log(spec.theta_lo);
  const double log_hi = std::log(spec.theta_hi);
  sae.theta.resize(F);
  for (double& t : sae.theta) t = std::clamp(std::exp(rng.uniform(log_lo, log_hi)), spec.theta_lo, spec.theta_hi);

  sae.b_enc.resize(F);
  for (double& b : sae.b_enc) b = 0.01 * rng.normal();
  sae.b_dec.resize(d);
  for (double& b : sae.b_dec) b = 0.01 * rng.normal();
  return sae;
}

struct PlantedPair {
  SaeParams a;
  SaeParams b;
  /// Feature i of `a` corresponds to feature truth.map[i] of `b`.
  Permutation truth;
};

/// `b` is a feature-relabelled copy of `a` with noise added in folded space.
inline PlantedPair gen_planted_pair(const SynthSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  SaeParams a = gen_sae(spec, 0);
  auto [b, truth] = detail::next_layer(a, root.split(streams::step_permutation(0)),
                                       root.split(streams::step_noise(0)), spec.noise_sigma,
                                       1.0, 1);
  return {std::move(a), std::move(b), std::move(truth)};
}

/// Like gen_planted_pair, but `b` sits in a layer whose hidden states are
/// `scale_growth` times larger. Unfolded decoder columns stay unit norm, so
/// the scale lives entirely in b's thresholds.
inline PlantedPair gen_norm_growth_pair(const SynthSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  SaeParams a = gen_sae(spec, 0);
  auto [b, truth] = detail::next_layer(a, root.split(streams::step_permutation(0)),
                                       root.split(streams::step_noise(0)), spec.noise_sigma,
                                       spec.scale_growth, 1);
  return {std::move(a), std::move(b), std::move(truth)};
}

struct PlantedChain {
  std::vector<SaeParams> saes;
  /// step_truths[k]: layer k -> k+1.
  std::vector<Permutation> step_truths;
  /// cumulative_truths[k]: layer 0 -> k+1.
  std::vector<Permutation> cumulative_truths;
};

inline PlantedChain gen_chain(const SynthSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  PlantedChain chain;
  chain.saes.push_back(gen_sae(spec, 0));
  for (std::size_t k = 0; k + 1 < spec.chain_len; ++k) {
    auto [next, truth] = detail::next_layer(
        chain.saes.back(), root.split(streams::step_permutation(k)),
        root.split(streams::step_noise(k)), spec.noise_sigma, spec.scale_growth,
        static_cast<int>(k + 1));
    chain.cumulative_truths.push_back(
        k == 0 ? truth : compose(chain.cumulative_truths.back(), truth));
    chain.saes.push_back(std::move(next));
    chain.step_truths.push_back(std::move(truth));
  }
  return chain;
}

struct ActivationOptions {
  /// Expected number of planted active features per token.
  double mean_l0 = 8.0;
  /// Planted magnitudes are uniform in [lo, hi] times the feature threshold.
  double magnitude_lo = 1.5;
  double magnitude_hi = 3.0;
  /// Std of isotropic Gaussian noise added to hidden states.
  double noise_sigma = 0.0;
};

struct ActivationSample {
  ActivationBatch hidden;
  ActivationBatch features;
};

/// Hidden states built as sparse non-negative combinations of decoder
/// directions (plus b_dec and optional noise); features are their encodings.
inline ActivationSample gen_activations(const SaeParams& sae, std::size_t T, std::uint64_t seed,
                                        const ActivationOptions& opts = {}) {
  sae.validate();
  require(T >= 1, ErrorKind::dimension, "gen_activations: need T >= 1");
  Rng rng(seed, 0x61637473ULL);
  const std::size_t F = sae.num_features();
  const std::size_t d = sae.hidden_dim();
  const double p_active = std::min(1.0, opts.mean_l0 / static_cast<double>(F));
  Matrix<double> hidden(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    auto x = hidden.row(t);
    std::copy(sae.b_dec.begin(), sae.b_dec.end(), x.begin());
    for (std::size_t i = 0; i < F; ++i) {
      if (rng.uniform() >= p_active) continue;
      const double m = sae.theta[i] * rng.uniform(opts.magnitude_lo, opts.magnitude_hi);
      for (std::size_t k = 0; k < d; ++k) x[k] += m * sae.w_dec(k, i);
    }
    if (opts.noise_sigma > 0.0)
      for (double& v : x) v += opts.noise_sigma * rng.normal();
  }
  ActivationBatch h{std::move(hidden), ActivationKind::hidden, sae.layer_id};
  ActivationBatch f = encode_batch(sae, h);
  return {std::move(h), std::move(f)};
}

/// Two hidden-state streams that share one sparse code: token t of layer a is
/// sum_i m_i a'[:, i] and of layer b is sum_i m_i b'[:, truth.map[i]], with a'
/// and b' the folded decoders. Each stream adds its own b_dec and noise.
inline std::pair<ActivationBatch, ActivationBatch> gen_paired_stream(
    const SaeParams& a, const SaeParams& b, const Permutation& truth, std::size_t T,
    std::uint64_t seed, const ActivationOptions& opts = {}) {
  require(a.num_features() == b.num_features() && a.hidden_dim() == b.hidden_dim(),
          ErrorKind::dimension, "gen_paired_stream: SAE shapes differ");
  require(truth.size() == a.num_features(), ErrorKind::dimension,
          "gen_paired_stream: truth does not span the features");
  truth.validate();
  require(T >= 1, ErrorKind::dimension, "gen_paired_stream: need T >= 1");
  const SaeParams fa = a.folded ? a : fold_params(a);
  const SaeParams fb = b.folded ? b : fold_params(b);
  Rng rng(seed, 0x70616972ULL);
  const std::size_t F = a.num_features();
  const std::size_t d = a.hidden_dim();
  const double p_active = std::min(1.0, opts.mean_l0 / static_cast<double>(F));
  Matrix<double> ha(T, d), hb(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    auto xa = ha.row(t);
    auto xb = hb.row(t);
    std::copy(fa.b_dec.begin(), fa.b_dec.end(), xa.begin());
    std::copy(fb.b_dec.begin(), fb.b_dec.end(), xb.begin());
    for (std::size_t i = 0; i < F; ++i) {
      if (rng.uniform() >= p_active) continue;
      const double m = rng.uniform(opts.magnitude_lo, opts.magnitude_hi);
      const std::size_t j = truth.map[i];
      for (std::size_t k = 0; k < d; ++k) {
        xa[k] += m * fa.w_dec(k, i);
        xb[k] += m * fb.w_dec(k, j);
      }
    }
    if (opts.noise_sigma > 0.0) {
      for (double& v : xa) v += opts.noise_sigma * rng.normal();
      for (double& v : xb) v += opts.noise_sigma * rng.normal();
    }
  }
  return {ActivationBatch{std::move(ha), ActivationKind::hidden, a.layer_id},
          ActivationBatch{std::move(hb), ActivationKind::hidden, b.layer_id}};
}

/// Fraction of source features mapped to their planted partner.
inline double recovery_accuracy(const Permutation& recovered, const Permutation& truth) {
  return agreement(recovered, truth);
}

}  // namespace saematch
