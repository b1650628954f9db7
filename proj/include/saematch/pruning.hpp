#pragma once

#include <vector>

#include "saematch/assignment.hpp"
#include "saematch/matching.hpp"
#include "saematch/sae.hpp"

namespace saematch {

namespace detail {

inline void check_pruning_inputs(const SaeParams& sae_t, const SaeParams& sae_t1,
                                 const Permutation& p, const ActivationBatch& x_t) {
  require(x_t.kind == ActivationKind::hidden, ErrorKind::type,
          "layer skipping needs hidden states as input");
  require(sae_t.num_features() == sae_t1.num_features() &&
              sae_t.hidden_dim() == sae_t1.hidden_dim(),
          ErrorKind::dimension, "source and target SAE shapes differ");
  require(x_t.width() == sae_t.hidden_dim(), ErrorKind::dimension,
          "hidden state width differs from the SAE input size");
  require(p.size() == sae_t.num_features(), ErrorKind::dimension,
          "permutation does not span the SAE features");
  require(p.from_layer == sae_t.layer_id && p.to_layer == sae_t1.layer_id,
          ErrorKind::layer_mismatch,
          "permutation maps layer " + std::to_string(p.from_layer) + " -> " +
              std::to_string(p.to_layer) + " but the SAEs are layers " +
              std::to_string(sae_t.layer_id) + " -> " + std::to_string(sae_t1.layer_id));
  p.validate();
}

}  // namespace detail

/// Approximates the next layer's hidden state from this layer's: encode with
/// the source SAE, move feature i to slot p.map[i], decode with the target SAE.
inline ActivationBatch encode_permute_decode(const SaeParams& sae_t, const SaeParams& sae_t1,
                                             const Permutation& p, const ActivationBatch& x_t) {
  detail::check_pruning_inputs(sae_t, sae_t1, p, x_t);
  const std::size_t F = sae_t.num_features();
  Matrix<double> out(x_t.tokens(), sae_t1.hidden_dim());
  std::vector<double> moved(F);
  for (std::size_t t = 0; t < x_t.tokens(); ++t) {
    const auto f = encode(sae_t, x_t.data.row(t));
    for (std::size_t i = 0; i < F; ++i) moved[p.map[i]] = f[i];
    const auto x = decode(sae_t1, moved);
    std::copy(x.begin(), x.end(), out.row(t).begin());
  }
  return {std::move(out), ActivationKind::hidden, sae_t1.layer_id};
}

/// Hybrid decode: features whose matched cost is within the q-quantile go
/// through the permutation and the target decoder; the rest are decoded by
/// the source decoder in their own indexing. The target decoder bias is used.
///
/// q = 1 reproduces encode_permute_decode bit for bit; q = 0 is the source
/// reconstruction with the target bias.
inline ActivationBatch quantile_decode(const SaeParams& sae_t, const SaeParams& sae_t1,
                                       const MatchResult& result, double q,
                                       const ActivationBatch& x_t) {
  const Permutation& p = result.permutation;
  detail::check_pruning_inputs(sae_t, sae_t1, p, x_t);
  require(result.per_pair_mse.size() == p.size(), ErrorKind::dimension,
          "match result per-pair costs do not span the features");
  const QuantileSplit split = quantile_split(result, q);
  std::vector<char> is_low(p.size(), 0);
  for (std::size_t i : split.low) is_low[i] = 1;

  const std::size_t F = sae_t.num_features();
  const std::size_t d = sae_t1.hidden_dim();
  Matrix<double> out(x_t.tokens(), d);
  std::vector<double> moved(F);
  for (std::size_t t = 0; t < x_t.tokens(); ++t) {
    const auto f = encode(sae_t, x_t.data.row(t));
    std::fill(moved.begin(), moved.end(), 0.0);
    for (std::size_t i = 0; i < F; ++i)
      if (is_low[i]) moved[p.map[i]] = f[i];
    auto x = decode(sae_t1, moved);
    for (std::size_t i = 0; i < F; ++i) {
      if (is_low[i] || f[i] == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) x[k] += sae_t.w_dec(k, i) * f[i];
    }
    std::copy(x.begin(), x.end(), out.row(t).begin());
  }
  return {std::move(out), ActivationKind::hidden, sae_t1.layer_id};
}

}  // namespace saematch
