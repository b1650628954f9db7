#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "saematch/assignment.hpp"
#include "saematch/error.hpp"
#include "saematch/sae.hpp"

namespace saematch {

/// Pairwise (cascade) summation; the result depends only on the order of
/// the input.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

enum class ScoreMode {
  /// P(target active | source active)
  conditional,
  /// |both active| / |either active|
  jaccard,
};

struct PairScore {
  std::size_t source = 0;
  std::size_t target = 0;
  double score = 0.0;
};

struct MatchingScore {
  double score = 0.0;
  std::vector<PairScore> per_pair;
  std::size_t n_valid_pairs = 0;
  std::size_t n_excluded_pairs = 0;
};

/// Probability that matched features fire together. A feature counts as
/// active when its post-JumpReLU value is strictly positive. Pairs without
/// any activity in the conditioning set are excluded and counted.
inline MatchingScore matching_score(const ActivationBatch& feat_a, const ActivationBatch& feat_b,
                                    const Permutation& p, ScoreMode mode = ScoreMode::conditional) {
  require(feat_a.kind == ActivationKind::feature && feat_b.kind == ActivationKind::feature,
          ErrorKind::type, "matching_score needs feature activations");
  require(feat_a.tokens() == feat_b.tokens(), ErrorKind::dimension,
          "matching_score: token counts differ");
  require(feat_a.width() == p.size() && feat_b.width() == p.size(), ErrorKind::dimension,
          "matching_score: feature width differs from the permutation");
  p.validate();

  const std::size_t F = p.size();
  std::vector<std::size_t> n_src(F, 0), n_both(F, 0), n_either(F, 0);
  for (std::size_t t = 0; t < feat_a.tokens(); ++t) {
    const auto ra = feat_a.data.row(t);
    const auto rb = feat_b.data.row(t);
    for (std::size_t i = 0; i < F; ++i) {
      const bool a = ra[i] > 0.0;
      const bool b = rb[p.map[i]] > 0.0;
      n_src[i] += a;
      n_both[i] += a && b;
      n_either[i] += a || b;
    }
  }

  MatchingScore out;
  std::vector<double> scores;
  for (std::size_t i = 0; i < F; ++i) {
    const std::size_t denom = mode == ScoreMode::conditional ? n_src[i] : n_either[i];
    if (denom == 0) {
      ++out.n_excluded_pairs;
      continue;
    }
    const double s = static_cast<double>(n_both[i]) / static_cast<double>(denom);
    out.per_pair.push_back({i, p.map[i], s});
    scores.push_back(s);
  }
  out.n_valid_pairs = scores.size();
  require(out.n_valid_pairs > 0, ErrorKind::no_activations,
          "matching_score: no matched pair has any activation");
  out.score = pairwise_sum(scores) / static_cast<double>(scores.size());
  return out;
}

struct ExplainedVariance {
  double ev = 0.0;
  /// sum_dim Var(x_hat - x) / sum_dim Var(x), population variances over tokens.
  double residual_ratio = 0.0;
};

namespace detail {

/// Population variance of every column, summed (two-pass).
inline double summed_column_variance(const Matrix<double>& m) {
  const std::size_t T = m.rows();
  std::vector<double> col(T), per_dim(m.cols());
  for (std::size_t k = 0; k < m.cols(); ++k) {
    for (std::size_t t = 0; t < T; ++t) col[t] = m(t, k);
    const double mean = pairwise_sum(col) / static_cast<double>(T);
    for (std::size_t t = 0; t < T; ++t) {
      const double c = col[t] - mean;
      col[t] = c * c;
    }
    per_dim[k] = pairwise_sum(col) / static_cast<double>(T);
  }
  return pairwise_sum(per_dim);
}

}  // namespace detail

inline ExplainedVariance explained_variance(const ActivationBatch& x_hat, const ActivationBatch& x) {
  require(x_hat.kind == ActivationKind::hidden && x.kind == ActivationKind::hidden,
          ErrorKind::type, "explained_variance needs hidden states");
  require(x_hat.tokens() == x.tokens() && x_hat.width() == x.width(), ErrorKind::dimension,
          "explained_variance: batch shapes differ");
  require(x.tokens() >= 2, ErrorKind::degenerate_input,
          "explained_variance needs at least two tokens");
  Matrix<double> resid(x.tokens(), x.width());
  for (std::size_t t = 0; t < x.tokens(); ++t)
    for (std::size_t k = 0; k < x.width(); ++k) resid(t, k) = x_hat.data(t, k) - x.data(t, k);
  const double total = detail::summed_column_variance(x.data);
  require(total > 0.0, ErrorKind::degenerate_input,
          "explained_variance: reference has zero variance");
  const double r = detail::summed_column_variance(resid) / total;
  return {1.0 - r, r};
}

/// Mean over tokens of CE(mod) - CE(orig) in nats, where CE is the softmax
/// cross-entropy of the target token.
inline double delta_cross_entropy(const ActivationBatch& logits_mod,
                                  const ActivationBatch& logits_orig,
                                  std::span<const std::size_t> targets) {
  const std::size_t T = logits_orig.tokens();
  const std::size_t V = logits_orig.width();
  require(logits_mod.tokens() == T && logits_mod.width() == V, ErrorKind::dimension,
          "delta_cross_entropy: logit shapes differ");
  require(targets.size() == T, ErrorKind::dimension,
          "delta_cross_entropy: need one target per token");
  require(T >= 1 && V >= 1, ErrorKind::dimension, "delta_cross_entropy: empty logits");

  auto cross_entropy = [V](std::span<const double> row, std::size_t target) {
    double mx = row[0];
    for (double v : row) {
      require(std::isfinite(v), ErrorKind::domain, "delta_cross_entropy: non-finite logit");
      mx = std::max(mx, v);
    }
    double s = 0.0;
    for (std::size_t k = 0; k < V; ++k) s += std::exp(row[k] - mx);
    return std::log(s) - (row[target] - mx);
  };

  std::vector<double> diffs(T);
  for (std::size_t t = 0; t < T; ++t) {
    require(targets[t] < V, ErrorKind::domain, "delta_cross_entropy: target out of range");
    diffs[t] = cross_entropy(logits_mod.data.row(t), targets[t]) -
               cross_entropy(logits_orig.data.row(t), targets[t]);
  }
  return pairwise_sum(diffs) / static_cast<double>(T);
}

}  // namespace saematch
