#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "saematch/assignment.hpp"
#include "saematch/error.hpp"
#include "saematch/sae.hpp"

namespace saematch {

struct MatchOptions {
  /// Fold both SAEs before computing costs (the default). When false the raw
  /// unfolded weights are compared.
  bool folded = true;
  WeightSet weight_set = WeightSet::encoder_decoder_bias;
  double decoder_weight = 1.0;
  double encoder_weight = 1.0;
  double bias_weight = 1.0;
  /// Store the cost matrix in float (accumulation stays in double).
  bool float_storage = false;
  unsigned threads = 1;
};

/// FNV-1a 64-bit digest of the option fields that influence the result.
/// Thread count is excluded because it never changes the output.
inline std::string config_fingerprint(const MatchOptions& o) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "folded=%d;weights=%s;dec=%.17g;enc=%.17g;bias=%.17g;storage=%s",
                o.folded ? 1 : 0, std::string(to_string(o.weight_set)).c_str(),
                o.decoder_weight, o.encoder_weight, o.bias_weight,
                o.float_storage ? "f32" : "f64");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char* p = buf; *p; ++p) {
    h ^= static_cast<unsigned char>(*p);
    h *= 0x100000001b3ULL;
  }
  char out[32];
  std::snprintf(out, sizeof out, "fnv1a64:%016llx", static_cast<unsigned long long>(h));
  return out;
}

struct MatchResult {
  Permutation permutation;
  double total_cost = 0.0;
  /// per_pair_mse[i] = C[i, permutation.map[i]].
  std::vector<double> per_pair_mse;
  WeightSet weight_set = WeightSet::encoder_decoder_bias;
  bool folded = true;
  std::string config_fingerprint;
};

namespace detail {

inline CostOptions cost_options(const MatchOptions& o) {
  CostOptions c;
  c.weight_set = o.weight_set;
  c.decoder_weight = o.decoder_weight;
  c.encoder_weight = o.encoder_weight;
  c.bias_weight = o.bias_weight;
  c.require_folded = o.folded;
  c.threads = o.threads;
  return c;
}

inline SaeParams prepare(const SaeParams& s, bool folded) {
  if (!folded || s.folded) return s;
  return fold_params(s);
}

template <std::floating_point T>
MatchResult finish_match(const BasicCostMatrix<T>& cost, const MatchOptions& opts) {
  LapResult lap = solve_lap(cost);
  MatchResult r;
  r.per_pair_mse.resize(cost.size());
  for (std::size_t i = 0; i < cost.size(); ++i)
    r.per_pair_mse[i] = static_cast<double>(cost.data(i, lap.permutation.map[i]));
  r.permutation = std::move(lap.permutation);
  r.total_cost = lap.total_cost;
  r.weight_set = opts.weight_set;
  r.folded = opts.folded;
  r.config_fingerprint = config_fingerprint(opts);
  return r;
}

}  // namespace detail

/// Cost matrix exactly as match_layers would build it for these options.
inline CostMatrix matching_cost_matrix(const SaeParams& a, const SaeParams& b,
                                       const MatchOptions& opts = {}) {
  return build_cost_matrix<double>(detail::prepare(a, opts.folded),
                                   detail::prepare(b, opts.folded), detail::cost_options(opts));
}

/// Aligns the features of `a` to those of `b`: fold (unless disabled), build
/// the pairwise cost matrix, solve the assignment problem.
inline MatchResult match_layers(const SaeParams& a, const SaeParams& b,
                                const MatchOptions& opts = {}) {
  const SaeParams pa = detail::prepare(a, opts.folded);
  const SaeParams pb = detail::prepare(b, opts.folded);
  const CostOptions copts = detail::cost_options(opts);
  if (opts.float_storage)
    return detail::finish_match(build_cost_matrix<float>(pa, pb, copts), opts);
  return detail::finish_match(build_cost_matrix<double>(pa, pb, copts), opts);
}

/// out.map[i] = bc.map[ab.map[i]]: the A->C map obtained by following A->B
/// and then B->C.
inline Permutation compose(const Permutation& ab, const Permutation& bc) {
  require(ab.size() == bc.size(), ErrorKind::dimension, "compose: permutation lengths differ");
  require(ab.to_layer == bc.from_layer, ErrorKind::layer_mismatch,
          "compose: first permutation ends at layer " + std::to_string(ab.to_layer) +
              " but second starts at layer " + std::to_string(bc.from_layer));
  ab.validate();
  bc.validate();
  Permutation out{std::vector<std::size_t>(ab.size()), ab.from_layer, bc.to_layer,
                  Provenance::composed};
  for (std::size_t i = 0; i < ab.size(); ++i) out.map[i] = bc.map[ab.map[i]];
  return out;
}

/// Fraction of indices on which the two maps agree.
inline double agreement(const Permutation& p, const Permutation& q) {
  require(p.size() == q.size(), ErrorKind::dimension, "agreement: permutation lengths differ");
  require(p.size() > 0, ErrorKind::dimension, "agreement: empty permutations");
  std::size_t same = 0;
  for (std::size_t i = 0; i < p.size(); ++i) same += p.map[i] == q.map[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(p.size());
}

/// Consecutive-pair matches for a stack of SAEs; steps[k] maps layer k to k+1
/// (by position in the stack).
struct PermutationChain {
  std::vector<MatchResult> steps;

  std::size_t layers() const noexcept { return steps.empty() ? 0 : steps.size() + 1; }

  /// Composed map from stack position i to position j (i < j).
  Permutation span(std::size_t i, std::size_t j) const {
    require(i < j && j < layers(), ErrorKind::domain, "chain span needs i < j < layer count");
    Permutation p = steps[i].permutation;
    for (std::size_t k = i + 1; k < j; ++k) p = compose(p, steps[k].permutation);
    if (j - i > 1) p.provenance = Provenance::composed;
    return p;
  }
};

/// Matches every consecutive pair. Pairs are independent and may run on up
/// to `opts.threads` workers; each cost matrix is then built single-threaded.
inline PermutationChain match_chain(const std::vector<SaeParams>& saes,
                                    const MatchOptions& opts = {}) {
  require(saes.size() >= 2, ErrorKind::size, "match_chain needs at least two SAEs");
  for (std::size_t k = 1; k < saes.size(); ++k) {
    require(saes[k].num_features() == saes[0].num_features() &&
                saes[k].hidden_dim() == saes[0].hidden_dim(),
            ErrorKind::dimension, "match_chain: SAE shapes drift across layers");
    require(saes[k].layer_id > saes[k - 1].layer_id, ErrorKind::layer_mismatch,
            "match_chain: layer ids must be strictly increasing");
  }
  PermutationChain chain;
  chain.steps.resize(saes.size() - 1);
  MatchOptions step_opts = opts;
  step_opts.threads = 1;
  detail::parallel_rows(chain.steps.size(), opts.threads, [&](std::size_t k) {
    chain.steps[k] = match_layers(saes[k], saes[k + 1], step_opts);
  });
  return chain;
}

/// Directly matched map between stack positions i and j.
inline MatchResult match_span_exact(const std::vector<SaeParams>& saes, std::size_t i,
                                    std::size_t j, const MatchOptions& opts = {}) {
  require(i < j && j < saes.size(), ErrorKind::domain, "span needs i < j < layer count");
  return match_layers(saes[i], saes[j], opts);
}

struct QuantileSplit {
  std::vector<std::size_t> low;
  std::vector<std::size_t> high;
  double threshold = 0.0;
};

/// Empirical q-quantile of `values` with linear interpolation between order
/// statistics (position q * (n - 1)).
inline double empirical_quantile(std::vector<double> values, double q) {
  require(!values.empty(), ErrorKind::size, "quantile of an empty set");
  require(q >= 0.0 && q <= 1.0, ErrorKind::domain, "quantile must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// Partitions matched pairs by their cost: i is "low" iff per_pair_mse[i] <=
/// the q-quantile. q = 0 puts every pair in the high set and q = 1 every pair
/// in the low set.
inline QuantileSplit quantile_split(const MatchResult& result, double q) {
  require(q >= 0.0 && q <= 1.0, ErrorKind::domain, "quantile must lie in [0, 1]");
  const auto& mse = result.per_pair_mse;
  require(!mse.empty(), ErrorKind::size, "quantile_split: match result has no per-pair costs");
  QuantileSplit out;
  if (q == 0.0) {
    out.threshold = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < mse.size(); ++i) out.high.push_back(i);
    return out;
  }
  out.threshold = empirical_quantile(mse, q);
  for (std::size_t i = 0; i < mse.size(); ++i)
    (q == 1.0 || mse[i] <= out.threshold ? out.low : out.high).push_back(i);
  return out;
}

}  // namespace saematch
