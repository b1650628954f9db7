#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "saematch/error.hpp"
#include "saematch/matrix.hpp"
#include "saematch/sae.hpp"

namespace saematch {

/// Which per-feature weight groups enter the matching cost.
enum class WeightSet { decoder_only, encoder_only, encoder_decoder_bias };

constexpr std::string_view to_string(WeightSet w) noexcept {
  switch (w) {
    case WeightSet::decoder_only: return "dec";
    case WeightSet::encoder_only: return "enc";
    case WeightSet::encoder_decoder_bias: return "enc-dec-bias";
  }
  return "?";
}

inline WeightSet parse_weight_set(std::string_view s) {
  if (s == "dec") return WeightSet::decoder_only;
  if (s == "enc") return WeightSet::encoder_only;
  if (s == "enc-dec-bias") return WeightSet::encoder_decoder_bias;
  throw Error(ErrorKind::domain, "unknown weight set '" + std::string(s) + "'");
}

enum class Provenance { exact, composed };

constexpr std::string_view to_string(Provenance p) noexcept {
  return p == Provenance::exact ? "exact" : "composed";
}

/// Bijection over F feature indices: source feature i maps to target feature
/// map[i].
struct Permutation {
  std::vector<std::size_t> map;
  int from_layer = 0;
  int to_layer = 0;
  Provenance provenance = Provenance::exact;

  std::size_t size() const noexcept { return map.size(); }

  bool is_bijection() const {
    std::vector<bool> seen(map.size(), false);
    for (std::size_t j : map) {
      if (j >= map.size() || seen[j]) return false;
      seen[j] = true;
    }
    return true;
  }

  void validate() const {
    require(is_bijection(), ErrorKind::domain, "permutation map is not a bijection");
  }

  Permutation inverse() const {
    validate();
    Permutation out{std::vector<std::size_t>(map.size()), to_layer, from_layer, provenance};
    for (std::size_t i = 0; i < map.size(); ++i) out.map[map[i]] = i;
    return out;
  }

  static Permutation identity(std::size_t n, int from_layer = 0, int to_layer = 0) {
    Permutation p{std::vector<std::size_t>(n), from_layer, to_layer, Provenance::exact};
    std::iota(p.map.begin(), p.map.end(), std::size_t{0});
    return p;
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;
};

/// F x F matrix of summed squared distances between the features of two SAEs.
/// Storage may be float for very wide SAEs; every reduction uses double.
template <std::floating_point T = double>
struct BasicCostMatrix {
  Matrix<T> data;
  int source_layer = 0;
  int target_layer = 0;
  WeightSet weight_set = WeightSet::encoder_decoder_bias;

  std::size_t size() const noexcept { return data.rows(); }
};

using CostMatrix = BasicCostMatrix<double>;

struct CostOptions {
  WeightSet weight_set = WeightSet::encoder_decoder_bias;
  double decoder_weight = 1.0;
  double encoder_weight = 1.0;
  double bias_weight = 1.0;
  /// Rejects unfolded inputs. Off only for the raw-weight comparison mode.
  bool require_folded = true;
  /// Worker threads for row-parallel construction; 0 means hardware
  /// concurrency. The result does not depend on this value.
  unsigned threads = 1;
};

namespace detail {

/// Squared Euclidean distance with four fixed partial sums. The summation
/// order depends only on the length, so every thread gets identical bits.
inline double squared_distance(const double* a, const double* b, std::size_t n) noexcept {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    const double d0 = a[k] - b[k];
    const double d1 = a[k + 1] - b[k + 1];
    const double d2 = a[k + 2] - b[k + 2];
    const double d3 = a[k + 3] - b[k + 3];
    s0 += d0 * d0;
    s1 += d1 * d1;
    s2 += d2 * d2;
    s3 += d3 * d3;
  }
  for (; k < n; ++k) {
    const double d = a[k] - b[k];
    s0 += d * d;
  }
  return (s0 + s1) + (s2 + s3);
}

inline unsigned resolve_threads(unsigned requested) {
  if (requested != 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Runs body(row) for every row in [0, n), rows dealt round-robin to workers.
template <class Body>
void parallel_rows(std::size_t n, unsigned threads, Body&& body) {
  threads = static_cast<unsigned>(std::min<std::size_t>(resolve_threads(threads), std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t r = 0; r < n; ++r) body(r);
    return;
  }
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  for (unsigned w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t r = w; r < n; r += threads) body(r);
    });
  }
}

}  // namespace detail

/// C[i, j] = sum over the selected weight groups of the squared distance
/// between feature i of `a` and feature j of `b`: decoder columns, encoder
/// rows and the scalar encoder bias. b_dec never enters the cost.
template <std::floating_point Storage = double>
BasicCostMatrix<Storage> build_cost_matrix(const SaeParams& a, const SaeParams& b,
                                           const CostOptions& opts = {}) {
  a.validate();
  b.validate();
  require(a.num_features() == b.num_features() && a.hidden_dim() == b.hidden_dim(),
          ErrorKind::dimension, "build_cost_matrix: SAE shapes differ");
  if (opts.require_folded)
    require(a.folded && b.folded, ErrorKind::state,
            "build_cost_matrix: both SAEs must be folded");

  const std::size_t F = a.num_features();
  const std::size_t d = a.hidden_dim();
  const bool use_dec = opts.weight_set != WeightSet::encoder_only;
  const bool use_enc = opts.weight_set != WeightSet::decoder_only;
  const bool use_bias = opts.weight_set == WeightSet::encoder_decoder_bias;

  // feature-major copies so every distance reads contiguous memory
  const Matrix<double> dec_a = use_dec ? a.w_dec.transposed() : Matrix<double>();
  const Matrix<double> dec_b = use_dec ? b.w_dec.transposed() : Matrix<double>();

  BasicCostMatrix<Storage> out{Matrix<Storage>(F, F), a.layer_id, b.layer_id, opts.weight_set};
  detail::parallel_rows(F, opts.threads, [&](std::size_t i) {
    auto row = out.data.row(i);
    for (std::size_t j = 0; j < F; ++j) {
      double c = 0.0;
      if (use_dec)
        c += opts.decoder_weight *
             detail::squared_distance(dec_a.row(i).data(), dec_b.row(j).data(), d);
      if (use_enc)
        c += opts.encoder_weight *
             detail::squared_distance(a.w_enc.row(i).data(), b.w_enc.row(j).data(), d);
      if (use_bias) {
        const double db = a.b_enc[i] - b.b_enc[j];
        c += opts.bias_weight * db * db;
      }
      row[j] = static_cast<Storage>(c);
    }
  });
  return out;
}

/// Sum of C[i, p.map[i]] in ascending i.
template <std::floating_point T>
double cost_of_permutation(const BasicCostMatrix<T>& cost, const Permutation& p) {
  require(p.size() == cost.size(), ErrorKind::dimension,
          "cost_of_permutation: permutation length differs from cost matrix");
  p.validate();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    total += static_cast<double>(cost.data(i, p.map[i]));
  return total;
}

struct LapResult {
  Permutation permutation;
  double total_cost = 0.0;
};

/// Exhaustive search over all F! bijections (F <= 10). Returns the
/// lexicographically first minimiser.
template <std::floating_point T>
LapResult solve_lap_exact(const BasicCostMatrix<T>& cost) {
  const std::size_t n = cost.size();
  require(cost.data.cols() == n, ErrorKind::dimension, "cost matrix must be square");
  require(n >= 1, ErrorKind::size, "solve_lap_exact: empty cost matrix");
  require(n <= 10, ErrorKind::size, "solve_lap_exact supports F <= 10");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::vector<std::size_t> best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) c += static_cast<double>(cost.data(i, perm[i]));
    if (c < best_cost) {
      best_cost = c;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  Permutation p{std::move(best), cost.source_layer, cost.target_layer, Provenance::exact};
  return {std::move(p), best_cost};
}

/// Optimal linear assignment by successive shortest augmenting paths with
/// dual potentials (Jonker-Volgenant style, dense, O(F^3) worst case).
///
/// Ties are resolved deterministically: among equally short columns the scan
/// prefers an unassigned column, then the lowest index.
template <std::floating_point T>
LapResult solve_lap(const BasicCostMatrix<T>& cost) {
  const std::size_t n = cost.size();
  require(cost.data.cols() == n, ErrorKind::dimension, "cost matrix must be square");
  require(n >= 1, ErrorKind::size, "solve_lap: empty cost matrix");
  for (T v : cost.data.flat())
    require(std::isfinite(v), ErrorKind::domain, "solve_lap: cost matrix has non-finite entries");

  constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  constexpr double inf = std::numeric_limits<double>::infinity();

  std::vector<double> u(n, 0.0), v(n, 0.0), shortest(n);
  std::vector<std::size_t> path(n, none), col4row(n, none), row4col(n, none);
  std::vector<char> col_done(n);
  std::vector<std::size_t> touched_rows;
  touched_rows.reserve(n);

  for (std::size_t cur = 0; cur < n; ++cur) {
    std::fill(shortest.begin(), shortest.end(), inf);
    std::fill(col_done.begin(), col_done.end(), 0);
    touched_rows.clear();

    double min_val = 0.0;
    std::size_t i = cur;
    std::size_t sink = none;
    while (sink == none) {
      touched_rows.push_back(i);
      const auto crow = cost.data.row(i);
      const double ui = u[i];
      std::size_t best = none;
      double lowest = inf;
      for (std::size_t j = 0; j < n; ++j) {
        if (col_done[j]) continue;
        const double r = min_val + static_cast<double>(crow[j]) - ui - v[j];
        if (r < shortest[j]) {
          path[j] = i;
          shortest[j] = r;
        }
        const double s = shortest[j];
        if (s < lowest || (s == lowest && best != none && row4col[best] != none &&
                           row4col[j] == none)) {
          lowest = s;
          best = j;
        }
      }
      require(best != none && lowest < inf, ErrorKind::domain, "solve_lap: infeasible problem");
      min_val = lowest;
      col_done[best] = 1;
      if (row4col[best] == none)
        sink = best;
      else
        i = row4col[best];
    }

    // dual update
    u[cur] += min_val;
    for (std::size_t r : touched_rows)
      if (r != cur) u[r] += min_val - shortest[col4row[r]];
    for (std::size_t j = 0; j < n; ++j)
      if (col_done[j]) v[j] -= min_val - shortest[j];

    // augment along the alternating path
    std::size_t j = sink;
    for (;;) {
      const std::size_t r = path[j];
      row4col[j] = r;
      std::swap(col4row[r], j);
      if (r == cur) break;
    }
  }

  Permutation p{std::move(col4row), cost.source_layer, cost.target_layer, Provenance::exact};
  const double total = cost_of_permutation(cost, p);
  return {std::move(p), total};
}

}  // namespace saematch
