// Plant a relabelled, noisy copy of a synthetic SAE, recover the relabelling
// and use it to stand in for the second layer.

#include <cstdio>

#include "saematch/saematch.hpp"

int main() {
  using namespace saematch;

  SynthSpec spec;
  spec.F = 256;
  spec.d = 32;
  spec.noise_sigma = 0.05;
  spec.seed = 7;
  const PlantedPair pair = gen_planted_pair(spec);

  for (bool folded : {true, false}) {
    MatchOptions opts;
    opts.folded = folded;
    const MatchResult r = match_layers(pair.a, pair.b, opts);
    std::printf("%-9s total cost %.6f  recovery %.4f\n", folded ? "folded" : "unfolded",
                r.total_cost, recovery_accuracy(r.permutation, pair.truth));
  }

  const MatchResult r = match_layers(pair.a, pair.b);
  const auto [x_a, x_b] = gen_paired_stream(pair.a, pair.b, pair.truth, 512, 1);
  // The synthetic encoders are random, so the second SAE reconstructs its own
  // stream poorly; the second column measures against that reconstruction.
  const auto own = encode_permute_decode(pair.b, pair.b, Permutation::identity(spec.F, 1, 1), x_b);
  for (double q : {0.0, 0.5, 1.0}) {
    const auto approx = quantile_decode(pair.a, pair.b, r, q, x_a);
    std::printf("quantile %.1f  explained variance vs hidden %.4f, vs own reconstruction %.4f\n", q,
                explained_variance(approx, x_b).ev, explained_variance(approx, own).ev);
  }
  return 0;
}
