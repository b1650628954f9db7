// Acceptance suite. Prints one line per criterion and exits nonzero if any
// criterion fails. Usage: acceptance [output-dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "saematch/io.hpp"
#include "saematch/saematch.hpp"

namespace fs = std::filesystem;
using namespace saematch;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(const char* id, bool pass, const std::string& what, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("[%s] %s %s: %s\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

/// Runs a check; an unexpected exception is a failure of that criterion.
void criterion(const char* id, const std::string& what, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, false, what, std::string("unexpected exception: ") + e.what());
  }
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  } catch (...) {
    return ErrorKind::io;
  }
  return static_cast<ErrorKind>(-1);
}

SynthSpec spec_of(std::size_t F, std::size_t d, std::uint64_t seed, double noise = 0.0) {
  SynthSpec s;
  s.F = F;
  s.d = d;
  s.seed = seed;
  s.noise_sigma = noise;
  return s;
}

CostMatrix uniform_cost(std::size_t n, Rng& rng) {
  CostMatrix c{Matrix<double>(n, n), 0, 1, WeightSet::encoder_decoder_bias};
  for (double& v : c.data.flat()) v = rng.uniform();
  return c;
}

double max_abs(const Matrix<double>& a, const Matrix<double>& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.flat()[k] - b.flat()[k]));
  return m;
}

// --- criteria ----------------------------------------------------------------

void ac1() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int n = 0; n < 1000; ++n) {
    SynthSpec s = spec_of(1 + rng.index(512), 1 + rng.index(64), 1000 + n);
    s.theta_lo = 0.01;
    s.theta_hi = 10.0;
    const SaeParams sae = gen_sae(s);
    const SaeParams folded = fold_params(sae);
    std::vector<double> x(s.d);
    for (int k = 0; k < 10; ++k) {
      for (double& v : x) v = rng.normal();
      const auto a = reconstruct(sae, x);
      const auto b = reconstruct(folded, x);
      for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(a[j] - b[j]));
    }
  }
  const double t = seconds_since(t0);
  report("AC1", worst <= 1e-12 && t < 30.0, "folding invariance",
         fmt("max |diff| %.3g over 1000 SAEs x 10 inputs (tol 1e-12); %.2f s (limit 30 s)", worst, t));
}

void ac2() {
  const auto t0 = Clock::now();
  Rng rng(202);
  int mismatches = 0;
  for (int n = 0; n < 1000; ++n) {
    const auto c = uniform_cost(2 + rng.index(7), rng);
    if (solve_lap(c).total_cost != solve_lap_exact(c).total_cost) ++mismatches;
  }
  const double t = seconds_since(t0);
  report("AC2", mismatches == 0 && t < 60.0, "LAP exactness",
         fmt("%d of 1000 instances differ from brute force; %.2f s (limit 60 s)", mismatches, t));
}

void ac3() {
  const auto t0 = Clock::now();
  double worst_acc = 1.0, worst_cost = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto pair = gen_planted_pair(spec_of(256, 32, seed));
    for (auto ws : {WeightSet::decoder_only, WeightSet::encoder_only, WeightSet::encoder_decoder_bias}) {
      MatchOptions o;
      o.weight_set = ws;
      const auto r = match_layers(pair.a, pair.b, o);
      worst_acc = std::min(worst_acc, recovery_accuracy(r.permutation, pair.truth));
      worst_cost = std::max(worst_cost, r.total_cost);
    }
  }
  const double t = seconds_since(t0);
  report("AC3", worst_acc == 1.0 && worst_cost == 0.0 && t < 60.0, "planted recovery",
         fmt("min accuracy %.4f, max total cost %.3g over 20 seeds x 3 weight sets; %.2f s (limit 60 s)",
             worst_acc, worst_cost, t));
}

void ac4(const fs::path& out_dir) {
  const auto t0 = Clock::now();
  io::CsvTable table{{"seed", "folded_accuracy", "unfolded_accuracy"}, {}};
  double sum_f = 0.0, sum_u = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SynthSpec s = spec_of(256, 32, seed, 0.05);
    s.scale_growth = 3.0;
    const auto pair = gen_norm_growth_pair(s);
    MatchOptions folded, unfolded;
    unfolded.folded = false;
    const double af = recovery_accuracy(match_layers(pair.a, pair.b, folded).permutation, pair.truth);
    const double au = recovery_accuracy(match_layers(pair.a, pair.b, unfolded).permutation, pair.truth);
    sum_f += af;
    sum_u += au;
    table.rows.push_back({static_cast<std::int64_t>(seed), af, au});
  }
  const double mf = sum_f / 20.0, mu = sum_u / 20.0;
  table.rows.push_back({std::string("mean"), mf, mu});
  const fs::path csv = out_dir / "acceptance_folding.csv";
  io::write_report_csv(table, csv);
  const double t = seconds_since(t0);

  // beyond the stated noise level: where the two variants separate
  io::CsvTable sweep{{"noise_sigma", "folded_accuracy", "unfolded_accuracy"}, {}};
  std::string line;
  for (double sigma : {0.1, 0.2, 0.3, 0.5, 0.8}) {
    double f = 0.0, u = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SynthSpec s = spec_of(256, 32, seed, sigma);
      s.scale_growth = 3.0;
      const auto pair = gen_norm_growth_pair(s);
      MatchOptions unfolded;
      unfolded.folded = false;
      f += recovery_accuracy(match_layers(pair.a, pair.b).permutation, pair.truth) / 10.0;
      u += recovery_accuracy(match_layers(pair.a, pair.b, unfolded).permutation, pair.truth) / 10.0;
    }
    sweep.rows.push_back({sigma, f, u});
    line += fmt(" sigma=%.1f %.3f/%.3f", sigma, f, u);
  }
  io::write_report_csv(sweep, out_dir / "acceptance_folding_sweep.csv");
  std::printf("[INFO] AC4 noise sweep, folded/unfolded accuracy (10 seeds):%s\n", line.c_str());

  report("AC4", mf >= mu && t < 300.0, "folded vs unfolded under norm growth",
         fmt("mean accuracy folded %.4f, unfolded %.4f (written to %s); %.2f s (limit 300 s)", mf, mu,
             csv.string().c_str(), t));
}

void ac5(const fs::path& out_dir) {
  const auto t0 = Clock::now();
  constexpr std::size_t L = 8;
  std::vector<double> mean(L, 0.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SynthSpec s = spec_of(256, 32, seed, 0.05);
    s.chain_len = L;
    const auto planted = gen_chain(s);
    const auto chain = match_chain(planted.saes);
    for (std::size_t k = 1; k < L; ++k)
      mean[k] += agreement(chain.span(0, k), match_span_exact(planted.saes, 0, k).permutation) / 20.0;
  }
  int inversions = 0;
  bool small = true;
  io::CsvTable table{{"distance", "mean_agreement"}, {}};
  std::string curve;
  for (std::size_t k = 1; k < L; ++k) {
    table.rows.push_back({static_cast<std::int64_t>(k), mean[k]});
    curve += fmt("%s%.4f", k == 1 ? "" : " ", mean[k]);
    if (k > 1 && mean[k] > mean[k - 1]) {
      ++inversions;
      small = small && mean[k] - mean[k - 1] <= 0.01;
    }
  }
  io::write_report_csv(table, out_dir / "acceptance_composition.csv");
  const double t = seconds_since(t0);

  io::CsvTable sweep{{"noise_sigma", "distance", "mean_agreement"}, {}};
  for (double sigma : {0.3, 0.6}) {
    std::vector<double> m(L, 0.0);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SynthSpec s = spec_of(256, 32, seed, sigma);
      s.chain_len = L;
      const auto planted = gen_chain(s);
      const auto chain = match_chain(planted.saes);
      for (std::size_t k = 1; k < L; ++k)
        m[k] += agreement(chain.span(0, k), match_span_exact(planted.saes, 0, k).permutation) / 10.0;
    }
    std::string line;
    for (std::size_t k = 1; k < L; ++k) {
      sweep.rows.push_back({sigma, static_cast<std::int64_t>(k), m[k]});
      line += fmt(" %.3f", m[k]);
    }
    std::printf("[INFO] AC5 sigma=%.1f agreement k=1..7:%s\n", sigma, line.c_str());
  }
  io::write_report_csv(sweep, out_dir / "acceptance_composition_sweep.csv");

  report("AC5", inversions <= 1 && small && t < 600.0, "composition agreement decays with distance",
         fmt("k=1..7: %s; %d inversion(s); %.2f s (limit 600 s)", curve.c_str(), inversions, t));
}

void ac6() {
  double worst_rr = 0.0;
  bool complement = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SaeParams a = gen_sae(spec_of(256, 32, seed));
    const Permutation p{Rng(seed, 9).permutation(256), 0, 1, Provenance::exact};
    SaeParams b = permute_features(a, p.map);
    b.layer_id = 1;
    const auto x = gen_activations(a, 512, seed).hidden;
    const auto y = encode_permute_decode(a, b, p, x);
    auto recon = reconstruct_batch(a, x);
    recon.layer_id = 1;
    const auto ev = explained_variance(y, recon);
    worst_rr = std::max(worst_rr, std::abs(ev.residual_ratio));
    complement = complement && ev.ev + ev.residual_ratio == 1.0;
  }
  report("AC6", worst_rr <= 1e-10 && complement, "pruning exactness limit",
         fmt("max residual_ratio %.3g (tol 1e-10); ev + residual_ratio == 1 exactly: %s", worst_rr,
             complement ? "yes" : "no"));
}

void ac7() {
  bool bitwise = true;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pair = gen_planted_pair(spec_of(256, 32, seed, 0.05));
    const auto r = match_layers(pair.a, pair.b);
    const auto x = gen_activations(pair.a, 256, seed).hidden;
    const auto full = quantile_decode(pair.a, pair.b, r, 1.0, x);
    const auto epd = encode_permute_decode(pair.a, pair.b, r.permutation, x);
    bitwise = bitwise && std::memcmp(full.data.flat().data(), epd.data.flat().data(),
                                     sizeof(double) * full.data.size()) == 0;
    const auto none = quantile_decode(pair.a, pair.b, r, 0.0, x);
    auto want = reconstruct_batch(pair.a, x).data;
    for (std::size_t t = 0; t < want.rows(); ++t)
      for (std::size_t k = 0; k < want.cols(); ++k) want(t, k) += pair.b.b_dec[k] - pair.a.b_dec[k];
    worst = std::max(worst, max_abs(none.data, want));
  }
  report("AC7", bitwise && worst <= 1e-12, "quantile boundaries",
         fmt("q=1 bitwise equal to encode-permute-decode: %s; q=0 max |diff| %.3g (tol 1e-12)",
             bitwise ? "yes" : "no", worst));
}

void ac8() {
  double min_score = 1.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pair = gen_planted_pair(spec_of(256, 32, seed));
    const auto [ha, hb] = gen_paired_stream(pair.a, pair.b, pair.truth, 400, seed);
    const auto s = matching_score(encode_batch(pair.a, ha), encode_batch(pair.b, hb), pair.truth);
    min_score = std::min(min_score, s.score);
  }
  Rng rng(8);
  double same = 0.0, shift = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Matrix<double> a(16, 50), b(16, 50);
    for (double& v : a.flat()) v = 4.0 * rng.normal();
    for (double& v : b.flat()) v = 4.0 * rng.normal();
    std::vector<std::size_t> tg(16);
    for (auto& t : tg) t = rng.index(50);
    const ActivationBatch la{a, ActivationKind::logits, 0}, lb{b, ActivationKind::logits, 0};
    same = std::max(same, std::abs(delta_cross_entropy(la, la, tg)));
    Matrix<double> sa = a, sb = b;
    for (std::size_t t = 0; t < 16; ++t) {
      const double ca = 20.0 * rng.normal(), cb = 20.0 * rng.normal();
      for (double& v : sa.row(t)) v += ca;
      for (double& v : sb.row(t)) v += cb;
    }
    const double base = delta_cross_entropy(lb, la, tg);
    const double moved = delta_cross_entropy(ActivationBatch{sb, ActivationKind::logits, 0},
                                             ActivationBatch{sa, ActivationKind::logits, 0}, tg);
    shift = std::max(shift, std::abs(base - moved));
  }
  report("AC8", min_score == 1.0 && same == 0.0 && shift <= 1e-12, "metric identities",
         fmt("min matching score %.6f on permuted copies; |dCE| on identical logits %.3g; "
             "max shift change %.3g (tol 1e-12)",
             min_score, same, shift));
}

std::vector<std::uint8_t> raw_container(const std::string& header, std::size_t payload_bytes,
                                        std::uint32_t version = 1, const char* magic = "SAEM") {
  std::vector<std::uint8_t> out(magic, magic + 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(version >> (8 * i)));
  const std::uint64_t n = header.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  out.insert(out.end(), header.begin(), header.end());
  // payload of 0.5 (a valid positive threshold everywhere)
  for (std::size_t k = 0; k < payload_bytes / 8; ++k) {
    const auto bits = std::bit_cast<std::uint64_t>(0.5);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

std::string one_by_one(const std::string& theta) {
  return R"({"meta":{"kind":"sae","layer_id":0,"folded":false},"tensors":{)"
         R"("w_enc":{"dtype":"f64","shape":[1,1],"offset":0,"nbytes":8},)"
         R"("b_enc":{"dtype":"f64","shape":[1],"offset":8,"nbytes":8},)"
         R"("w_dec":{"dtype":"f64","shape":[1,1],"offset":16,"nbytes":8},)"
         R"("b_dec":{"dtype":"f64","shape":[1],"offset":24,"nbytes":8})" +
         theta + "}}";
}

void ac9(const fs::path& out_dir) {
  const fs::path dir = out_dir / "acceptance_io";
  fs::create_directories(dir);
  int sae_bad = 0, perm_bad = 0;
  Rng rng(909);
  for (int n = 0; n < 100; ++n) {
    SynthSpec s = spec_of(1 + rng.index(300), 1 + rng.index(40), 5000 + n, 0.1);
    auto pair = gen_planted_pair(s);
    SaeParams sae = n % 3 == 0 ? fold_params(pair.b) : pair.b;
    sae.layer_id = n;
    io::write_sae(sae, dir / "sae.saem");
    if (!(io::read_sae(dir / "sae.saem") == sae)) ++sae_bad;

    const auto r = match_layers(pair.a, pair.b);
    io::write_permutation(io::to_record(r), dir / "perm.json");
    const auto back = io::read_permutation(dir / "perm.json");
    if (!(back.permutation == r.permutation) || back.total_cost != r.total_cost ||
        back.per_pair_mse != r.per_pair_mse || back.config_fingerprint != r.config_fingerprint)
      ++perm_bad;
  }

  auto load = [](std::vector<std::uint8_t> b) {
    return [b = std::move(b)] { io::sae_from_container(io::decode_container(b)); };
  };
  const std::string theta_ok = R"(,"theta":{"dtype":"f64","shape":[1],"offset":32,"nbytes":8})";
  auto truncated = raw_container(one_by_one(theta_ok), 40);
  truncated.resize(truncated.size() - 5);
  struct Case {
    const char* name;
    std::function<void()> run;
    ErrorKind want;
  };
  const std::vector<Case> corpus{
      {"bad magic", load(raw_container(one_by_one(theta_ok), 40, 1, "MEAS")), ErrorKind::bad_magic},
      {"bad version", load(raw_container(one_by_one(theta_ok), 40, 7)), ErrorKind::unsupported_version},
      {"bad JSON", load(raw_container("{\"tensors\":", 40)), ErrorKind::malformed_header},
      {"truncated", load(truncated), ErrorKind::out_of_bounds},
      {"overlap",
       load(raw_container(one_by_one(R"(,"theta":{"dtype":"f64","shape":[1],"offset":16,"nbytes":8})"), 40)),
       ErrorKind::overlapping_tensors},
      {"theta [F+1]",
       load(raw_container(one_by_one(R"(,"theta":{"dtype":"f64","shape":[2],"offset":32,"nbytes":16})"), 48)),
       ErrorKind::shape_mismatch},
      {"missing theta", load(raw_container(one_by_one(""), 32)), ErrorKind::missing_tensor},
      {"unknown dtype",
       load(raw_container(one_by_one(R"(,"theta":{"dtype":"i8","shape":[1],"offset":32,"nbytes":8})"), 40)),
       ErrorKind::malformed_header},
  };
  std::string wrong;
  for (const auto& c : corpus) {
    const ErrorKind got = kind_of(c.run);
    if (got != c.want) wrong += std::string(wrong.empty() ? "" : ", ") + c.name;
  }

  // random corruptions must be rejected cleanly or load, never crash
  const auto good = io::encode_container(io::sae_to_container(gen_sae(spec_of(8, 4, 1))));
  int fuzz_unexpected = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    auto b = good;
    for (int e = 0; e < 3; ++e) b[rng.index(b.size())] = static_cast<std::uint8_t>(rng.index(256));
    if (trial % 3 == 0) b.resize(rng.index(b.size()));
    try {
      io::sae_from_container(io::decode_container(b));
    } catch (const Error&) {
    } catch (...) {
      ++fuzz_unexpected;
    }
  }
  fs::remove_all(dir);
  report("AC9", sae_bad == 0 && perm_bad == 0 && wrong.empty() && fuzz_unexpected == 0, "I/O fidelity",
         fmt("%d/100 SAE and %d/100 permutation round trips differ; %zu malformed cases, wrong kind: %s; "
             "%d non-library exceptions in 2000 corruptions",
             sae_bad, perm_bad, corpus.size(), wrong.empty() ? "none" : wrong.c_str(), fuzz_unexpected));
}

void ac10() {
  Rng rng(1010);
  auto t0 = Clock::now();
  const auto c1k = uniform_cost(1024, rng);
  t0 = Clock::now();
  const auto r1k = solve_lap(c1k);
  const double t1k = seconds_since(t0);
  const auto c4k = uniform_cost(4096, rng);
  t0 = Clock::now();
  const auto r4k = solve_lap(c4k);
  const double t4k = seconds_since(t0);
  const bool lap_ok = r1k.permutation.is_bijection() && r4k.permutation.is_bijection() &&
                      t1k <= 10.0 && t4k <= 600.0;
  report("AC10a", lap_ok, "dense LAP runtime",
         fmt("F=1024 %.2f s (limit 10 s); F=4096 %.2f s (limit 600 s)", t1k, t4k));

  const SaeParams a = fold_params(gen_sae(spec_of(4096, 256, 1)));
  const SaeParams b = fold_params(gen_sae(spec_of(4096, 256, 2)));
  const unsigned hw = std::thread::hardware_concurrency();
  std::vector<double> times;
  CostMatrix reference;
  bool identical = true;
  std::string timing;
  for (unsigned threads : {1u, 2u, 4u, 8u}) {
    CostOptions o;
    o.threads = threads;
    t0 = Clock::now();
    auto c = build_cost_matrix(a, b, o);
    times.push_back(seconds_since(t0));
    timing += fmt("%s%u:%.2fs", threads == 1 ? "" : " ", threads, times.back());
    if (threads == 1)
      reference = std::move(c);
    else
      identical = identical && std::memcmp(reference.data.flat().data(), c.data.flat().data(),
                                            sizeof(double) * c.data.size()) == 0;
  }
  report("AC10b", identical, "cost matrix F=4096 d=256 byte-identical across thread counts",
         "threads " + timing);

  const double speedup = times[0] / times[3];
  if (hw >= 8) {
    report("AC10c", speedup >= 4.0, "cost matrix speedup at 8 threads",
           fmt("%.2fx (need >= 4x, %u hardware threads)", speedup, hw));
  } else {
    std::printf("[SKIP] AC10c cost matrix speedup at 8 threads: not measurable on this machine "
                "(%u hardware thread(s), criterion assumes 8 cores); measured %.2fx\n",
                hw, speedup);
  }
  report("AC10", lap_ok && identical && (hw < 8 || speedup >= 4.0), "performance",
         hw >= 8 ? "all sub-checks evaluated"
                 : "runtime and determinism sub-checks evaluated; speedup sub-check skipped (see AC10c)");
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out_dir = argc > 1 ? fs::path(argv[1]) : fs::current_path();
  fs::create_directories(out_dir);
  const auto t0 = Clock::now();

  criterion("AC1", "folding invariance", ac1);
  criterion("AC2", "LAP exactness", ac2);
  criterion("AC3", "planted recovery", ac3);
  criterion("AC4", "folded vs unfolded under norm growth", [&] { ac4(out_dir); });
  criterion("AC5", "composition agreement decays with distance", [&] { ac5(out_dir); });
  criterion("AC6", "pruning exactness limit", ac6);
  criterion("AC7", "quantile boundaries", ac7);
  criterion("AC8", "metric identities", ac8);
  criterion("AC9", "I/O fidelity", [&] { ac9(out_dir); });
  criterion("AC10", "performance", ac10);

  std::printf("%s: %d failing criteria, %.1f s total\n", failures ? "FAILED" : "OK", failures,
              seconds_since(t0));
  return failures ? 1 : 0;
}
