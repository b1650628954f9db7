// saematch command-line driver.
//
// Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical or
// domain error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "saematch/io.hpp"
#include "saematch/saematch.hpp"

namespace fs = std::filesystem;
using namespace saematch;
using io::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string layer_tag(int layer) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", layer);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorKind::io, "cannot create directory '" + dir.string() + "'");
}

void write_json(const json& j, const std::string& out) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty())
    std::cout << text;
  else
    io::write_text(out, text);
}

ActivationBatch load_batch(const std::string& path, ActivationKind expect, bool skip_first) {
  ActivationBatch b = io::read_activations(path);
  require(b.kind == expect, ErrorKind::type,
          "'" + path + "' holds " + io::to_string(b.kind) + " activations, expected " +
              io::to_string(expect));
  if (skip_first) b = b.drop_first(1);
  return b;
}

/// All SAE files in a directory, ordered by layer id.
std::vector<SaeParams> load_sae_dir(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::io, "'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".saem") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<SaeParams> saes;
  for (const auto& f : files) {
    const auto c = io::decode_container(io::read_file_bytes(f));
    if (c.meta.value("kind", "") != "sae") continue;
    saes.push_back(io::sae_from_container(c));
  }
  require(saes.size() >= 2, ErrorKind::io,
          "'" + dir.string() + "' holds fewer than two SAE files");
  std::stable_sort(saes.begin(), saes.end(),
                   [](const SaeParams& a, const SaeParams& b) { return a.layer_id < b.layer_id; });
  return saes;
}

/// Permutation files named <prefix>_<from>_<to>.json in a directory.
std::map<std::pair<int, int>, io::PermutationRecord> load_perm_dir(const fs::path& dir,
                                                                  const std::string& prefix) {
  require(fs::is_directory(dir), ErrorKind::io, "'" + dir.string() + "' is not a directory");
  const std::regex name(prefix + R"(_(-?\d+)_(-?\d+)\.json)");
  std::map<std::pair<int, int>, io::PermutationRecord> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string fname = e.path().filename().string();
    if (!e.is_regular_file() || !std::regex_match(fname, m, name)) continue;
    auto rec = io::read_permutation(e.path());
    out.emplace(std::pair{rec.permutation.from_layer, rec.permutation.to_layer}, std::move(rec));
  }
  return out;
}

MatchOptions match_options(bool unfolded, const std::string& weights, unsigned threads,
                           bool float_storage) {
  MatchOptions o;
  o.folded = !unfolded;
  o.weight_set = parse_weight_set(weights);
  o.threads = threads;
  o.float_storage = float_storage;
  return o;
}

// --- commands --------------------------------------------------------------

struct SynthArgs {
  std::string mode;
  SynthSpec spec;
  std::string out_dir;
  std::size_t tokens = 0;
  std::uint64_t token_seed = 1;
};

void run_synth(SynthArgs a) {
  if (a.mode == "pair" && a.spec.chain_len != 2)
    throw UsageError("synth pair always has --chain-len 2");
  a.spec.validate();
  ensure_dir(a.out_dir);
  const fs::path dir = a.out_dir;

  json manifest = {{"mode", a.mode},
                   {"d", a.spec.d},
                   {"f", a.spec.F},
                   {"seed", a.spec.seed},
                   {"noise", a.spec.noise_sigma},
                   {"theta_lo", a.spec.theta_lo},
                   {"theta_hi", a.spec.theta_hi},
                   {"scale_growth", a.spec.scale_growth},
                   {"chain_len", a.spec.chain_len},
                   {"rng", std::string(Rng::algorithm)}};

  if (a.mode == "pair") {
    const PlantedPair pair = a.spec.scale_growth == 1.0 ? gen_planted_pair(a.spec)
                                                         : gen_norm_growth_pair(a.spec);
    io::write_sae(pair.a, dir / "sae_a.saem");
    io::write_sae(pair.b, dir / "sae_b.saem");
    io::write_permutation({pair.truth, std::nullopt, {}, "planted"}, dir / "truth.json");
    if (a.tokens > 0) {
      const auto [ha, hb] = gen_paired_stream(pair.a, pair.b, pair.truth, a.tokens, a.token_seed);
      io::write_activations(ha, dir / "hidden_a.saem");
      io::write_activations(hb, dir / "hidden_b.saem");
      io::write_activations(encode_batch(pair.a, ha), dir / "features_a.saem");
      io::write_activations(encode_batch(pair.b, hb), dir / "features_b.saem");
      manifest["tokens"] = a.tokens;
      manifest["token_seed"] = a.token_seed;
    }
  } else {
    const PlantedChain chain = gen_chain(a.spec);
    for (const auto& s : chain.saes) io::write_sae(s, dir / ("layer_" + layer_tag(s.layer_id) + ".saem"));
    for (const auto& t : chain.cumulative_truths)
      io::write_permutation({t, std::nullopt, {}, "planted"},
                            dir / ("truth_" + layer_tag(t.from_layer) + "_" + layer_tag(t.to_layer) + ".json"));
    for (std::size_t k = 1; k < chain.step_truths.size(); ++k) {
      const auto& t = chain.step_truths[k];
      io::write_permutation({t, std::nullopt, {}, "planted"},
                            dir / ("truth_" + layer_tag(t.from_layer) + "_" + layer_tag(t.to_layer) + ".json"));
    }
  }
  io::write_text(dir / "synth.json", manifest.dump(2) + "\n");
}

void run_fold(const std::string& in, const std::string& out) {
  io::write_sae(fold_params(io::read_sae(in)), out);
}

struct MatchArgs {
  std::string sae_a, sae_b, weights = "enc-dec-bias", out, truth, report;
  bool unfolded = false, float_storage = false;
  unsigned threads = 1;
};

void run_match(const MatchArgs& a) {
  const auto opts = match_options(a.unfolded, a.weights, a.threads, a.float_storage);
  const MatchResult r = match_layers(io::read_sae(a.sae_a), io::read_sae(a.sae_b), opts);
  io::write_permutation(io::to_record(r), a.out);

  json summary = {{"from_layer", r.permutation.from_layer},
                  {"to_layer", r.permutation.to_layer},
                  {"total_cost", r.total_cost},
                  {"weights", to_string(r.weight_set)},
                  {"folded", r.folded}};
  io::CsvTable table{{"from_layer", "to_layer", "weights", "folded", "total_cost", "accuracy"}, {}};
  std::vector<io::CsvValue> row{std::int64_t{r.permutation.from_layer},
                                std::int64_t{r.permutation.to_layer},
                                std::string(to_string(r.weight_set)),
                                std::string(r.folded ? "true" : "false"), r.total_cost};
  if (!a.truth.empty()) {
    const auto truth = io::read_permutation(a.truth);
    const double acc = recovery_accuracy(r.permutation, truth.permutation);
    summary["accuracy"] = acc;
    row.push_back(acc);
  } else {
    row.push_back(std::string());
  }
  if (!a.report.empty()) {
    table.rows.push_back(std::move(row));
    io::write_report_csv(table, a.report);
  }
  std::cout << summary.dump() << "\n";
}

void run_compose(const std::vector<std::string>& perms, const std::string& out) {
  if (perms.size() < 2) throw UsageError("compose needs at least two permutation files");
  Permutation acc = io::read_permutation(perms[0]).permutation;
  for (std::size_t k = 1; k < perms.size(); ++k)
    acc = compose(acc, io::read_permutation(perms[k]).permutation);
  io::write_permutation({acc, std::nullopt, {}, ""}, out);
}

struct ChainArgs {
  std::string saes, out_dir, weights = "enc-dec-bias";
  bool unfolded = false;
  unsigned threads = 1;
};

void run_chain_match(const ChainArgs& a) {
  const auto saes = load_sae_dir(a.saes);
  const auto opts = match_options(a.unfolded, a.weights, a.threads, false);
  const PermutationChain chain = match_chain(saes, opts);
  ensure_dir(a.out_dir);
  const fs::path dir = a.out_dir;
  auto name = [&](const char* prefix, std::size_t i, std::size_t j) {
    return dir / (std::string(prefix) + "_" + layer_tag(saes[i].layer_id) + "_" +
                  layer_tag(saes[j].layer_id) + ".json");
  };

  for (std::size_t k = 0; k < chain.steps.size(); ++k)
    io::write_permutation(io::to_record(chain.steps[k]), name("step", k, k + 1));

  io::CsvTable table{{"from_layer", "to_layer", "distance", "agreement"}, {}};
  for (std::size_t i = 0; i + 1 < saes.size(); ++i) {
    for (std::size_t j = i + 1; j < saes.size(); ++j) {
      double agree = 1.0;
      if (j - i > 1) {
        const Permutation composed = chain.span(i, j);
        const MatchResult exact = match_span_exact(saes, i, j, opts);
        io::write_permutation({composed, std::nullopt, {}, exact.config_fingerprint},
                              name("composed", i, j));
        io::write_permutation(io::to_record(exact), name("exact", i, j));
        agree = agreement(composed, exact.permutation);
      }
      table.rows.push_back({std::int64_t{saes[i].layer_id}, std::int64_t{saes[j].layer_id},
                            std::int64_t(j - i), agree});
    }
  }
  io::write_report_csv(table, dir / "agreement.csv");
}

struct ScoreArgs {
  std::string features_a, features_b, perm, out;
  bool symmetric = false, skip_first = false;
};

void run_score(const ScoreArgs& a) {
  const auto fa = load_batch(a.features_a, ActivationKind::feature, a.skip_first);
  const auto fb = load_batch(a.features_b, ActivationKind::feature, a.skip_first);
  const auto p = io::read_permutation(a.perm).permutation;
  const auto mode = a.symmetric ? ScoreMode::jaccard : ScoreMode::conditional;
  const MatchingScore s = matching_score(fa, fb, p, mode);
  json per_pair = json::array();
  for (const auto& ps : s.per_pair)
    per_pair.push_back({{"source", ps.source}, {"target", ps.target}, {"score", ps.score}});
  write_json({{"score", s.score},
              {"mode", a.symmetric ? "jaccard" : "conditional"},
              {"n_valid_pairs", s.n_valid_pairs},
              {"n_excluded_pairs", s.n_excluded_pairs},
              {"per_pair", per_pair}},
             a.out);
}

struct PruneArgs {
  std::string sae_t, sae_t1, perm, hidden_t, hidden_t1_ref, out;
  std::vector<double> quantiles;
  bool skip_first = false;
};

void run_prune_sim(const PruneArgs& a) {
  const auto st = io::read_sae(a.sae_t);
  const auto st1 = io::read_sae(a.sae_t1);
  const auto rec = io::read_permutation(a.perm);
  const auto x_t = load_batch(a.hidden_t, ActivationKind::hidden, a.skip_first);
  const auto x_ref = load_batch(a.hidden_t1_ref, ActivationKind::hidden, a.skip_first);
  const MatchResult match = io::to_match_result(rec);

  io::CsvTable table{{"quantile", "n_low", "n_high", "ev", "residual_ratio"}, {}};
  std::vector<double> qs = a.quantiles.empty() ? std::vector<double>{1.0} : a.quantiles;
  for (double q : qs) {
    ActivationBatch approx;
    std::size_t n_low = match.permutation.size();
    if (q == 1.0 && match.per_pair_mse.empty()) {
      approx = encode_permute_decode(st, st1, match.permutation, x_t);
    } else {
      require(!match.per_pair_mse.empty(), ErrorKind::shape_mismatch,
              "permutation file has no per-pair costs; quantiles below 1 need them");
      n_low = quantile_split(match, q).low.size();
      approx = quantile_decode(st, st1, match, q, x_t);
    }
    const auto ev = explained_variance(approx, x_ref);
    table.rows.push_back({q, std::int64_t(n_low), std::int64_t(match.permutation.size() - n_low),
                          ev.ev, ev.residual_ratio});
  }
  io::write_report_csv(table, a.out);
}

struct DeltaArgs {
  std::string logits_orig, logits_mod, targets, out;
  bool skip_first = false;
};

void run_delta_ce(const DeltaArgs& a) {
  const auto orig = load_batch(a.logits_orig, ActivationKind::logits, a.skip_first);
  const auto mod = load_batch(a.logits_mod, ActivationKind::logits, a.skip_first);
  auto targets = io::read_targets(a.targets);
  if (a.skip_first && !targets.empty()) targets.erase(targets.begin());
  const double d = delta_cross_entropy(mod, orig, targets);
  write_json({{"delta_ce_nats", d}, {"tokens", orig.tokens()}}, a.out);
}

void run_report(const std::string& kind, const std::string& in_dir, const std::string& out) {
  if (kind == "mse-by-layer") {
    const auto steps = load_perm_dir(in_dir, "step");
    require(!steps.empty(), ErrorKind::io, "no step_*.json permutation files in '" + in_dir + "'");
    io::CsvTable table{{"from_layer", "to_layer", "n_features", "total_cost", "mean_mse",
                        "median_mse", "max_mse"},
                       {}};
    for (const auto& [key, rec] : steps) {
      require(!rec.per_pair_mse.empty(), ErrorKind::shape_mismatch,
              "step permutation lacks per-pair costs");
      auto v = rec.per_pair_mse;
      const double mean = pairwise_sum(v) / static_cast<double>(v.size());
      const double median = empirical_quantile(v, 0.5);
      const double mx = *std::max_element(v.begin(), v.end());
      table.rows.push_back({std::int64_t{key.first}, std::int64_t{key.second},
                            std::int64_t(v.size()), rec.total_cost.value_or(pairwise_sum(v)), mean,
                            median, mx});
    }
    io::write_report_csv(table, out);
    return;
  }
  // agreement-by-distance
  const auto steps = load_perm_dir(in_dir, "step");
  const auto composed = load_perm_dir(in_dir, "composed");
  const auto exact = load_perm_dir(in_dir, "exact");
  require(!steps.empty(), ErrorKind::io, "no step_*.json permutation files in '" + in_dir + "'");
  std::vector<int> layers;
  for (const auto& [key, rec] : steps) {
    layers.push_back(key.first);
    layers.push_back(key.second);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  auto position = [&](int layer) {
    return std::lower_bound(layers.begin(), layers.end(), layer) - layers.begin();
  };
  std::map<std::int64_t, std::vector<double>> by_distance;
  for (const auto& [key, rec] : steps) by_distance[position(key.second) - position(key.first)].push_back(1.0);
  for (const auto& [key, c] : composed) {
    const auto it = exact.find(key);
    require(it != exact.end(), ErrorKind::missing_tensor,
            "composed permutation " + std::to_string(key.first) + "->" +
                std::to_string(key.second) + " has no exact counterpart");
    by_distance[position(key.second) - position(key.first)].push_back(
        agreement(c.permutation, it->second.permutation));
  }
  io::CsvTable table{{"distance", "n_pairs", "mean_agreement", "min_agreement"}, {}};
  for (const auto& [dist, v] : by_distance)
    table.rows.push_back({dist, std::int64_t(v.size()),
                          pairwise_sum(v) / static_cast<double>(v.size()),
                          *std::min_element(v.begin(), v.end())});
  io::write_report_csv(table, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Align sparse autoencoder features across layers"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate planted SAE pairs or chains");
  c_synth->add_option("mode", synth.mode, "pair or chain")->required()->check(CLI::IsMember({"pair", "chain"}));
  c_synth->add_option("--d", synth.spec.d, "Hidden size")->capture_default_str();
  c_synth->add_option("--f", synth.spec.F, "Number of features")->capture_default_str();
  c_synth->add_option("--seed", synth.spec.seed, "Generator seed")->capture_default_str();
  c_synth->add_option("--noise", synth.spec.noise_sigma, "Noise std relative to folded norms")->capture_default_str();
  c_synth->add_option("--scale-growth", synth.spec.scale_growth, "Hidden-norm growth per layer")->capture_default_str();
  c_synth->add_option("--chain-len", synth.spec.chain_len, "Number of layers (chain)")->capture_default_str();
  c_synth->add_option("--theta-lo", synth.spec.theta_lo)->capture_default_str();
  c_synth->add_option("--theta-hi", synth.spec.theta_hi)->capture_default_str();
  c_synth->add_option("--tokens", synth.tokens, "Also write paired hidden/feature streams (pair)");
  c_synth->add_option("--token-seed", synth.token_seed)->capture_default_str();
  c_synth->add_option("--out-dir,--output", synth.out_dir)->required();

  std::string fold_in, fold_out;
  auto* c_fold = app.add_subcommand("fold", "Fold thresholds into the weights");
  c_fold->add_option("--sae", fold_in)->required();
  c_fold->add_option("--out,--output", fold_out)->required();

  MatchArgs match;
  auto* c_match = app.add_subcommand("match", "Match the features of two SAEs");
  c_match->add_option("--sae-a", match.sae_a)->required();
  c_match->add_option("--sae-b", match.sae_b)->required();
  c_match->add_flag("--unfolded", match.unfolded, "Match raw weights without folding");
  c_match->add_option("--weights", match.weights)->check(CLI::IsMember({"dec", "enc", "enc-dec-bias"}))->capture_default_str();
  c_match->add_option("--threads", match.threads, "Cost-matrix workers (0 = all cores)")->capture_default_str();
  c_match->add_flag("--float-storage", match.float_storage, "Store costs in 32-bit floats");
  c_match->add_option("--truth", match.truth, "Planted permutation to score against");
  c_match->add_option("--report", match.report, "CSV summary path");
  c_match->add_option("--out,--output", match.out)->required();

  std::vector<std::string> compose_in;
  std::string compose_out;
  auto* c_compose = app.add_subcommand("compose", "Chain permutation files");
  c_compose->add_option("--perms", compose_in)->required();
  c_compose->add_option("--out,--output", compose_out)->required();

  ChainArgs chain;
  auto* c_chain = app.add_subcommand("chain-match", "Match every consecutive layer pair");
  c_chain->add_option("--saes", chain.saes, "Directory of SAE files")->required();
  c_chain->add_flag("--unfolded", chain.unfolded);
  c_chain->add_option("--weights", chain.weights)->check(CLI::IsMember({"dec", "enc", "enc-dec-bias"}))->capture_default_str();
  c_chain->add_option("--threads", chain.threads)->capture_default_str();
  c_chain->add_option("--out-dir,--output", chain.out_dir)->required();

  ScoreArgs score;
  auto* c_score = app.add_subcommand("score", "Co-activation score of matched features");
  c_score->add_option("--features-a", score.features_a)->required();
  c_score->add_option("--features-b", score.features_b)->required();
  c_score->add_option("--perm", score.perm)->required();
  c_score->add_flag("--symmetric", score.symmetric, "Jaccard instead of conditional");
  c_score->add_flag("--skip-first-token", score.skip_first);
  c_score->add_option("--out,--output", score.out, "JSON path (stdout if omitted)");

  PruneArgs prune;
  auto* c_prune = app.add_subcommand("prune-sim", "Skip a layer with encode-permute-decode");
  c_prune->add_option("--sae-t", prune.sae_t)->required();
  c_prune->add_option("--sae-t1", prune.sae_t1)->required();
  c_prune->add_option("--perm", prune.perm)->required();
  c_prune->add_option("--hidden-t", prune.hidden_t)->required();
  c_prune->add_option("--hidden-t1-ref", prune.hidden_t1_ref)->required();
  c_prune->add_option("--quantile", prune.quantiles, "May be repeated")->check(CLI::Range(0.0, 1.0));
  c_prune->add_flag("--skip-first-token", prune.skip_first);
  c_prune->add_option("--out,--output", prune.out)->required();

  DeltaArgs delta;
  auto* c_delta = app.add_subcommand("delta-ce", "Cross-entropy change in nats");
  c_delta->add_option("--logits-orig", delta.logits_orig)->required();
  c_delta->add_option("--logits-mod", delta.logits_mod)->required();
  c_delta->add_option("--targets", delta.targets)->required();
  c_delta->add_flag("--skip-first-token", delta.skip_first);
  c_delta->add_option("--out,--output", delta.out, "JSON path (stdout if omitted)");

  std::string report_kind, report_in, report_out;
  auto* c_report = app.add_subcommand("report", "Figure data from a chain-match directory");
  c_report->add_option("kind", report_kind)->required()->check(CLI::IsMember({"mse-by-layer", "agreement-by-distance"}));
  c_report->add_option("--in-dir", report_in)->required();
  c_report->add_option("--out,--output", report_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "saematch: usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (c_synth->parsed())
      run_synth(synth);
    else if (c_fold->parsed())
      run_fold(fold_in, fold_out);
    else if (c_match->parsed())
      run_match(match);
    else if (c_compose->parsed())
      run_compose(compose_in, compose_out);
    else if (c_chain->parsed())
      run_chain_match(chain);
    else if (c_score->parsed())
      run_score(score);
    else if (c_prune->parsed())
      run_prune_sim(prune);
    else if (c_delta->parsed())
      run_delta_ce(delta);
    else if (c_report->parsed())
      run_report(report_kind, report_in, report_out);
  } catch (const UsageError& e) {
    std::cerr << "saematch: usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "saematch: " << to_string(e.kind()) << ": " << e.what() << "\n";
    return is_format_error(e.kind()) ? kExitData : kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "saematch: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
