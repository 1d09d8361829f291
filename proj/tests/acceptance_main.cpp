// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Each criterion enforces its tolerance and its wall-clock budget.

#include <steerx/attribution.hpp>
#include <steerx/metrics.hpp>
#include <steerx/pipeline.hpp>
#include <steerx/steering.hpp>
#include <steerx/synthbench.hpp>
#include <steerx/table_lm.hpp>

#include "support/test_backends.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

using namespace steerx;
using steerx::testing::abcd_table;
using steerx::testing::CountLm;
using steerx::testing::oracle_delta;
using steerx::testing::TestRng;

namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kVocab = {"a", "b", "c", "d"};
int failures = 0;

void check(bool condition, const std::string& what) {
  if (!condition) throw Error(what);
}

void criterion(int number, const std::string& description, double budget_seconds,
               const std::function<void()>& body) {
  auto start = std::chrono::steady_clock::now();
  std::string failure;
  try {
    body();
  } catch (const std::exception& e) {
    failure = e.what();
  }
  double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (failure.empty() && elapsed > budget_seconds) {
    std::ostringstream over;
    over << "exceeded budget: " << elapsed << "s > " << budget_seconds << "s";
    failure = over.str();
  }
  if (failure.empty()) {
    std::printf("[PASS] criterion %d: %s (%.2fs)\n", number, description.c_str(), elapsed);
  } else {
    std::printf("[FAIL] criterion %d: %s (%.2fs) -- %s\n", number, description.c_str(), elapsed,
                failure.c_str());
    ++failures;
  }
  std::fflush(stdout);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("steerx_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig bench_run_config(const fs::path& dir) {
  RunConfig config;
  config.out_dir = dir / "out";
  config.cache_dir = dir / "cache";
  config.seed = 7;
  config.bench = BenchSpec{};
  config.steering.mechanism = SteerMechanism::IV;
  config.steering.lambda = 0.4;
  config.steering.max_len = 8;
  return config;
}

void criterion1_oracle_equivalence() {
  TableLm lm = abcd_table();

  AttributionReport boosted = token_causal_effects("a", {"a"}, "", lm);
  check(std::abs(boosted.effects[0].delta - std::log(2.0)) < 1e-9,
        "boosted-token delta != ln 2");

  TestRng rng(1001);
  int cases = 0;
  while (cases < 1000) {
    std::string context = rng.random_text(kVocab, 6);
    std::string target = rng.random_text(kVocab, 5, /*allow_empty=*/false);
    std::vector<std::string> rest;
    std::size_t n_rest = rng.pick(3);
    for (std::size_t i = 0; i < n_rest; ++i)
      rest.push_back(rng.random_text(kVocab, 4, /*allow_empty=*/false));

    AttributionReport report = token_causal_effects(target, rest, context, lm);
    std::string factual = join_text({join_text(rest, " "), context});
    for (const auto& effect : report.effects) {
      double expected = oracle_delta(kVocab, 3.0, factual, context, target,
                                     static_cast<std::size_t>(effect.position));
      check(std::abs(effect.delta - expected) < 1e-9, "delta disagrees with the oracle");
    }
    ++cases;
  }
}

void criterion2_null_antisymmetry() {
  TableLm lm = abcd_table();
  TestRng rng(2002);
  for (int trial = 0; trial < 500; ++trial) {
    std::string h = rng.random_text(kVocab, 5, /*allow_empty=*/false);
    std::string c = rng.random_text(kVocab, 4);

    AttributionReport null_report = token_causal_effects(h, {}, c, lm);
    for (const auto& effect : null_report.effects)
      check(effect.delta == 0.0, "empty remaining history must give delta 0 exactly");

    std::vector<std::string> side_a = {rng.random_text(kVocab, 4, false)};
    std::vector<std::string> side_b = {rng.random_text(kVocab, 4, false)};
    AttributionReport forward = token_causal_effects(h, side_a, c, lm, side_b);
    AttributionReport backward = token_causal_effects(h, side_b, c, lm, side_a);
    for (std::size_t t = 0; t < forward.effects.size(); ++t)
      check(forward.effects[t].delta == -backward.effects[t].delta,
            "context swap must negate deltas exactly");
  }
}

void criterion3_anchor_selection() {
  TableLm lm = abcd_table();
  TestRng rng(3003);

  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> histories;
    std::size_t n = 2 + rng.pick(3);
    for (std::size_t i = 0; i < n; ++i)
      histories.push_back(rng.random_text(kVocab, 6, /*allow_empty=*/false));
    auto loo = leave_one_out_attribution(histories, "", lm, SelectionRule::threshold(0.7));

    for (const auto& entry : loo) {
      std::size_t previous = entry.report.effects.size() + 1;
      for (double tau : {0.6, 0.7, 0.8, 0.9}) {
        std::size_t count = select_anchors_threshold(entry.report, tau).tokens.size();
        check(count <= previous, "anchor count must be non-increasing in tau");
        previous = count;
      }
      for (double k : {1.0, 10.0, 50.0, 100.0}) {
        std::size_t expected = static_cast<std::size_t>(
            std::ceil(k / 100.0 * static_cast<double>(entry.report.effects.size())));
        check(select_anchors_topk(entry.report, k).tokens.size() == expected,
              "top-k cardinality must equal ceil(k% * T)");
      }
    }
  }
}

void criterion4_noop_and_linearity() {
  TableLm lm = abcd_table();
  TestRng rng(4004);

  for (int trial = 0; trial < 100; ++trial) {
    std::string h = rng.random_text(kVocab, 4);
    std::string s = rng.random_text(kVocab, 3, /*allow_empty=*/false);
    std::string x = rng.random_text(kVocab, 2);
    GenerateOptions plain;
    plain.max_len = 4;
    std::string unsteered = lm.generate(join_text({"", h, x}), plain);

    check(steer_iv_generate(x, h, s, "", 0.0, lm, 4) == unsteered,
          "lambda = 0 must reproduce the unsteered generation");

    StyleVector sv;
    sv.values = {rng.uniform(), rng.uniform(), -rng.uniform(), 0.25};
    sv.layer = 0;
    check(steer_sv_generate(x, h, "", sv, 0.0, lm, 4) == unsteered,
          "gamma2 = 0 must reproduce the unsteered generation");
  }

  // Exactly-representable regime: integer logits, dyadic lambdas.
  CountLm count_lm(kVocab);
  for (int trial = 0; trial < 50; ++trial) {
    std::string h = rng.random_text(kVocab, 4);
    std::string s = rng.random_text(kVocab, 4, false);
    std::string x = rng.random_text(kVocab, 2);
    std::string prefix = rng.random_text(kVocab, 3);
    SteeredStepLogits unit = iv_step_logits(x, h, s, "", 1.0, prefix, count_lm);
    for (double lambda : {0.5, 1.0, 2.0}) {
      SteeredStepLogits step = iv_step_logits(x, h, s, "", lambda, prefix, count_lm);
      for (std::size_t i = 0; i < step.base.size(); ++i) {
        check(step.steered[i] - step.base[i] == lambda * (unit.steered[i] - unit.base[i]),
              "IV linearity must hold exactly");
      }
    }
  }

  // Definitional decomposition, bit-exact on the table LM.
  for (int trial = 0; trial < 50; ++trial) {
    double lambda = rng.uniform() * 2.0;
    SteeredStepLogits step = iv_step_logits(rng.random_text(kVocab, 2),
                                            rng.random_text(kVocab, 4),
                                            rng.random_text(kVocab, 4, false), "", lambda, "", lm);
    for (std::size_t i = 0; i < step.base.size(); ++i)
      check(step.steered[i] == step.base[i] + lambda * step.influence[i],
            "steered logits must equal base + lambda * influence");
  }
}

void criterion5_blend_collapse_and_ablation() {
  TableLm lm = abcd_table();
  TestRng rng(5005);

  // gamma1 = 1 equals the plain mean hidden-state difference, exactly.
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 1 + rng.pick(4);
    std::vector<HistoryPair> pairs;
    StyleProfile profile;
    for (std::size_t i = 0; i < n; ++i) {
      pairs.push_back({rng.random_text(kVocab, 4, false), rng.random_text(kVocab, 4, false)});
      StyleDescription d;
      d.text = rng.random_text(kVocab, 3, false);
      d.source_history = static_cast<int>(i);
      profile.descriptions.push_back(d);
    }
    StyleVectorTerms terms = style_vector_terms(pairs, profile, 0, lm);
    StyleVector collapsed = style_vector(pairs, profile, 1.0, 0, lm);
    check(collapsed.values == terms.authentic_minus_neutral,
          "gamma1 = 1 must equal the mean hidden-state difference exactly");
  }

  // Pipeline ablation identities, byte-exact.
  fs::path dir = fresh_dir("ablation");
  RunConfig config;
  TableLmSpec spec;
  spec.vocabulary = kVocab;
  spec.boost = 3.0;
  config.table_spec = spec;
  config.out_dir = dir / "out";
  config.cache_dir = dir / "cache";
  config.dataset_path = dir / "dataset.jsonl";
  config.ablation = Ablation::NoAnchors;
  config.steering.mechanism = SteerMechanism::IV;
  config.steering.lambda = 0.8;
  config.steering.max_len = 4;

  DatasetRecord u1;
  u1.user_id = "u1";
  u1.history = {{"c", "a b"}, {"d", "a"}, {"c", "b a"}};
  u1.query = "c";
  u1.reference = "a b";
  jsonl::write_lines(config.dataset_path, {dataset_line(u1)});

  std::ostringstream quiet;
  pipeline::run_attribute(config, quiet);
  pipeline::run_steer(config, quiet);
  std::vector<DatasetRecord> dataset = read_dataset(config.dataset_path);
  const DatasetRecord& user = dataset[0];
  std::vector<std::size_t> retrieved =
      retrieve_context(user.query, user.history, lm, config.retrieval_top_k);
  std::vector<std::string> parts;
  for (std::size_t idx : retrieved)
    parts.push_back(join_text({user.history[idx].input, user.history[idx].output}));
  std::string h_text = join_text(parts, "\n");

  auto generated_text = [&](const RunConfig& c) {
    auto lines = jsonl::read_lines(pipeline::generations_path(c));
    check(lines.size() == 1, "expected one generation line");
    return lines[0].at("text").get<std::string>();
  };

  std::string cos_baseline =
      steer_iv_generate(user.query, h_text, h_text, "", 0.8, lm, 4);
  check(generated_text(config) == cos_baseline,
        "no-anchors IV must equal raw-history context steering byte-exactly");

  RunConfig sv_config = config;
  sv_config.steering.mechanism = SteerMechanism::SV;
  sv_config.steering.gamma1 = 1.0;
  sv_config.steering.gamma2 = 2.0;
  sv_config.steering.layer = 0;
  pipeline::run_steer(sv_config, quiet);
  std::vector<HistoryPair> pairs;
  for (const auto& h : user.history)
    pairs.push_back({h.output, neutral_response(h.input, "", lm, 4)});
  StyleVector cas = style_vector(pairs, StyleProfile{}, 1.0, 0, lm);
  std::string cas_baseline = steer_sv_generate(user.query, h_text, "", cas, 2.0, lm, 4);
  check(generated_text(sv_config) == cas_baseline,
        "no-anchors SV at gamma1 = 1 must equal the plain mean-difference steering");
}

void criterion6_synthetic_bench() {
  RunConfig config;
  config.bench = BenchSpec{};  // rho = 0.15, 3 users x 4 histories x 20 tokens, boost 3
  config.seed = 7;
  std::vector<SyntheticUser> users = pipeline::bench_users(config);
  TableLm lm = build_table_lm(users, config.bench->boost);
  std::string prompt = bench_task_prompt(users);

  std::vector<std::vector<LooEntry>> loo;
  std::vector<AttributionReport> pooled;
  for (const auto& user : users) {
    std::vector<std::string> outputs, contexts;
    for (const auto& h : user.histories) {
      outputs.push_back(h.output);
      contexts.push_back(join_text({prompt, h.input}));
    }
    loo.push_back(leave_one_out_attribution(outputs, contexts, lm,
                                            SelectionRule::threshold(0.5)));
    for (const auto& entry : loo.back()) pooled.push_back(entry.report);
  }

  BenchResult gap = evaluate_attribution(users, loo);  // AUC brute-forces all pairs
  check(gap.mean_auc == 1.0, "ranking AUC must equal 1.0 exactly");
  check(gap.all_separated, "planted deltas must strictly dominate the rest");

  for (std::size_t u = 0; u < users.size(); ++u) {
    for (auto& entry : loo[u]) {
      entry.anchors = select_anchors_threshold(entry.report, gap.per_user[u].separating_tau);
      entry.anchors.history_index = entry.history_index;
    }
  }
  BenchResult at_star = evaluate_attribution(users, loo);
  check(at_star.mean_precision == 1.0 && at_star.mean_recall == 1.0,
        "precision = recall = 1 at the separating tau");

  EffectStats stats = effect_distribution_stats(pooled, 0.5);
  check(stats.skewness > 1.0, "pooled delta skewness must exceed 1 at rho = 0.15");
}

void criterion7_metric_hand_values() {
  auto rouge = metrics::rouge1("the cat sat", "the cat");
  check(std::abs(rouge.f1 - 0.8) < 1e-9, "ROUGE-1 F1 != 0.8");

  double bleu = metrics::bleu({"a b c d"}, {"a b c d e"});
  check(std::abs(bleu - 77.88) < 0.01, "BLEU brevity-penalty case != 77.88");

  check(std::abs(metrics::meteor("cat", "cat") - 0.5) < 1e-9, "METEOR identity != 0.5");

  TableLm lm = abcd_table();
  metrics::TokenEmbedder embedder = [&lm](const std::string& token) { return lm.embed(token); };
  auto embed = metrics::embed_score("a", "a b", embedder);
  check(std::abs(embed.f1 - 2.0 / 3.0) < 1e-9, "embed F1 != 2/3");
}

void criterion8_aggregation() {
  metrics::MetricReport rag{0.3061, 0.2090, 2.8455, 0.4810};
  metrics::MetricReport non_perso{0.2903, 0.1911, 1.9381, 0.4646};
  metrics::ImprovementSummary summary = metrics::aggregate_report(rag, non_perso);
  check(std::abs(summary.impr_pct - 16.29) < 0.01, "Impr. != 16.29%");
}

void criterion9_run_all_determinism() {
  fs::path dir_a = fresh_dir("determinism_a");
  fs::path dir_b = fresh_dir("determinism_b");
  std::ostringstream quiet;
  check(pipeline::run_all(bench_run_config(dir_a), quiet).ok(), "first run-all failed");
  check(pipeline::run_all(bench_run_config(dir_b), quiet).ok(), "second run-all failed");

  std::vector<std::string> names_a, names_b;
  for (const auto& entry : fs::recursive_directory_iterator(dir_a / "out"))
    if (entry.is_regular_file())
      names_a.push_back(fs::relative(entry.path(), dir_a / "out").string());
  for (const auto& entry : fs::recursive_directory_iterator(dir_b / "out"))
    if (entry.is_regular_file())
      names_b.push_back(fs::relative(entry.path(), dir_b / "out").string());
  std::sort(names_a.begin(), names_a.end());
  std::sort(names_b.begin(), names_b.end());
  check(!names_a.empty(), "no artifacts were produced");
  check(names_a == names_b, "artifact trees differ in file sets");
  for (const auto& name : names_a) {
    check(slurp(dir_a / "out" / name) == slurp(dir_b / "out" / name),
          "artifact differs between runs: " + name);
  }
}

}  // namespace

int main() {
  criterion(1, "attribution oracle equivalence (1000 randomized cases, 1e-9)", 5.0,
            criterion1_oracle_equivalence);
  criterion(2, "null effect and antisymmetry, exact (500 fuzz cases)", 5.0,
            criterion2_null_antisymmetry);
  criterion(3, "anchor selection: tau monotonicity and exact top-k cardinality", 5.0,
            criterion3_anchor_selection);
  criterion(4, "steering no-op identities (100 prompts) and exact IV linearity", 10.0,
            criterion4_noop_and_linearity);
  criterion(5, "blend collapse at gamma1 = 1 and byte-exact ablation identities", 10.0,
            criterion5_blend_collapse_and_ablation);
  criterion(6, "synthetic bench: AUC 1.0, precision/recall 1 at separating tau, skew > 1", 30.0,
            criterion6_synthetic_bench);
  criterion(7, "metric hand values (ROUGE 0.8, BLEU 77.88, METEOR 0.5, embed 2/3)", 5.0,
            criterion7_metric_hand_values);
  criterion(8, "improvement aggregation reproduces the published 16.29% cell", 1.0,
            criterion8_aggregation);
  criterion(9, "run-all determinism: byte-identical artifact trees", 60.0,
            criterion9_run_all_determinism);

  if (failures != 0) {
    std::printf("%d criterion(s) FAILED\n", failures);
    return 1;
  }
  std::printf("all 9 criteria passed\n");
  return 0;
}
