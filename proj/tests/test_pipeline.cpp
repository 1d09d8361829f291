#include <steerx/pipeline.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "support/test_backends.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using Catch::Approx;
using namespace steerx;
using steerx::testing::abcd_table;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("steerx_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// Two-user dataset over the a-d vocabulary; the repeated "a" across u1's
/// histories makes it an anchor at tau = 0.7.
RunConfig demo_config(const fs::path& dir) {
  RunConfig config;
  TableLmSpec spec;
  spec.vocabulary = {"a", "b", "c", "d"};
  spec.boost = 3.0;
  config.table_spec = spec;
  config.out_dir = dir / "out";
  config.cache_dir = dir / "cache";
  config.dataset_path = dir / "dataset.jsonl";
  config.selection = SelectionRule::threshold(0.7);
  config.steering.mechanism = SteerMechanism::IV;
  config.steering.lambda = 0.8;
  config.steering.max_len = 4;

  std::vector<DatasetRecord> records;
  DatasetRecord u1;
  u1.user_id = "u1";
  u1.history = {{"c", "a b"}, {"d", "a"}};
  u1.query = "c";
  u1.reference = "a b";
  DatasetRecord u2;  // single history: all deltas are zero
  u2.user_id = "u2";
  u2.history = {{"c", "b"}};
  u2.query = "d";
  u2.reference = "b";
  records = {u1, u2};
  std::vector<std::string> lines;
  for (const auto& r : records) lines.push_back(dataset_line(r));
  jsonl::write_lines(config.dataset_path, lines);
  return config;
}

RunConfig bench_config(const fs::path& dir, std::uint64_t seed = 7) {
  RunConfig config;
  config.out_dir = dir / "out";
  config.cache_dir = dir / "cache";
  config.seed = seed;
  BenchSpec bench;
  bench.num_users = 2;
  bench.lambda_grid = {0.0, 0.4};
  config.bench = bench;
  config.steering.lambda = 0.4;
  config.steering.max_len = 8;
  return config;
}

}  // namespace

TEST_CASE("retrieval ranks by cosine with index tie-breaks") {
  TableLm lm = abcd_table();
  std::vector<HistoryEntry> history = {{"a b", "a"}, {"c d", "c"}};
  REQUIRE(retrieve_context("a b", history, lm, 1) == std::vector<std::size_t>{0});
  REQUIRE(retrieve_context("a b", history, lm, 5) == std::vector<std::size_t>{0, 1});

  std::vector<HistoryEntry> equal = {{"a", "a"}, {"a", "a"}, {"a", "a"}};
  REQUIRE(retrieve_context("a", equal, lm, 2) == std::vector<std::size_t>{0, 1});

  // Zero-norm query embeds rank everything at cosine 0: index order.
  REQUIRE(retrieve_context("zzz", history, lm, 2) == std::vector<std::size_t>{0, 1});
  REQUIRE_THROWS_AS(retrieve_context("a", history, lm, 0), Error);
}

TEST_CASE("config parsing applies presets and rejects unknown keys by name") {
  nlohmann::json good = {
      {"backend", {{"type", "table"}, {"vocabulary", {"a", "b"}}, {"boost", 3.0}}},
      {"paths", {{"dataset", "d.jsonl"}, {"out_dir", "o"}, {"cache_dir", "c"}}},
      {"seed", 11},
      {"ablation", "no-smoothing"},
      {"retrieval", {{"top_k", 2}}},
      {"attribution", {{"selection", {{"mode", "topk"}, {"k", 10.0}}}}},
      {"steering", {{"mechanism", "sv"}, {"preset", "topic/8B"}, {"max_len", 8}}},
  };
  RunConfig config = parse_config(good);
  REQUIRE(config.seed == 11);
  REQUIRE(config.ablation == Ablation::NoSmoothing);
  REQUIRE(config.steering.mechanism == SteerMechanism::SV);
  // topic/8B: (0.1, 0.1, 32, 0.75, 0.7); the preset also pins tau.
  REQUIRE(config.steering.gamma1 == 0.1);
  REQUIRE(config.steering.layer == 32);
  REQUIRE(config.selection.mode == SelectionMode::Threshold);
  REQUIRE(config.selection.tau == 0.7);

  auto expect_config_error = [](nlohmann::json j, const std::string& needle) {
    try {
      parse_config(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring(needle));
    }
  };
  expect_config_error({{"mystery", 1}}, "mystery");
  expect_config_error({{"paths", {{"dataset", 3}}}}, "paths.dataset");
  expect_config_error({{"steering", {{"lambda", "high"}}}}, "steering.lambda");
  expect_config_error({{"steering", {{"lambda", 1.7}}}}, "lambda");
  expect_config_error({{"retrieval", {{"top_k", 0}}}}, "top_k");
  nlohmann::json missing_tau = {{"attribution", {{"selection", {{"mode", "threshold"}}}}}};
  expect_config_error(missing_tau, "tau");
  expect_config_error({{"synthbench", {{"users", 0}}}}, "users");
}

TEST_CASE("file cache round-trips scoring results") {
  fs::path dir = fresh_dir("cache_unit");
  TableLm lm = abcd_table();
  FileCache cache(dir / "cache");
  CachingBackend cached(lm, cache);

  ScoredSequence first = cached.score_sequence("a", "a b");
  REQUIRE(cached.stats().misses == 1);
  REQUIRE(cached.stats().hits == 0);

  ScoredSequence second = cached.score_sequence("a", "a b");
  REQUIRE(cached.stats().hits == 1);
  REQUIRE(second.tokens == first.tokens);
  REQUIRE(second.logprobs == first.logprobs);  // bit-exact through the cache

  // Distinct inputs get distinct keys even when concatenations collide.
  REQUIRE(make_cache_key("id", "op", {"ab", "c"}) != make_cache_key("id", "op", {"a", "bc"}));
}

TEST_CASE("attribute stage: artifacts, cache warm rerun, single-history users") {
  fs::path dir = fresh_dir("attribute");
  RunConfig config = demo_config(dir);

  StageResult cold = pipeline::run_attribute(config);
  REQUIRE(cold.ok());
  REQUIRE(cold.cache.misses > 0);
  // u2's leave-one-out scores the same (context, target) twice (factual ==
  // counterfactual when the remaining history is empty), so even a cold run
  // may record hits.
  std::string anchors_first = slurp(pipeline::anchors_path(config));
  std::string reports_first = slurp(pipeline::reports_path(config));

  StageResult warm = pipeline::run_attribute(config);
  REQUIRE(warm.cache.misses == 0);  // zero backend calls on the warm rerun
  REQUIRE(warm.cache.hits == cold.cache.hits + cold.cache.misses);
  REQUIRE(slurp(pipeline::anchors_path(config)) == anchors_first);
  REQUIRE(slurp(pipeline::reports_path(config)) == reports_first);

  // u1's repeated "a" is an anchor; u2 (single history) has none.
  std::size_t u1_anchors = 0, u2_anchors = 0;
  for (const auto& j : jsonl::read_lines(pipeline::anchors_path(config))) {
    UserAnchors ua = anchors_from_json(j);
    if (ua.user_id == "u1") u1_anchors += ua.anchors.tokens.size();
    if (ua.user_id == "u2") u2_anchors += ua.anchors.tokens.size();
  }
  REQUIRE(u1_anchors > 0);
  REQUIRE(u2_anchors == 0);

  // Deltas serialize with enough digits to round-trip exactly.
  bool checked = false;
  for (const auto& j : jsonl::read_lines(pipeline::reports_path(config))) {
    UserReport ur = report_from_json(j);
    if (ur.user_id != "u1" || ur.report.history_index != 0) continue;
    TableLm lm(*config.table_spec);
    AttributionReport fresh = token_causal_effects(
        "a b", {"a"}, "c", lm, {}, 0);
    REQUIRE(ur.report.effects.size() == fresh.effects.size());
    for (std::size_t t = 0; t < fresh.effects.size(); ++t)
      REQUIRE(ur.report.effects[t].delta == fresh.effects[t].delta);
    checked = true;
  }
  REQUIRE(checked);
}

TEST_CASE("smooth stage: deterministic bytes, skip reports, raw ablation") {
  fs::path dir = fresh_dir("smooth");
  RunConfig config = demo_config(dir);
  REQUIRE_THROWS_WITH(pipeline::run_smooth(config),
                      Catch::Matchers::ContainsSubstring("anchors.jsonl"));

  pipeline::run_attribute(config);
  pipeline::run_smooth(config);
  std::string profiles_first = slurp(pipeline::profiles_path(config));
  pipeline::run_smooth(config);
  REQUIRE(slurp(pipeline::profiles_path(config)) == profiles_first);
  REQUIRE_THAT(profiles_first, Catch::Matchers::ContainsSubstring("User preference cues:"));

  // u2 contributes only skipped histories.
  std::string skips = slurp(pipeline::profile_skips_path(config));
  REQUIRE_THAT(skips, Catch::Matchers::ContainsSubstring("u2"));

  RunConfig raw = config;
  raw.ablation = Ablation::NoSmoothing;
  pipeline::run_smooth(raw);
  for (const auto& j : jsonl::read_lines(pipeline::profiles_path(raw))) {
    UserDescription ud = profile_from_json(j);
    REQUIRE(ud.description.mode == SmoothingMode::Raw);
    REQUIRE_THAT(ud.description.text,
                 !Catch::Matchers::ContainsSubstring("User preference cues"));
  }
}

TEST_CASE("steer stage: lambda 0 equals the baseline file byte for byte") {
  fs::path dir = fresh_dir("steer_noop");
  RunConfig config = demo_config(dir);
  config.steering.lambda = 0.0;
  pipeline::run_attribute(config);
  pipeline::run_smooth(config);
  pipeline::run_steer(config);

  auto generated = jsonl::read_lines(pipeline::generations_path(config));
  auto baseline = jsonl::read_lines(pipeline::baseline_path(config));
  REQUIRE(generated.size() == baseline.size());
  for (std::size_t i = 0; i < generated.size(); ++i) {
    REQUIRE(generated[i].at("text").get<std::string>() ==
            baseline[i].at("text").get<std::string>());
  }
}

TEST_CASE("ablation identities: no-anchors reproduces the raw-history baselines") {
  fs::path dir = fresh_dir("ablation");
  RunConfig config = demo_config(dir);
  config.ablation = Ablation::NoAnchors;
  pipeline::run_attribute(config);

  TableLm lm(*config.table_spec);
  std::vector<DatasetRecord> dataset = read_dataset(config.dataset_path);

  SECTION("influence-vector form matches direct context steering") {
    pipeline::run_steer(config);
    auto generated = jsonl::read_lines(pipeline::generations_path(config));
    for (const auto& j : generated) {
      const std::string user_id = j.at("user_id").get<std::string>();
      for (const auto& user : dataset) {
        if (user.user_id != user_id) continue;
        std::vector<std::size_t> retrieved =
            retrieve_context(user.query, user.history, lm, config.retrieval_top_k);
        std::vector<std::string> parts;
        for (std::size_t idx : retrieved)
          parts.push_back(join_text({user.history[idx].input, user.history[idx].output}));
        std::string h_text = join_text(parts, "\n");
        std::string expected = steer_iv_generate(user.query, h_text, h_text, "",
                                                 config.steering.lambda, lm,
                                                 config.steering.max_len);
        REQUIRE(j.at("text").get<std::string>() == expected);
      }
    }
  }

  SECTION("style-vector form at gamma1 = 1 matches the plain mean difference") {
    RunConfig sv = config;
    sv.steering.mechanism = SteerMechanism::SV;
    sv.steering.gamma1 = 1.0;
    sv.steering.gamma2 = 2.0;
    sv.steering.layer = 0;
    pipeline::run_steer(sv);
    auto generated = jsonl::read_lines(pipeline::generations_path(sv));
    for (const auto& j : generated) {
      const std::string user_id = j.at("user_id").get<std::string>();
      for (const auto& user : dataset) {
        if (user.user_id != user_id) continue;
        std::vector<HistoryPair> pairs;
        for (const auto& h : user.history)
          pairs.push_back({h.output, neutral_response(h.input, "", lm, sv.steering.max_len)});
        StyleVector cas = style_vector(pairs, StyleProfile{}, 1.0, 0, lm);
        std::vector<std::size_t> retrieved =
            retrieve_context(user.query, user.history, lm, sv.retrieval_top_k);
        std::vector<std::string> parts;
        for (std::size_t idx : retrieved)
          parts.push_back(join_text({user.history[idx].input, user.history[idx].output}));
        std::string expected =
            steer_sv_generate(user.query, join_text(parts, "\n"), "", cas, 2.0, lm,
                              sv.steering.max_len);
        REQUIRE(j.at("text").get<std::string>() == expected);
      }
    }
  }
}

TEST_CASE("generation provenance re-derives the steering vector bit-exactly") {
  fs::path dir = fresh_dir("provenance");
  RunConfig config = demo_config(dir);
  config.steering.mechanism = SteerMechanism::SV;
  config.steering.gamma1 = 0.4;
  config.steering.gamma2 = 0.7;
  config.steering.layer = 20;
  pipeline::run_attribute(config);
  pipeline::run_smooth(config);
  pipeline::run_steer(config);

  TableLm lm(*config.table_spec);
  std::vector<DatasetRecord> dataset = read_dataset(config.dataset_path);
  std::map<std::string, StyleProfile> profiles;
  for (const auto& j : jsonl::read_lines(pipeline::profiles_path(config))) {
    UserDescription ud = profile_from_json(j);
    profiles[ud.user_id].descriptions.push_back(ud.description);
  }

  for (const auto& j : jsonl::read_lines(pipeline::generations_path(config))) {
    REQUIRE(j.at("backend_id").get<std::string>() == lm.id());
    const std::string user_id = j.at("user_id").get<std::string>();
    double gamma1 = j.at("gamma1").get<double>();
    int layer = j.at("layer").get<int>();
    int max_len = j.at("max_len").get<int>();
    std::string prompt = j.at("prompt").get<std::string>();

    for (const auto& user : dataset) {
      if (user.user_id != user_id) continue;
      std::vector<HistoryPair> pairs;
      StyleProfile remapped;
      std::size_t slot = 0;
      for (const auto& kept : j.at("kept_histories")) {
        std::size_t i = kept.get<std::size_t>();
        pairs.push_back({user.history[i].output,
                         neutral_response(user.history[i].input, prompt, lm, max_len)});
        if (const StyleDescription* d = profiles[user_id].for_history(static_cast<int>(i))) {
          StyleDescription copy = *d;
          copy.source_history = static_cast<int>(slot);
          remapped.descriptions.push_back(copy);
        }
        ++slot;
      }
      StyleVector rebuilt = style_vector(pairs, remapped, gamma1, layer, lm);
      REQUIRE(steering_vector_checksum(rebuilt.values) ==
              j.at("vector_sha256").get<std::string>());
    }
  }

  // The serialized vector applies only to the backend that produced it.
  auto vector_lines = jsonl::read_lines(pipeline::vectors_path(config));
  REQUIRE_FALSE(vector_lines.empty());
  SteeringVectorRecord record =
      parse_steering_vector(vector_lines[0].at("vector").dump());
  REQUIRE_NOTHROW(style_vector_from_record(record, lm));
  TableLm other = abcd_table(4.0);
  REQUIRE_THROWS_AS(style_vector_from_record(record, other), Error);
}

TEST_CASE("eval stage: reports, identity improvement, missing pairs") {
  fs::path dir = fresh_dir("eval");
  RunConfig config = demo_config(dir);
  config.steering.lambda = 0.0;  // generations == baseline
  pipeline::run_attribute(config);
  pipeline::run_smooth(config);
  pipeline::run_steer(config);

  pipeline::EvalOutcome outcome = pipeline::run_eval(config);
  REQUIRE(outcome.missing.empty());
  REQUIRE(outcome.improvement.has_value());
  REQUIRE(outcome.improvement->impr_pct == Approx(0.0).margin(1e-12));
  REQUIRE(fs::exists(config.out_dir / "eval_report.json"));
  REQUIRE(fs::exists(config.out_dir / "eval_instances.jsonl"));
  std::string table = slurp(config.out_dir / "eval_table.txt");
  REQUIRE_THAT(table, Catch::Matchers::ContainsSubstring("ROUGE-1"));
  REQUIRE_THAT(table, Catch::Matchers::ContainsSubstring("baseline"));

  // Remove one generation: that user is listed and excluded.
  auto lines = jsonl::read_lines(pipeline::generations_path(config));
  std::vector<std::string> kept;
  for (const auto& j : lines)
    if (j.at("user_id") != "u2") kept.push_back(j.dump());
  jsonl::write_lines(pipeline::generations_path(config), kept);
  pipeline::EvalOutcome partial = pipeline::run_eval(config);
  REQUIRE(partial.missing == std::vector<std::string>{"u2"});
}

TEST_CASE("stage isolation: downstream artifacts never change upstream reruns") {
  fs::path dir = fresh_dir("isolation");
  RunConfig config = demo_config(dir);
  pipeline::run_attribute(config);
  pipeline::run_smooth(config);
  pipeline::run_steer(config);
  std::string anchors = slurp(pipeline::anchors_path(config));
  std::string profiles = slurp(pipeline::profiles_path(config));

  fs::remove(pipeline::generations_path(config));
  fs::remove(pipeline::profiles_path(config));
  pipeline::run_attribute(config);
  REQUIRE(slurp(pipeline::anchors_path(config)) == anchors);
  pipeline::run_smooth(config);
  REQUIRE(slurp(pipeline::profiles_path(config)) == profiles);
}

TEST_CASE("synthbench stage emits sweeps with the documented shapes") {
  fs::path dir = fresh_dir("bench_stage");
  RunConfig config = bench_config(dir);
  pipeline::run_synthbench(config);

  std::string bench_report = slurp(config.out_dir / "bench_report.json");
  nlohmann::json report = nlohmann::json::parse(bench_report);
  REQUIRE(report.at("mean_auc").get<double>() == 1.0);
  REQUIRE(report.at("mean_precision").get<double>() == 1.0);
  REQUIRE(report.at("mean_recall").get<double>() == 1.0);
  REQUIRE(report.at("all_separated").get<bool>());
  REQUIRE(report.at("delta_skewness").get<double>() > 1.0);

  // tau sweep: one row per grid point, anchor counts non-increasing.
  std::ifstream tau_file(config.out_dir / "tau_sweep.tsv");
  std::string line;
  std::getline(tau_file, line);  // header
  std::size_t rows = 0;
  long long previous = -1;
  while (std::getline(tau_file, line)) {
    std::istringstream fields(line);
    std::string tau_text;
    long long anchors = 0;
    fields >> tau_text >> anchors;
    if (previous >= 0) REQUIRE(anchors <= previous);
    previous = anchors;
    ++rows;
  }
  REQUIRE(rows == default_tau_grid().size());

  // lambda sweep: the lambda = 0 row equals the baseline row's metrics.
  std::ifstream lambda_file(config.out_dir / "lambda_sweep.tsv");
  std::getline(lambda_file, line);  // header
  std::string baseline_row, zero_row;
  while (std::getline(lambda_file, line)) {
    if (line.rfind("baseline\t", 0) == 0) baseline_row = line.substr(line.find('\t') + 1);
    if (line.rfind(format_sig(0.0) + "\t", 0) == 0) zero_row = line.substr(line.find('\t') + 1);
  }
  REQUIRE_FALSE(baseline_row.empty());
  REQUIRE_FALSE(zero_row.empty());
  REQUIRE(zero_row == baseline_row);

  REQUIRE(fs::exists(config.out_dir / "delta_histogram.tsv"));
  REQUIRE(fs::exists(config.out_dir / "dataset.jsonl"));
  REQUIRE(fs::exists(config.out_dir / "table_backend.json"));
}

TEST_CASE("run-all on the bench is deterministic across runs and seed-sensitive") {
  fs::path dir_a = fresh_dir("runall_a");
  fs::path dir_b = fresh_dir("runall_b");
  fs::path dir_c = fresh_dir("runall_c");

  REQUIRE(pipeline::run_all(bench_config(dir_a)).ok());
  REQUIRE(pipeline::run_all(bench_config(dir_b)).ok());

  std::vector<std::string> names;
  for (const auto& entry : fs::recursive_directory_iterator(dir_a / "out"))
    if (entry.is_regular_file()) names.push_back(fs::relative(entry.path(), dir_a / "out").string());
  REQUIRE_FALSE(names.empty());
  for (const auto& name : names) {
    INFO(name);
    REQUIRE(slurp(dir_a / "out" / name) == slurp(dir_b / "out" / name));
  }

  REQUIRE(pipeline::run_all(bench_config(dir_c, /*seed=*/8)).ok());
  REQUIRE(slurp(dir_a / "out" / "dataset.jsonl") != slurp(dir_c / "out" / "dataset.jsonl"));
}
