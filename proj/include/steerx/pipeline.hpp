#pragma once

#include <steerx/attribution.hpp>
#include <steerx/backend.hpp>
#include <steerx/cache.hpp>
#include <steerx/config.hpp>
#include <steerx/error.hpp>
#include <steerx/format.hpp>
#include <steerx/metrics.hpp>
#include <steerx/records.hpp>
#include <steerx/retrieval.hpp>
#include <steerx/smoothing.hpp>
#include <steerx/steering.hpp>
#include <steerx/synthbench.hpp>
#include <steerx/table_lm.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace steerx {

struct StageResult {
  std::vector<std::string> failed_users;
  CacheStats cache;
  bool ok() const { return failed_users.empty(); }
};

namespace pipeline {

inline std::filesystem::path reports_path(const RunConfig& c) { return c.out_dir / "attribution_reports.jsonl"; }
inline std::filesystem::path anchors_path(const RunConfig& c) { return c.out_dir / "anchors.jsonl"; }
inline std::filesystem::path failures_path(const RunConfig& c) { return c.out_dir / "attribution_failures.jsonl"; }
inline std::filesystem::path profiles_path(const RunConfig& c) { return c.out_dir / "profiles.jsonl"; }
inline std::filesystem::path profile_skips_path(const RunConfig& c) { return c.out_dir / "profile_skips.jsonl"; }
inline std::filesystem::path generations_path(const RunConfig& c) { return c.out_dir / "generations.jsonl"; }
inline std::filesystem::path baseline_path(const RunConfig& c) { return c.out_dir / "baseline_generations.jsonl"; }
inline std::filesystem::path vectors_path(const RunConfig& c) { return c.out_dir / "vectors.jsonl"; }

/// Ground-truth users expanded from the bench spec; deterministic in the
/// config seed.
inline std::vector<SyntheticUser> bench_users(const RunConfig& config) {
  if (!config.bench) throw Error("synthbench: no bench spec configured");
  const BenchSpec& bench = *config.bench;
  std::vector<std::string> boilerplate;
  for (int b = 0; b < bench.boilerplate_tokens; ++b) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "b%02d", b);
    boilerplate.emplace_back(buf);
  }
  std::vector<SyntheticUser> users;
  for (int u = 0; u < bench.num_users; ++u) {
    SyntheticUserSpec spec;
    spec.user_id = "user" + std::to_string(u);
    for (int p = 0; p < bench.preference_tokens_per_user; ++p)
      spec.preference_vocab.push_back("u" + std::to_string(u) + "p" + std::to_string(p));
    spec.boilerplate_vocab = boilerplate;
    spec.history_count = bench.histories_per_user;
    spec.tokens_per_history = bench.tokens_per_history;
    spec.plant_rate = bench.plant_rate;
    spec.seed = config.seed;
    users.push_back(generate_user(spec));
  }
  return users;
}

/// When a synthetic bench is configured, writes the generated dataset, the
/// table backend, and the bench task prompt under out_dir (idempotent for a
/// fixed seed) and returns the config wired to them.
inline RunConfig materialize(const RunConfig& config) {
  if (!config.bench) return config;
  const BenchSpec& bench = *config.bench;
  std::vector<SyntheticUser> users = bench_users(config);

  RunConfig wired = config;
  std::filesystem::create_directories(wired.out_dir);

  std::vector<std::string> dataset_lines;
  for (const auto& user : users) {
    DatasetRecord rec;
    rec.user_id = user.user_id;
    for (const auto& h : user.histories) rec.history.push_back({h.input, h.output});
    rec.query = user.query;
    rec.reference = user.reference;
    dataset_lines.push_back(dataset_line(rec));
  }
  wired.dataset_path = wired.out_dir / "dataset.jsonl";
  jsonl::write_lines(wired.dataset_path, dataset_lines);

  TableLmSpec table = build_table_lm_spec(users, bench.boost);
  wired.table_spec = table;
  {
    std::ofstream out(wired.out_dir / "table_backend.json", std::ios::binary | std::ios::trunc);
    out << table.to_json().dump(2) << '\n';
  }

  wired.task_prompt = bench_task_prompt(users);
  {
    std::ofstream out(wired.out_dir / "task_prompt.txt", std::ios::binary | std::ios::trunc);
    out << wired.task_prompt << '\n';
  }
  return wired;
}

inline std::string attribution_context(const RunConfig& config, const HistoryEntry& entry) {
  return join_text({config.task_prompt, entry.input});
}

// ---------------------------------------------------------------------------
// attribute
// ---------------------------------------------------------------------------

inline StageResult run_attribute(const RunConfig& config, std::ostream& log = std::cerr) {
  std::vector<DatasetRecord> dataset = read_dataset(config.dataset_path);
  TableLm backend(config.resolve_table_spec());
  FileCache cache(config.cache_dir);
  CachingBackend cached(backend, cache);

  StageResult result;
  std::vector<std::string> report_lines, anchor_lines, failure_lines;
  for (const auto& user : dataset) {
    std::vector<std::string> outputs, contexts;
    for (const auto& h : user.history) {
      outputs.push_back(h.output);
      contexts.push_back(attribution_context(config, h));
    }
    std::vector<LooEntry> loo;
    try {
      loo = leave_one_out_attribution(outputs, contexts, cached, config.selection);
    } catch (const Error& e) {
      result.failed_users.push_back(user.user_id);
      failure_lines.push_back("{\"user_id\":" + json_quote(user.user_id) +
                              ",\"history_index\":-1,\"error\":" + json_quote(e.what()) + "}");
      continue;
    }
    bool user_failed = false;
    for (const auto& entry : loo) {
      if (!entry.ok) {
        user_failed = true;
        failure_lines.push_back("{\"user_id\":" + json_quote(user.user_id) +
                                ",\"history_index\":" + std::to_string(entry.history_index) +
                                ",\"error\":" + json_quote(entry.error) + "}");
        continue;
      }
      report_lines.push_back(report_line(user.user_id, entry.report));
      anchor_lines.push_back(anchors_line(user.user_id, entry.anchors));
    }
    if (user_failed) result.failed_users.push_back(user.user_id);
  }

  jsonl::write_lines(reports_path(config), report_lines);
  jsonl::write_lines(anchors_path(config), anchor_lines);
  jsonl::write_lines(failures_path(config), failure_lines);
  result.cache = cached.stats();
  log << "attribute: " << dataset.size() << " users, cache hits " << result.cache.hits
      << " misses " << result.cache.misses;
  if (!result.failed_users.empty()) log << ", " << result.failed_users.size() << " FAILED";
  log << '\n';
  return result;
}

// ---------------------------------------------------------------------------
// smooth
// ---------------------------------------------------------------------------

inline StageResult run_smooth(const RunConfig& config, std::ostream& log = std::cerr) {
  std::filesystem::path anchors_file = anchors_path(config);
  if (!std::filesystem::exists(anchors_file))
    throw Error("smooth: missing attribution artifact '" + anchors_file.string() +
                "' (run the attribute stage first)");

  std::vector<std::string> user_order;
  std::map<std::string, std::vector<AnchorSet>> per_user;
  for (const auto& j : jsonl::read_lines(anchors_file)) {
    UserAnchors ua = anchors_from_json(j);
    if (per_user.find(ua.user_id) == per_user.end()) user_order.push_back(ua.user_id);
    per_user[ua.user_id].push_back(std::move(ua.anchors));
  }

  SmoothingOptions options = config.smoothing;
  if (config.ablation == Ablation::NoSmoothing) options.mode = SmoothingMode::Raw;

  std::optional<TableLm> rewriter;
  if (options.mode == SmoothingMode::Rewriter) rewriter.emplace(config.resolve_table_spec());

  StageResult result;
  std::vector<std::string> profile_lines, skip_lines;
  std::size_t total_descriptions = 0;
  for (const auto& user_id : user_order) {
    const auto& anchor_sets = per_user[user_id];
    StyleProfile profile;
    try {
      profile = config.smoothing_concat_all
                    ? build_style_profile_concat(anchor_sets, options,
                                                 rewriter ? &*rewriter : nullptr)
                    : build_style_profile(anchor_sets, options, rewriter ? &*rewriter : nullptr);
    } catch (const Error& e) {
      result.failed_users.push_back(user_id);
      log << "smooth: user " << user_id << " failed: " << e.what() << '\n';
      continue;
    }
    for (const auto& d : profile.descriptions) profile_lines.push_back(profile_line(user_id, d));
    total_descriptions += profile.descriptions.size();
    if (!profile.skipped_histories.empty()) {
      std::string line = "{\"user_id\":" + json_quote(user_id) + ",\"skipped\":[";
      for (std::size_t i = 0; i < profile.skipped_histories.size(); ++i) {
        if (i != 0) line += ',';
        line += std::to_string(profile.skipped_histories[i]);
      }
      line += "]}";
      skip_lines.push_back(line);
    }
  }

  jsonl::write_lines(profiles_path(config), profile_lines);
  jsonl::write_lines(profile_skips_path(config), skip_lines);
  if (total_descriptions == 0)
    log << "smooth: warning: every anchor set was empty; steering will degrade to baseline\n";
  log << "smooth: " << total_descriptions << " descriptions for " << user_order.size()
      << " users\n";
  return result;
}

// ---------------------------------------------------------------------------
// steer
// ---------------------------------------------------------------------------

namespace detail {

inline std::map<std::string, StyleProfile> load_profiles(const RunConfig& config) {
  std::map<std::string, StyleProfile> profiles;
  std::filesystem::path path = profiles_path(config);
  if (!std::filesystem::exists(path)) {
    if (config.ablation == Ablation::NoAnchors) return profiles;
    throw Error("steer: missing style profiles '" + path.string() +
                "' (run the smooth stage first, or use --ablation no-anchors)");
  }
  for (const auto& j : jsonl::read_lines(path)) {
    UserDescription ud = profile_from_json(j);
    profiles[ud.user_id].descriptions.push_back(std::move(ud.description));
  }
  return profiles;
}

struct SteerOutcome {
  std::string text;
  std::string baseline_text;  // same prompt and context, no steering
  std::string provenance_line;
  std::optional<std::string> vector_line;
};

inline SteerOutcome steer_one_user(const RunConfig& config, const DatasetRecord& user,
                                   const StyleProfile& profile, const TableLm& backend) {
  const SteeringSpec& spec = config.steering;
  std::vector<std::size_t> retrieved =
      retrieve_context(user.query, user.history, backend, config.retrieval_top_k);

  std::vector<std::string> retrieved_texts;
  for (std::size_t idx : retrieved)
    retrieved_texts.push_back(join_text({user.history[idx].input, user.history[idx].output}));
  std::string history_text = join_text(retrieved_texts, "\n");

  bool no_anchors = config.ablation == Ablation::NoAnchors;
  std::string s_text = no_anchors ? history_text : profile_text(profile);

  SteerOutcome outcome;
  std::string provenance = "{\"user_id\":" + json_quote(user.user_id);
  provenance += ",\"mechanism\":" + json_quote(mechanism_name(spec.mechanism));
  provenance += ",\"ablation\":" + json_quote(ablation_name(config.ablation));
  provenance += ",\"prompt\":" + json_quote(config.task_prompt);
  provenance += ",\"max_len\":" + std::to_string(spec.max_len);
  provenance += ",\"retrieved\":[";
  for (std::size_t i = 0; i < retrieved.size(); ++i) {
    if (i != 0) provenance += ',';
    provenance += std::to_string(retrieved[i]);
  }
  provenance += "]";

  if (spec.mechanism == SteerMechanism::IV) {
    outcome.text = steer_iv_generate(user.query, history_text, s_text, config.task_prompt,
                                     spec.lambda, backend, spec.max_len);
    SteeredStepLogits step0 = iv_step_logits(user.query, history_text, s_text,
                                             config.task_prompt, spec.lambda, "", backend);
    provenance += ",\"lambda\":" + json_number(spec.lambda);
    provenance += ",\"s_text_sha256\":" + json_quote(sha256_hex(s_text));
    provenance += ",\"iv_step0_sha256\":" + json_quote(steering_vector_checksum(step0.influence));
  } else {
    std::vector<std::string> outputs;
    for (const auto& h : user.history) outputs.push_back(h.output);
    std::vector<std::size_t> kept(outputs.size());
    for (std::size_t i = 0; i < kept.size(); ++i) kept[i] = i;
    if (config.filter_theta && !no_anchors)
      kept = filter_histories_by_style(outputs, profile, backend, *config.filter_theta);
    if (kept.empty())
      throw Error("style filter (theta=" + std::to_string(*config.filter_theta) +
                  ") removed every history");

    std::vector<HistoryPair> pairs;
    StyleProfile remapped;
    for (std::size_t slot = 0; slot < kept.size(); ++slot) {
      std::size_t i = kept[slot];
      HistoryPair pair;
      pair.authentic = user.history[i].output;
      pair.neutral = neutral_response(user.history[i].input, config.task_prompt, backend,
                                      spec.max_len);
      pairs.push_back(std::move(pair));
      if (!no_anchors) {
        if (const StyleDescription* d = profile.for_history(static_cast<int>(i))) {
          StyleDescription copy = *d;
          copy.source_history = static_cast<int>(slot);
          remapped.descriptions.push_back(std::move(copy));
        }
      }
    }
    StyleVector sv = style_vector(pairs, remapped, spec.gamma1, spec.layer, backend);
    sv.gamma2 = spec.gamma2;
    std::string steer_history = config.sv_include_history ? history_text : "";
    outcome.text = steer_sv_generate(user.query, steer_history, config.task_prompt, sv,
                                     spec.gamma2, backend, spec.max_len);

    SteeringVectorRecord record;
    record.mechanism = "sv";
    record.layer = sv.layer;
    record.gamma1 = sv.gamma1;
    record.gamma2 = sv.gamma2;
    record.values = sv.values;
    record.backend_id = backend.id();
    outcome.vector_line = "{\"user_id\":" + json_quote(user.user_id) +
                          ",\"vector\":" + serialize_steering_vector(record) + "}";

    provenance += ",\"gamma1\":" + json_number(spec.gamma1);
    provenance += ",\"gamma2\":" + json_number(spec.gamma2);
    provenance += ",\"layer\":" + std::to_string(spec.layer);
    provenance += ",\"include_history\":" + std::string(config.sv_include_history ? "true" : "false");
    provenance += ",\"kept_histories\":[";
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (i != 0) provenance += ',';
      provenance += std::to_string(kept[i]);
    }
    provenance += "]";
    provenance += ",\"vector_sha256\":" + json_quote(steering_vector_checksum(sv.values));
  }

  provenance += ",\"backend_id\":" + json_quote(backend.id());
  provenance += ",\"text\":" + json_quote(outcome.text) + "}";
  outcome.provenance_line = provenance;

  GenerateOptions plain;
  plain.max_len = spec.max_len;
  outcome.baseline_text =
      backend.generate(join_text({config.task_prompt, history_text, user.query}), plain);
  return outcome;
}

}  // namespace detail

inline StageResult run_steer(const RunConfig& config, std::ostream& log = std::cerr) {
  std::vector<DatasetRecord> dataset = read_dataset(config.dataset_path);
  TableLm backend(config.resolve_table_spec());
  std::map<std::string, StyleProfile> profiles = detail::load_profiles(config);

  StageResult result;
  std::vector<std::string> generation_lines, baseline_lines, vector_lines;
  for (const auto& user : dataset) {
    StyleProfile empty;
    auto it = profiles.find(user.user_id);
    const StyleProfile& profile = it == profiles.end() ? empty : it->second;
    try {
      detail::SteerOutcome outcome = detail::steer_one_user(config, user, profile, backend);
      generation_lines.push_back(outcome.provenance_line);
      if (outcome.vector_line) vector_lines.push_back(*outcome.vector_line);
      baseline_lines.push_back("{\"user_id\":" + json_quote(user.user_id) +
                               ",\"text\":" + json_quote(outcome.baseline_text) + "}");
    } catch (const Error& e) {
      result.failed_users.push_back(user.user_id);
      log << "steer: user " << user.user_id << " failed: " << e.what() << '\n';
    }
  }

  jsonl::write_lines(generations_path(config), generation_lines);
  jsonl::write_lines(baseline_path(config), baseline_lines);
  jsonl::write_lines(vectors_path(config), vector_lines);
  log << "steer: " << generation_lines.size() << " generations ("
      << mechanism_name(config.steering.mechanism) << ", ablation "
      << ablation_name(config.ablation) << ")\n";
  return result;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOutcome {
  metrics::MetricReport micro;
  std::optional<metrics::MetricReport> baseline_micro;
  std::optional<metrics::ImprovementSummary> improvement;
  std::vector<std::string> missing;  // user ids with no generation/reference pair
};

namespace detail {

inline std::map<std::string, std::vector<std::string>> texts_by_user(
    const std::filesystem::path& path) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& j : jsonl::read_lines(path))
    out[j.at("user_id").get<std::string>()].push_back(j.at("text").get<std::string>());
  return out;
}

}  // namespace detail

inline EvalOutcome run_eval(const RunConfig& config, std::ostream& log = std::cerr) {
  std::vector<DatasetRecord> dataset = read_dataset(config.dataset_path);
  std::filesystem::path gen_file = generations_path(config);
  if (!std::filesystem::exists(gen_file))
    throw Error("eval: missing generations '" + gen_file.string() + "' (run the steer stage first)");
  TableLm backend(config.resolve_table_spec());
  metrics::TokenEmbedder embedder = [&backend](const std::string& token) {
    return backend.embed(token);
  };

  auto generations = detail::texts_by_user(gen_file);
  std::optional<std::map<std::string, std::vector<std::string>>> baseline;
  std::filesystem::path baseline_file =
      config.baseline_generations ? *config.baseline_generations : baseline_path(config);
  if (std::filesystem::exists(baseline_file))
    baseline = detail::texts_by_user(baseline_file);

  EvalOutcome outcome;
  struct Instance {
    std::string user_id;
    std::string candidate;
    std::string baseline_candidate;
    std::string reference;
    bool has_baseline = false;
  };
  std::vector<Instance> instances;
  std::map<std::string, std::size_t> consumed, consumed_base;
  for (const auto& user : dataset) {
    auto it = generations.find(user.user_id);
    std::size_t used = consumed[user.user_id]++;
    if (it == generations.end() || used >= it->second.size()) {
      outcome.missing.push_back(user.user_id);
      continue;
    }
    Instance inst;
    inst.user_id = user.user_id;
    inst.candidate = it->second[used];
    inst.reference = user.reference;
    if (baseline) {
      auto bit = baseline->find(user.user_id);
      std::size_t bused = consumed_base[user.user_id]++;
      if (bit != baseline->end() && bused < bit->second.size()) {
        inst.baseline_candidate = bit->second[bused];
        inst.has_baseline = true;
      }
    }
    instances.push_back(std::move(inst));
  }
  if (instances.empty()) throw Error("eval: no generation/reference pairs to score");

  std::vector<std::string> cands, refs;
  for (const auto& inst : instances) {
    cands.push_back(inst.candidate);
    refs.push_back(inst.reference);
  }
  outcome.micro = metrics::score_corpus(cands, refs, embedder);

  bool all_baseline = !instances.empty();
  for (const auto& inst : instances) all_baseline = all_baseline && inst.has_baseline;
  if (all_baseline) {
    std::vector<std::string> base_cands;
    for (const auto& inst : instances) base_cands.push_back(inst.baseline_candidate);
    outcome.baseline_micro = metrics::score_corpus(base_cands, refs, embedder);
    bool baseline_positive = outcome.baseline_micro->rouge1_f > 0.0 &&
                             outcome.baseline_micro->meteor > 0.0 &&
                             outcome.baseline_micro->bleu > 0.0 &&
                             outcome.baseline_micro->embed_f > 0.0;
    if (baseline_positive)
      outcome.improvement = metrics::aggregate_report(outcome.micro, *outcome.baseline_micro);
  }

  // Per-instance records.
  std::vector<std::string> instance_lines;
  for (const auto& inst : instances) {
    metrics::MetricReport r = metrics::score_corpus({inst.candidate}, {inst.reference}, embedder);
    std::string line = "{\"user_id\":" + json_quote(inst.user_id);
    line += ",\"rouge1_f\":" + json_number(r.rouge1_f);
    line += ",\"meteor\":" + json_number(r.meteor);
    line += ",\"bleu\":" + json_number(r.bleu);
    line += ",\"embed_f\":" + json_number(r.embed_f);
    if (inst.candidate.empty()) line += ",\"empty_candidate\":true";
    line += "}";
    instance_lines.push_back(line);
  }
  jsonl::write_lines(config.out_dir / "eval_instances.jsonl", instance_lines);

  // Per-user macro aggregation (several instances may share a user id).
  std::map<std::string, std::vector<std::size_t>> by_user;
  std::vector<std::string> user_order;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (by_user.find(instances[i].user_id) == by_user.end())
      user_order.push_back(instances[i].user_id);
    by_user[instances[i].user_id].push_back(i);
  }
  metrics::MetricReport macro;
  for (const auto& user_id : user_order) {
    std::vector<std::string> uc, ur;
    for (std::size_t i : by_user[user_id]) {
      uc.push_back(instances[i].candidate);
      ur.push_back(instances[i].reference);
    }
    metrics::MetricReport r = metrics::score_corpus(uc, ur, embedder);
    macro.rouge1_f += r.rouge1_f;
    macro.meteor += r.meteor;
    macro.bleu += r.bleu;
    macro.embed_f += r.embed_f;
  }
  double nu = static_cast<double>(user_order.size());
  macro.rouge1_f /= nu;
  macro.meteor /= nu;
  macro.bleu /= nu;
  macro.embed_f /= nu;

  auto report_json = [](const metrics::MetricReport& r) {
    return std::string("{\"rouge1_f\":") + json_number(r.rouge1_f) +
           ",\"meteor\":" + json_number(r.meteor) + ",\"bleu\":" + json_number(r.bleu) +
           ",\"embed_f\":" + json_number(r.embed_f) + "}";
  };
  std::string report = "{\n";
  report += "  \"micro_instances\": " + report_json(outcome.micro) + ",\n";
  report += "  \"macro_users\": " + report_json(macro) + ",\n";
  if (outcome.baseline_micro)
    report += "  \"baseline_micro_instances\": " + report_json(*outcome.baseline_micro) + ",\n";
  if (outcome.improvement) {
    const auto& s = *outcome.improvement;
    report += "  \"improvement\": {\"rouge1_pct\":" + json_number(s.rouge1_gain_pct) +
              ",\"meteor_pct\":" + json_number(s.meteor_gain_pct) +
              ",\"bleu_pct\":" + json_number(s.bleu_gain_pct) +
              ",\"embed_pct\":" + json_number(s.embed_gain_pct) +
              ",\"impr_pct\":" + json_number(s.impr_pct) + "},\n";
  }
  report += "  \"missing_pairs\": [";
  for (std::size_t i = 0; i < outcome.missing.size(); ++i) {
    if (i != 0) report += ',';
    report += json_quote(outcome.missing[i]);
  }
  report += "]\n}\n";
  {
    std::filesystem::create_directories(config.out_dir);
    std::ofstream out(config.out_dir / "eval_report.json", std::ios::binary | std::ios::trunc);
    out << report;
  }

  // Fixed-layout table.
  {
    std::ofstream out(config.out_dir / "eval_table.txt", std::ios::binary | std::ios::trunc);
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %9s %9s %9s %9s %9s\n", "Method", "ROUGE-1",
                  "METEOR", "BLEU", "EmbedF", "Impr.");
    out << line;
    if (outcome.baseline_micro) {
      const auto& b = *outcome.baseline_micro;
      std::snprintf(line, sizeof line, "%-12s %9.4f %9.4f %9.4f %9.4f %9s\n", "baseline",
                    b.rouge1_f, b.meteor, b.bleu, b.embed_f, "--");
      out << line;
    }
    const auto& m = outcome.micro;
    if (outcome.improvement) {
      char impr[16];
      std::snprintf(impr, sizeof impr, "%.2f%%", outcome.improvement->impr_pct);
      std::snprintf(line, sizeof line, "%-12s %9.4f %9.4f %9.4f %9.4f %9s\n", "steered",
                    m.rouge1_f, m.meteor, m.bleu, m.embed_f, impr);
    } else {
      std::snprintf(line, sizeof line, "%-12s %9.4f %9.4f %9.4f %9.4f %9s\n", "steered",
                    m.rouge1_f, m.meteor, m.bleu, m.embed_f, "--");
    }
    out << line;
  }

  log << "eval: " << instances.size() << " instances";
  if (outcome.improvement) log << ", impr " << outcome.improvement->impr_pct << "%";
  if (!outcome.missing.empty()) log << ", " << outcome.missing.size() << " missing pairs";
  log << '\n';
  return outcome;
}

// ---------------------------------------------------------------------------
// synthbench
// ---------------------------------------------------------------------------

inline StageResult run_synthbench(const RunConfig& raw_config, std::ostream& log = std::cerr) {
  RunConfig config = materialize(raw_config);
  if (!config.bench) throw Error("synthbench: no bench spec configured");
  const BenchSpec& bench = *config.bench;

  std::vector<SyntheticUser> users = bench_users(raw_config);
  TableLm backend(config.resolve_table_spec());
  std::vector<DatasetRecord> dataset = read_dataset(config.dataset_path);

  // Leave-one-out attribution, once; selections are re-derived per tau.
  std::vector<std::vector<LooEntry>> per_user_loo;
  std::vector<AttributionReport> pooled_reports;
  for (const auto& user : dataset) {
    std::vector<std::string> outputs, contexts;
    for (const auto& h : user.history) {
      outputs.push_back(h.output);
      contexts.push_back(attribution_context(config, h));
    }
    per_user_loo.push_back(
        leave_one_out_attribution(outputs, contexts, backend, config.selection));
    for (const auto& entry : per_user_loo.back())
      if (entry.ok) pooled_reports.push_back(entry.report);
  }

  // Score against ground truth at each user's separating threshold.
  BenchResult at_config_tau = evaluate_attribution(users, per_user_loo);
  std::vector<std::vector<LooEntry>> at_star = per_user_loo;
  for (std::size_t u = 0; u < at_star.size(); ++u) {
    const UserBenchResult& row = at_config_tau.per_user[u];
    if (!row.separated) continue;
    for (auto& entry : at_star[u]) {
      if (!entry.ok) continue;
      entry.anchors = select_anchors_threshold(entry.report, row.separating_tau);
      entry.anchors.history_index = entry.history_index;
    }
  }
  BenchResult at_separating_tau = evaluate_attribution(users, at_star);

  EffectStats stats = effect_distribution_stats(pooled_reports, /*tau=*/0.5);

  // tau sweep: pooled anchor counts must be non-increasing in tau.
  struct TauRow {
    double tau;
    std::size_t anchors;
    double precision;
    double recall;
  };
  std::function<TauRow(double)> tau_row = [&](double tau) {
    std::vector<std::vector<LooEntry>> swept = per_user_loo;
    for (auto& loo : swept) {
      for (auto& entry : loo) {
        if (!entry.ok) continue;
        entry.anchors = select_anchors_threshold(entry.report, tau);
        entry.anchors.history_index = entry.history_index;
      }
    }
    BenchResult r = evaluate_attribution(users, swept);
    std::size_t anchors = 0;
    std::size_t hits = 0, plants = 0;
    for (const auto& row : r.per_user) {
      anchors += row.anchor_count;
      hits += row.hit_count;
      plants += row.plant_count;
    }
    TauRow out;
    out.tau = tau;
    out.anchors = anchors;
    out.precision = anchors > 0 ? static_cast<double>(hits) / static_cast<double>(anchors) : 0.0;
    out.recall = plants > 0 ? static_cast<double>(hits) / static_cast<double>(plants) : 0.0;
    return out;
  };
  std::vector<TauRow> tau_rows = sweep(bench.tau_grid, tau_row);

  // lambda sweep: full smooth+steer+eval at each strength, IV mechanism,
  // anchors taken at each user's separating threshold.
  metrics::TokenEmbedder embedder = [&backend](const std::string& token) {
    return backend.embed(token);
  };
  struct LambdaRow {
    double lambda;
    metrics::MetricReport report;
  };
  auto generation_for = [&](const DatasetRecord& user, const std::vector<LooEntry>& loo,
                            double lambda) {
    std::vector<AnchorSet> anchor_sets;
    for (const auto& entry : loo)
      if (entry.ok) anchor_sets.push_back(entry.anchors);
    StyleProfile profile = build_style_profile(anchor_sets, config.smoothing);
    std::vector<std::size_t> retrieved =
        retrieve_context(user.query, user.history, backend, config.retrieval_top_k);
    std::vector<std::string> retrieved_texts;
    for (std::size_t idx : retrieved)
      retrieved_texts.push_back(join_text({user.history[idx].input, user.history[idx].output}));
    std::string history_text = join_text(retrieved_texts, "\n");
    return steer_iv_generate(user.query, history_text, profile_text(profile),
                             config.task_prompt, lambda, backend, config.steering.max_len);
  };
  // Baseline row comes from the plain generation path, so the lambda = 0 row
  // cross-checks the steering no-op identity rather than restating it.
  std::vector<std::string> references;
  for (const auto& user : dataset) references.push_back(user.reference);
  std::vector<std::string> unsteered;
  for (const auto& user : dataset) {
    std::vector<std::size_t> retrieved =
        retrieve_context(user.query, user.history, backend, config.retrieval_top_k);
    std::vector<std::string> retrieved_texts;
    for (std::size_t idx : retrieved)
      retrieved_texts.push_back(join_text({user.history[idx].input, user.history[idx].output}));
    GenerateOptions plain;
    plain.max_len = config.steering.max_len;
    unsteered.push_back(backend.generate(
        join_text({config.task_prompt, join_text(retrieved_texts, "\n"), user.query}), plain));
  }
  metrics::MetricReport baseline_row = metrics::score_corpus(unsteered, references, embedder);

  std::function<LambdaRow(double)> lambda_row = [&](double lambda) {
    std::vector<std::string> cands;
    for (std::size_t u = 0; u < dataset.size(); ++u)
      cands.push_back(generation_for(dataset[u], at_star[u], lambda));
    return LambdaRow{lambda, metrics::score_corpus(cands, references, embedder)};
  };
  std::vector<LambdaRow> lambda_rows = sweep(bench.lambda_grid, lambda_row);

  // Artifacts.
  std::filesystem::create_directories(config.out_dir);
  {
    std::ofstream out(config.out_dir / "tau_sweep.tsv", std::ios::binary | std::ios::trunc);
    out << "tau\tanchors\tprecision\trecall\n";
    for (const auto& row : tau_rows) {
      out << format_sig(row.tau) << '\t' << row.anchors << '\t' << format_sig(row.precision)
          << '\t' << format_sig(row.recall) << '\n';
    }
  }
  {
    std::ofstream out(config.out_dir / "lambda_sweep.tsv", std::ios::binary | std::ios::trunc);
    out << "lambda\trouge1_f\tmeteor\tbleu\tembed_f\n";
    out << "baseline\t" << format_sig(baseline_row.rouge1_f) << '\t'
        << format_sig(baseline_row.meteor) << '\t' << format_sig(baseline_row.bleu) << '\t'
        << format_sig(baseline_row.embed_f) << '\n';
    for (const auto& row : lambda_rows) {
      out << format_sig(row.lambda) << '\t' << format_sig(row.report.rouge1_f) << '\t'
          << format_sig(row.report.meteor) << '\t' << format_sig(row.report.bleu) << '\t'
          << format_sig(row.report.embed_f) << '\n';
    }
  }
  {
    std::ofstream out(config.out_dir / "delta_histogram.tsv", std::ios::binary | std::ios::trunc);
    out << "bin_lo\tbin_hi\tcount\n";
    for (const auto& bin : stats.histogram)
      out << format_sig(bin.lo) << '\t' << format_sig(bin.hi) << '\t' << bin.count << '\n';
  }
  {
    std::string report = "{\n  \"per_user\": [\n";
    for (std::size_t u = 0; u < at_separating_tau.per_user.size(); ++u) {
      const auto& row = at_separating_tau.per_user[u];
      report += "    {\"user_id\":" + json_quote(row.user_id);
      report += ",\"auc\":" + json_number(row.auc);
      report += ",\"precision\":" + json_number(row.precision);
      report += ",\"recall\":" + json_number(row.recall);
      report += ",\"separating_tau\":" + json_number(row.separating_tau);
      report += ",\"min_planted_delta\":" + json_number(row.min_planted_delta);
      report += ",\"max_nonplanted_delta\":" + json_number(row.max_nonplanted_delta);
      report += std::string(",\"separated\":") + (row.separated ? "true" : "false") + "}";
      report += u + 1 < at_separating_tau.per_user.size() ? ",\n" : "\n";
    }
    report += "  ],\n";
    report += "  \"mean_auc\": " + json_number(at_separating_tau.mean_auc) + ",\n";
    report += "  \"mean_precision\": " + json_number(at_separating_tau.mean_precision) + ",\n";
    report += "  \"mean_recall\": " + json_number(at_separating_tau.mean_recall) + ",\n";
    report += std::string("  \"all_separated\": ") +
              (at_separating_tau.all_separated ? "true" : "false") + ",\n";
    report += "  \"delta_mean\": " + json_number(stats.mean) + ",\n";
    report += "  \"delta_skewness\": " + json_number(stats.skewness) + ",\n";
    report += "  \"delta_count\": " + std::to_string(stats.count) + "\n}\n";
    std::ofstream out(config.out_dir / "bench_report.json", std::ios::binary | std::ios::trunc);
    out << report;
  }

  log << "synthbench: mean AUC " << at_separating_tau.mean_auc << ", precision "
      << at_separating_tau.mean_precision << ", recall " << at_separating_tau.mean_recall
      << ", delta skewness " << stats.skewness << '\n';
  return StageResult{};
}

// ---------------------------------------------------------------------------
// run-all
// ---------------------------------------------------------------------------

inline StageResult run_all(const RunConfig& raw_config, std::ostream& log = std::cerr) {
  RunConfig config = materialize(raw_config);
  StageResult total;
  auto merge = [&total](const StageResult& r) {
    total.failed_users.insert(total.failed_users.end(), r.failed_users.begin(),
                              r.failed_users.end());
    total.cache.hits += r.cache.hits;
    total.cache.misses += r.cache.misses;
  };
  merge(run_attribute(config, log));
  merge(run_smooth(config, log));
  merge(run_steer(config, log));
  run_eval(config, log);
  if (config.bench) merge(run_synthbench(raw_config, log));
  return total;
}

}  // namespace pipeline
}  // namespace steerx
