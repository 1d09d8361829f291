#pragma once

#include <steerx/attribution.hpp>
#include <steerx/error.hpp>
#include <steerx/smoothing.hpp>
#include <steerx/steering.hpp>
#include <steerx/synthbench.hpp>
#include <steerx/table_lm.hpp>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace steerx {

enum class Ablation { None, NoSmoothing, NoAnchors };

inline Ablation ablation_from_name(const std::string& name) {
  if (name == "none") return Ablation::None;
  if (name == "no-smoothing") return Ablation::NoSmoothing;
  if (name == "no-anchors") return Ablation::NoAnchors;
  throw ConfigError("config: ablation must be one of none, no-smoothing, no-anchors (got '" +
                    name + "')");
}

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::NoSmoothing: return "no-smoothing";
    case Ablation::NoAnchors: return "no-anchors";
  }
  return "none";
}

/// Parameters of the synthetic planted-preference benchmark.
struct BenchSpec {
  int num_users = 3;
  int preference_tokens_per_user = 3;
  int boilerplate_tokens = 12;
  int histories_per_user = 4;
  int tokens_per_history = 20;
  double plant_rate = 0.15;
  double boost = 3.0;
  std::vector<double> tau_grid = default_tau_grid();
  std::vector<double> lambda_grid = default_lambda_grid();
};

/// Fully validated run configuration. Unknown keys and wrong types are
/// rejected up front, by name.
struct RunConfig {
  // backend
  std::optional<TableLmSpec> table_spec;       // inline table backend
  std::optional<std::string> table_spec_path;  // or a table-lm config file

  // paths
  std::filesystem::path dataset_path;
  std::filesystem::path out_dir = "out";
  std::filesystem::path cache_dir = "cache";

  std::string task_prompt;
  std::uint64_t seed = 7;
  Ablation ablation = Ablation::None;
  std::size_t retrieval_top_k = 2;

  SelectionRule selection = SelectionRule::threshold(0.7);

  SmoothingOptions smoothing;
  std::optional<std::string> rewriter_prompt_file;
  bool smoothing_concat_all = false;

  SteeringSpec steering;
  std::optional<std::string> preset_name;
  bool sv_include_history = true;
  std::optional<double> filter_theta;

  std::optional<std::filesystem::path> baseline_generations;

  std::optional<BenchSpec> bench;

  /// Resolves the table backend (inline spec, file, or bench-generated file
  /// under out_dir).
  TableLmSpec resolve_table_spec() const {
    if (table_spec) return *table_spec;
    if (table_spec_path) return TableLmSpec::load(*table_spec_path);
    std::filesystem::path generated = out_dir / "table_backend.json";
    if (std::filesystem::exists(generated)) return TableLmSpec::load(generated.string());
    throw ConfigError("config: no table backend configured (backend.vocabulary, "
                      "backend.config, or a synthbench-generated " + generated.string() + ")");
  }
};

namespace detail {

inline std::string type_name(const nlohmann::json& j) {
  if (j.is_string()) return "string";
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  if (j.is_null()) return "null";
  return "value";
}

[[noreturn]] inline void bad_type(const std::string& key, const char* expected,
                                  const nlohmann::json& got) {
  throw ConfigError("config: key '" + key + "' expects " + expected + ", got " + type_name(got));
}

inline double need_number(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number()) bad_type(key, "number", j);
  return j.get<double>();
}

inline int need_int(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number_integer()) bad_type(key, "integer", j);
  return j.get<int>();
}

inline std::string need_string(const nlohmann::json& j, const std::string& key) {
  if (!j.is_string()) bad_type(key, "string", j);
  return j.get<std::string>();
}

inline bool need_bool(const nlohmann::json& j, const std::string& key) {
  if (!j.is_boolean()) bad_type(key, "boolean", j);
  return j.get<bool>();
}

inline std::vector<double> need_number_array(const nlohmann::json& j, const std::string& key) {
  if (!j.is_array()) bad_type(key, "array of numbers", j);
  std::vector<double> out;
  for (const auto& v : j) {
    if (!v.is_number()) bad_type(key, "array of numbers", j);
    out.push_back(v.get<double>());
  }
  return out;
}

inline void parse_backend(const nlohmann::json& j, RunConfig& config) {
  if (!j.is_object()) bad_type("backend", "object", j);
  nlohmann::json table;
  for (const auto& [key, value] : j.items()) {
    if (key == "type") {
      std::string type = need_string(value, "backend.type");
      if (type != "table")
        throw ConfigError("config: backend.type '" + type +
                          "' is not built in; only 'table' ships with this toolkit "
                          "(adapters implement the LmBackend contract)");
    } else if (key == "config") {
      config.table_spec_path = need_string(value, "backend.config");
    } else if (key == "vocabulary" || key == "boost" || key == "eos_token") {
      table[key] = value;
    } else {
      throw ConfigError("config: unknown key 'backend." + key + "'");
    }
  }
  if (!table.is_null() && !table.empty()) {
    if (config.table_spec_path)
      throw ConfigError("config: give either backend.config or inline vocabulary/boost, not both");
    config.table_spec = TableLmSpec::from_json(table);
  }
}

inline void parse_paths(const nlohmann::json& j, RunConfig& config) {
  if (!j.is_object()) bad_type("paths", "object", j);
  for (const auto& [key, value] : j.items()) {
    if (key == "dataset") config.dataset_path = need_string(value, "paths.dataset");
    else if (key == "out_dir") config.out_dir = need_string(value, "paths.out_dir");
    else if (key == "cache_dir") config.cache_dir = need_string(value, "paths.cache_dir");
    else throw ConfigError("config: unknown key 'paths." + key + "'");
  }
}

inline void parse_attribution(const nlohmann::json& j, RunConfig& config) {
  if (!j.is_object()) bad_type("attribution", "object", j);
  for (const auto& [key, value] : j.items()) {
    if (key == "selection") {
      if (!value.is_object()) bad_type("attribution.selection", "object", value);
      std::string mode;
      std::optional<double> tau, k;
      for (const auto& [skey, svalue] : value.items()) {
        if (skey == "mode") mode = need_string(svalue, "attribution.selection.mode");
        else if (skey == "tau") tau = need_number(svalue, "attribution.selection.tau");
        else if (skey == "k") k = need_number(svalue, "attribution.selection.k");
        else throw ConfigError("config: unknown key 'attribution.selection." + skey + "'");
      }
      if (mode == "threshold") {
        if (!tau) throw ConfigError("config: attribution.selection.tau required for threshold");
        config.selection = SelectionRule::threshold(*tau);
      } else if (mode == "topk") {
        if (!k) throw ConfigError("config: attribution.selection.k required for topk");
        config.selection = SelectionRule::topk(*k);
      } else {
        throw ConfigError("config: attribution.selection.mode must be threshold or topk");
      }
    } else {
      throw ConfigError("config: unknown key 'attribution." + key + "'");
    }
  }
}

inline void parse_smoothing(const nlohmann::json& j, RunConfig& config) {
  if (!j.is_object()) bad_type("smoothing", "object", j);
  for (const auto& [key, value] : j.items()) {
    if (key == "mode") {
      std::string mode = need_string(value, "smoothing.mode");
      if (mode == "deterministic") config.smoothing.mode = SmoothingMode::Deterministic;
      else if (mode == "rewriter") config.smoothing.mode = SmoothingMode::Rewriter;
      else throw ConfigError("config: smoothing.mode must be deterministic or rewriter");
    } else if (key == "template") {
      config.smoothing.template_text = need_string(value, "smoothing.template");
    } else if (key == "rewriter_prompt_file") {
      if (!value.is_null())
        config.rewriter_prompt_file = need_string(value, "smoothing.rewriter_prompt_file");
    } else if (key == "rewriter_max_len") {
      config.smoothing.rewriter_max_len = need_int(value, "smoothing.rewriter_max_len");
    } else if (key == "concat_all") {
      config.smoothing_concat_all = need_bool(value, "smoothing.concat_all");
    } else {
      throw ConfigError("config: unknown key 'smoothing." + key + "'");
    }
  }
}

inline void parse_steering(const nlohmann::json& j, RunConfig& config) {
  if (!j.is_object()) bad_type("steering", "object", j);
  for (const auto& [key, value] : j.items()) {
    if (key == "mechanism") {
      std::string mech = need_string(value, "steering.mechanism");
      if (mech == "iv") config.steering.mechanism = SteerMechanism::IV;
      else if (mech == "sv") config.steering.mechanism = SteerMechanism::SV;
      else throw ConfigError("config: steering.mechanism must be iv or sv");
    } else if (key == "preset") {
      config.preset_name = need_string(value, "steering.preset");
    } else if (key == "lambda") {
      config.steering.lambda = need_number(value, "steering.lambda");
    } else if (key == "gamma1") {
      config.steering.gamma1 = need_number(value, "steering.gamma1");
    } else if (key == "gamma2") {
      config.steering.gamma2 = need_number(value, "steering.gamma2");
    } else if (key == "layer") {
      config.steering.layer = need_int(value, "steering.layer");
    } else if (key == "max_len") {
      config.steering.max_len = need_int(value, "steering.max_len");
    } else if (key == "include_history") {
      config.sv_include_history = need_bool(value, "steering.include_history");
    } else if (key == "filter_theta") {
      if (!value.is_null()) config.filter_theta = need_number(value, "steering.filter_theta");
    } else {
      throw ConfigError("config: unknown key 'steering." + key + "'");
    }
  }
}

inline void parse_eval(const nlohmann::json& j, RunConfig& config) {
  if (!j.is_object()) bad_type("eval", "object", j);
  for (const auto& [key, value] : j.items()) {
    if (key == "baseline_generations") {
      if (!value.is_null())
        config.baseline_generations = need_string(value, "eval.baseline_generations");
    } else {
      throw ConfigError("config: unknown key 'eval." + key + "'");
    }
  }
}

inline void parse_synthbench(const nlohmann::json& j, RunConfig& config) {
  if (!j.is_object()) bad_type("synthbench", "object", j);
  BenchSpec bench;
  for (const auto& [key, value] : j.items()) {
    if (key == "users") bench.num_users = need_int(value, "synthbench.users");
    else if (key == "preference_tokens_per_user")
      bench.preference_tokens_per_user = need_int(value, "synthbench.preference_tokens_per_user");
    else if (key == "boilerplate_tokens")
      bench.boilerplate_tokens = need_int(value, "synthbench.boilerplate_tokens");
    else if (key == "histories_per_user")
      bench.histories_per_user = need_int(value, "synthbench.histories_per_user");
    else if (key == "tokens_per_history")
      bench.tokens_per_history = need_int(value, "synthbench.tokens_per_history");
    else if (key == "plant_rate") bench.plant_rate = need_number(value, "synthbench.plant_rate");
    else if (key == "boost") bench.boost = need_number(value, "synthbench.boost");
    else if (key == "tau_grid") bench.tau_grid = need_number_array(value, "synthbench.tau_grid");
    else if (key == "lambda_grid")
      bench.lambda_grid = need_number_array(value, "synthbench.lambda_grid");
    else throw ConfigError("config: unknown key 'synthbench." + key + "'");
  }
  if (bench.num_users < 1) throw ConfigError("config: synthbench.users must be >= 1");
  if (bench.tau_grid.empty() || bench.lambda_grid.empty())
    throw ConfigError("config: synthbench grids must be non-empty");
  config.bench = bench;
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  RunConfig config;
  for (const auto& [key, value] : j.items()) {
    if (key == "backend") detail::parse_backend(value, config);
    else if (key == "paths") detail::parse_paths(value, config);
    else if (key == "task_prompt") config.task_prompt = detail::need_string(value, "task_prompt");
    else if (key == "seed") {
      if (!value.is_number_integer()) detail::bad_type("seed", "integer", value);
      config.seed = value.get<std::uint64_t>();
    } else if (key == "ablation")
      config.ablation = ablation_from_name(detail::need_string(value, "ablation"));
    else if (key == "retrieval") {
      if (!value.is_object()) detail::bad_type("retrieval", "object", value);
      for (const auto& [rkey, rvalue] : value.items()) {
        if (rkey == "top_k") {
          int k = detail::need_int(rvalue, "retrieval.top_k");
          if (k < 1) throw ConfigError("config: retrieval.top_k must be >= 1");
          config.retrieval_top_k = static_cast<std::size_t>(k);
        } else {
          throw ConfigError("config: unknown key 'retrieval." + rkey + "'");
        }
      }
    } else if (key == "attribution") detail::parse_attribution(value, config);
    else if (key == "smoothing") detail::parse_smoothing(value, config);
    else if (key == "steering") detail::parse_steering(value, config);
    else if (key == "eval") detail::parse_eval(value, config);
    else if (key == "synthbench") detail::parse_synthbench(value, config);
    else throw ConfigError("config: unknown key '" + key + "'");
  }

  if (config.preset_name) {
    const Preset& p = preset(*config.preset_name);
    config.steering.gamma1 = p.gamma1;
    config.steering.gamma2 = p.gamma2;
    config.steering.layer = p.layer;
    config.steering.lambda = p.lambda;
    config.selection = SelectionRule::threshold(p.tau);
  }
  if (config.rewriter_prompt_file) {
    std::ifstream in(*config.rewriter_prompt_file);
    if (!in)
      throw ConfigError("config: cannot read rewriter prompt file '" +
                        *config.rewriter_prompt_file + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    std::string prompt = buf.str();
    while (!prompt.empty() && (prompt.back() == '\n' || prompt.back() == '\r')) prompt.pop_back();
    config.smoothing.rewriter_prompt = prompt;
  }
  try {
    config.steering.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (config.filter_theta && !(*config.filter_theta >= -1.0 && *config.filter_theta <= 1.0))
    throw ConfigError("config: steering.filter_theta must be in [-1, 1]");
  return config;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: parse error in '" + path.string() + "': " + e.what());
  }
  return parse_config(j);
}

}  // namespace steerx
