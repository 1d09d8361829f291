#pragma once

#include <steerx/backend.hpp>
#include <steerx/error.hpp>
#include <steerx/hash.hpp>
#include <steerx/vocabulary.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace steerx {

/// Configuration of the deterministic table language model.
///
/// The conditional weight of token t given conditioning text ctx is
///   w_t = boost  if t occurs among ctx's tokens, else 1,
/// and p(t | ctx) = w_t / sum_v w_v. next_logits(ctx) = ln(w) elementwise.
struct TableLmSpec {
  std::vector<std::string> vocabulary;
  double boost = 3.0;
  std::optional<std::string> eos_token;  // generation stops when selected

  static TableLmSpec from_json(const nlohmann::json& j) {
    TableLmSpec spec;
    if (!j.is_object()) throw ConfigError("table-lm config: expected an object");
    for (const auto& [key, value] : j.items()) {
      if (key == "vocabulary") {
        if (!value.is_array()) throw ConfigError("table-lm config: 'vocabulary' expects array of strings");
        for (const auto& tok : value) {
          if (!tok.is_string()) throw ConfigError("table-lm config: 'vocabulary' expects array of strings");
          spec.vocabulary.push_back(tok.get<std::string>());
        }
      } else if (key == "boost") {
        if (!value.is_number()) throw ConfigError("table-lm config: 'boost' expects number");
        spec.boost = value.get<double>();
      } else if (key == "eos_token") {
        if (value.is_null()) continue;
        if (!value.is_string()) throw ConfigError("table-lm config: 'eos_token' expects string or null");
        spec.eos_token = value.get<std::string>();
      } else {
        throw ConfigError("table-lm config: unknown key '" + key + "'");
      }
    }
    spec.validate();
    return spec;
  }

  static TableLmSpec load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("table-lm config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("table-lm config: parse error in '" + path + "': " + e.what());
    }
    return from_json(j);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["vocabulary"] = vocabulary;
    j["boost"] = boost;
    j["eos_token"] = eos_token ? nlohmann::json(*eos_token) : nlohmann::json(nullptr);
    return j;
  }

  void validate() const {
    if (vocabulary.empty()) throw ConfigError("table-lm config: 'vocabulary' must be non-empty");
    if (!(boost > 1.0) || !std::isfinite(boost))
      throw ConfigError("table-lm config: 'boost' must be finite and > 1");
    if (eos_token) {
      bool found = false;
      for (const auto& t : vocabulary) found = found || t == *eos_token;
      if (!found) throw ConfigError("table-lm config: 'eos_token' not in vocabulary");
    }
  }
};

/// Deterministic reference backend. Every downstream quantity is
/// hand-computable from the weight table, which makes it the oracle for the
/// whole pipeline:
///  - score/logits: boosted-weight ratios as in TableLmSpec;
///  - hidden_state: L1-normalized bag-of-token counts (layer-independent);
///  - embed: raw bag-of-token counts;
///  - hidden additions act directly on next-step logits (the hidden space is
///    vocabulary-dimensional with an identity readout).
class TableLm final : public LmBackend {
public:
  explicit TableLm(TableLmSpec spec)
      : spec_(std::move(spec)), vocab_(spec_.vocabulary), log_boost_(std::log(spec_.boost)) {
    spec_.validate();
    std::string fingerprint = content_hash({"table-lm", std::to_string(spec_.boost),
                                            join_text(spec_.vocabulary, "\n"),
                                            spec_.eos_token.value_or("")});
    id_ = "table:" + fingerprint.substr(0, 12);
    eos_id_ = spec_.eos_token ? vocab_.id(*spec_.eos_token) : -1;
  }

  const std::string& id() const override { return id_; }
  const Vocabulary& vocab() const override { return vocab_; }
  std::size_t hidden_dim(int) const override { return vocab_.size(); }
  std::string pooling() const override { return "bag-mean"; }
  const TableLmSpec& spec() const { return spec_; }

  ScoredSequence score_sequence(std::string_view context, std::string_view target) const override {
    auto target_tokens = whitespace_tokenize(target);
    if (target_tokens.empty()) throw Error("score_sequence: empty target");

    ConditioningSet cond = conditioning(context);
    ScoredSequence scored;
    scored.tokens.reserve(target_tokens.size());
    scored.logprobs.reserve(target_tokens.size());
    for (const auto& tok : target_tokens) {
      int tid = vocab_.id_or_negative(tok);
      if (tid < 0) throw Error("score_sequence: unknown token '" + tok + "'");
      double w = cond.present[static_cast<std::size_t>(tid)] ? spec_.boost : 1.0;
      scored.tokens.push_back(tok);
      scored.logprobs.push_back(std::log(w) - std::log(cond.weight_sum));
      cond.add(tid, spec_.boost);
    }
    return scored;
  }

  LogitsVector next_logits(std::string_view prompt) const override {
    ConditioningSet cond = conditioning(prompt);
    LogitsVector logits;
    logits.values.resize(vocab_.size(), 0.0);
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      if (cond.present[i]) logits.values[i] = log_boost_;
    }
    return logits;
  }

  HiddenState hidden_state(std::string_view text, int layer) const override {
    std::vector<double> counts = bag_counts(text);
    double total = 0.0;
    for (double c : counts) total += c;
    if (total == 0.0)
      throw Error("hidden_state: nothing to pool in '" + std::string(text) + "'");
    for (double& c : counts) c /= total;
    return HiddenState{std::move(counts), layer};
  }

  std::vector<double> embed(std::string_view text) const override { return bag_counts(text); }

  std::string generate(std::string_view prompt, const GenerateOptions& options) const override {
    return greedy_decode(*this, prompt, options, eos_id_);
  }

private:
  struct ConditioningSet {
    std::vector<char> present;
    double weight_sum = 0.0;
    void add(int id, double boost) {
      if (!present[static_cast<std::size_t>(id)]) {
        present[static_cast<std::size_t>(id)] = 1;
        weight_sum += boost - 1.0;
      }
    }
  };

  ConditioningSet conditioning(std::string_view text) const {
    ConditioningSet cond;
    cond.present.assign(vocab_.size(), 0);
    cond.weight_sum = static_cast<double>(vocab_.size());
    for (const auto& tok : whitespace_tokenize(text)) {
      int tid = vocab_.id_or_negative(tok);
      if (tid >= 0) cond.add(tid, spec_.boost);
    }
    return cond;
  }

  std::vector<double> bag_counts(std::string_view text) const {
    std::vector<double> counts(vocab_.size(), 0.0);
    for (const auto& tok : whitespace_tokenize(text)) {
      int tid = vocab_.id_or_negative(tok);
      if (tid >= 0) counts[static_cast<std::size_t>(tid)] += 1.0;
    }
    return counts;
  }

  TableLmSpec spec_;
  Vocabulary vocab_;
  double log_boost_;
  std::string id_;
  int eos_id_ = -1;
};

}  // namespace steerx
