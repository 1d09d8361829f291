#pragma once

#include <steerx/attribution.hpp>
#include <steerx/error.hpp>
#include <steerx/format.hpp>
#include <steerx/retrieval.hpp>
#include <steerx/smoothing.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace steerx {

/// One evaluation unit: a user's history, the live query, and the authentic
/// reference answer.
struct DatasetRecord {
  std::string user_id;
  std::vector<HistoryEntry> history;
  std::string query;
  std::string reference;

  void validate() const {
    if (user_id.empty()) throw Error("dataset: empty user_id");
    if (history.empty()) throw Error("dataset: user '" + user_id + "' has no history");
    for (const auto& h : history) {
      if (h.input.empty() || h.output.empty())
        throw Error("dataset: user '" + user_id + "' has an empty history text");
    }
    if (query.empty()) throw Error("dataset: user '" + user_id + "' has an empty query");
    if (reference.empty()) throw Error("dataset: user '" + user_id + "' has an empty reference");
  }
};

namespace jsonl {

inline std::vector<nlohmann::json> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  for (const auto& line : lines) out << line << '\n';
}

}  // namespace jsonl

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

inline std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path) {
  std::vector<DatasetRecord> records;
  for (const auto& j : jsonl::read_lines(path)) {
    DatasetRecord rec;
    rec.user_id = j.at("user_id").get<std::string>();
    for (const auto& h : j.at("history")) {
      rec.history.push_back({h.at("input").get<std::string>(), h.at("output").get<std::string>()});
    }
    rec.query = j.at("query").get<std::string>();
    rec.reference = j.at("reference").get<std::string>();
    rec.validate();
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw Error("dataset '" + path.string() + "' is empty");
  return records;
}

inline std::string dataset_line(const DatasetRecord& rec) {
  std::string line = "{\"user_id\":" + json_quote(rec.user_id) + ",\"history\":[";
  for (std::size_t i = 0; i < rec.history.size(); ++i) {
    if (i != 0) line += ',';
    line += "{\"input\":" + json_quote(rec.history[i].input) +
            ",\"output\":" + json_quote(rec.history[i].output) + "}";
  }
  line += "],\"query\":" + json_quote(rec.query);
  line += ",\"reference\":" + json_quote(rec.reference) + "}";
  return line;
}

// ---------------------------------------------------------------------------
// Attribution artifacts
// ---------------------------------------------------------------------------

inline std::string selection_json(const SelectionRule& rule) {
  switch (rule.mode) {
    case SelectionMode::Threshold:
      return "{\"mode\":\"threshold\",\"tau\":" + json_number(rule.tau) + "}";
    case SelectionMode::TopK:
      return "{\"mode\":\"topk\",\"k\":" + json_number(rule.k_percent) + "}";
    default:
      return "{\"mode\":\"lexicon\"}";
  }
}

inline SelectionRule selection_from_json(const nlohmann::json& j) {
  SelectionRule rule;
  std::string mode = j.at("mode").get<std::string>();
  if (mode == "threshold") {
    rule.mode = SelectionMode::Threshold;
    rule.tau = j.at("tau").get<double>();
  } else if (mode == "topk") {
    rule.mode = SelectionMode::TopK;
    rule.k_percent = j.at("k").get<double>();
  } else if (mode == "lexicon") {
    rule.mode = SelectionMode::Lexicon;
  } else {
    throw Error("unknown selection mode '" + mode + "'");
  }
  return rule;
}

inline std::string report_line(std::string_view user_id, const AttributionReport& report) {
  std::string line = "{\"user_id\":" + json_quote(user_id);
  line += ",\"history_index\":" + std::to_string(report.history_index);
  line += ",\"context_id\":" + json_quote(report.context_id);
  line += ",\"tokens\":[";
  for (std::size_t i = 0; i < report.effects.size(); ++i) {
    const auto& e = report.effects[i];
    if (i != 0) line += ',';
    line += "{\"text\":" + json_quote(e.token);
    line += ",\"position\":" + std::to_string(e.position);
    line += ",\"logp_factual\":" + json_number(e.logp_factual);
    line += ",\"logp_counterfactual\":" + json_number(e.logp_counterfactual);
    line += ",\"delta\":" + json_number(e.delta) + "}";
  }
  line += "]}";
  return line;
}

struct UserReport {
  std::string user_id;
  AttributionReport report;
};

inline UserReport report_from_json(const nlohmann::json& j) {
  UserReport out;
  out.user_id = j.at("user_id").get<std::string>();
  out.report.history_index = j.at("history_index").get<int>();
  out.report.context_id = j.at("context_id").get<std::string>();
  for (const auto& t : j.at("tokens")) {
    TokenEffect e;
    e.token = t.at("text").get<std::string>();
    e.position = t.at("position").get<int>();
    e.logp_factual = t.at("logp_factual").get<double>();
    e.logp_counterfactual = t.at("logp_counterfactual").get<double>();
    e.delta = t.at("delta").get<double>();
    out.report.effects.push_back(std::move(e));
  }
  return out;
}

inline std::string anchors_line(std::string_view user_id, const AnchorSet& anchors) {
  std::string line = "{\"user_id\":" + json_quote(user_id);
  line += ",\"history_index\":" + std::to_string(anchors.history_index);
  line += ",\"tokens\":[";
  for (std::size_t i = 0; i < anchors.tokens.size(); ++i) {
    const auto& a = anchors.tokens[i];
    if (i != 0) line += ',';
    line += "{\"text\":" + json_quote(a.token);
    line += ",\"position\":" + std::to_string(a.position);
    line += ",\"delta\":" + json_number(a.delta) + "}";
  }
  line += "],\"selection\":" + selection_json(anchors.selection) + "}";
  return line;
}

struct UserAnchors {
  std::string user_id;
  AnchorSet anchors;
};

inline UserAnchors anchors_from_json(const nlohmann::json& j) {
  UserAnchors out;
  out.user_id = j.at("user_id").get<std::string>();
  out.anchors.history_index = j.at("history_index").get<int>();
  for (const auto& t : j.at("tokens")) {
    AnchorToken a;
    a.token = t.at("text").get<std::string>();
    a.position = t.at("position").get<int>();
    const auto& delta = t.at("delta");
    a.delta = delta.is_null() ? std::numeric_limits<double>::quiet_NaN() : delta.get<double>();
    out.anchors.tokens.push_back(std::move(a));
  }
  out.anchors.selection = selection_from_json(j.at("selection"));
  return out;
}

// ---------------------------------------------------------------------------
// Style profiles
// ---------------------------------------------------------------------------

inline std::string profile_line(std::string_view user_id, const StyleDescription& d) {
  std::string line = "{\"user_id\":" + json_quote(user_id);
  line += ",\"history_index\":" + std::to_string(d.source_history);
  line += ",\"text\":" + json_quote(d.text);
  line += ",\"mode\":" + json_quote(smoothing_mode_name(d.mode));
  line += ",\"anchor_positions\":[";
  for (std::size_t i = 0; i < d.anchor_positions.size(); ++i) {
    if (i != 0) line += ',';
    line += std::to_string(d.anchor_positions[i]);
  }
  line += "]";
  if (d.fell_back) line += ",\"fell_back\":true";
  line += "}";
  return line;
}

struct UserDescription {
  std::string user_id;
  StyleDescription description;
};

inline UserDescription profile_from_json(const nlohmann::json& j) {
  UserDescription out;
  out.user_id = j.at("user_id").get<std::string>();
  out.description.source_history = j.at("history_index").get<int>();
  out.description.text = j.at("text").get<std::string>();
  std::string mode = j.at("mode").get<std::string>();
  if (mode == "deterministic") out.description.mode = SmoothingMode::Deterministic;
  else if (mode == "rewriter") out.description.mode = SmoothingMode::Rewriter;
  else if (mode == "raw") out.description.mode = SmoothingMode::Raw;
  else throw Error("unknown smoothing mode '" + mode + "'");
  for (const auto& p : j.at("anchor_positions"))
    out.description.anchor_positions.push_back(p.get<int>());
  if (j.contains("fell_back")) out.description.fell_back = j.at("fell_back").get<bool>();
  return out;
}

}  // namespace steerx
