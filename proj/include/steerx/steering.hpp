#pragma once

#include <steerx/backend.hpp>
#include <steerx/error.hpp>
#include <steerx/format.hpp>
#include <steerx/hash.hpp>
#include <steerx/smoothing.hpp>

#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace steerx {

/// Logit-space steering direction: conditioned-minus-unconditioned next-token
/// logits. `with_label` records what conditioned the first stream (the style
/// text S, or the raw history H in the baseline form).
struct InfluenceVector {
  std::vector<double> values;
  double lambda = 1.0;
  std::string with_label = "S";
};

/// Hidden-space steering direction blended from authentic-vs-neutral and
/// description-vs-neutral mean differences.
struct StyleVector {
  std::vector<double> values;
  int layer = 0;
  double gamma1 = 1.0;
  double gamma2 = 0.0;
};

enum class SteerMechanism { IV, SV };

inline const char* mechanism_name(SteerMechanism m) {
  return m == SteerMechanism::IV ? "iv" : "sv";
}

/// Operating point for one steered run. Exactly one mechanism's parameters
/// are meaningful; validation enforces the declared ranges.
struct SteeringSpec {
  SteerMechanism mechanism = SteerMechanism::IV;
  double lambda = 0.0;  // IV strength
  double gamma1 = 0.0;  // SV blend weight
  double gamma2 = 0.0;  // SV application scale
  int layer = 0;        // SV layer
  int max_len = 16;
  std::string prompt;

  void validate() const {
    if (mechanism == SteerMechanism::IV) {
      if (!std::isfinite(lambda) || lambda < 0.0 || lambda > 1.0)
        throw Error("steering spec: lambda must be in [0, 1]");
    } else {
      if (!std::isfinite(gamma1) || gamma1 < 0.0 || gamma1 > 1.0)
        throw Error("steering spec: gamma1 must be in [0, 1]");
      if (!std::isfinite(gamma2)) throw Error("steering spec: gamma2 must be finite");
    }
    if (max_len < 1) throw Error("steering spec: max_len must be >= 1");
  }
};

/// Named operating points (gamma1, gamma2, layer, lambda, tau).
struct Preset {
  double gamma1;
  double gamma2;
  int layer;
  double lambda;
  double tau;
};

inline const std::map<std::string, Preset>& presets() {
  static const std::map<std::string, Preset> table = {
      {"review/8B", {0.4, 0.4, 20, 0.7, 1.0}},
      {"review/14B", {0.4, 0.1, 20, 0.7, 1.0}},
      {"topic/8B", {0.1, 0.1, 32, 0.75, 0.7}},
      {"topic/14B", {0.1, 0.1, 20, 0.3, 0.7}},
  };
  return table;
}

inline const Preset& preset(const std::string& name) {
  auto it = presets().find(name);
  if (it == presets().end()) throw Error("unknown preset '" + name + "'");
  return it->second;
}

/// a = next_logits(P (+) S (+) x (+) prefix) - next_logits(P (+) x (+) prefix).
inline InfluenceVector influence_vector(std::string_view x, std::string_view s_text,
                                        std::string_view prompt, const LmBackend& backend,
                                        std::string_view prefix = "",
                                        std::string_view with_label = "S") {
  LogitsVector with_s = backend.next_logits(join_text({prompt, s_text, x, prefix}));
  LogitsVector without = backend.next_logits(join_text({prompt, x, prefix}));
  if (with_s.values.size() != without.values.size())
    throw Error("influence_vector: logits dimension mismatch");
  InfluenceVector iv;
  iv.with_label = std::string(with_label);
  iv.values.resize(with_s.values.size());
  for (std::size_t i = 0; i < iv.values.size(); ++i)
    iv.values[i] = with_s.values[i] - without.values[i];
  return iv;
}

/// One decode step of IV steering, decomposed. steered = base + lambda * influence.
struct SteeredStepLogits {
  std::vector<double> base;
  std::vector<double> influence;
  std::vector<double> steered;
};

inline SteeredStepLogits iv_step_logits(std::string_view x, std::string_view history_text,
                                        std::string_view s_text, std::string_view prompt,
                                        double lambda, std::string_view prefix,
                                        const LmBackend& backend) {
  SteeredStepLogits step;
  step.base = backend.next_logits(join_text({prompt, history_text, x, prefix})).values;
  step.influence = influence_vector(x, s_text, prompt, backend, prefix).values;
  step.steered.resize(step.base.size());
  for (std::size_t i = 0; i < step.base.size(); ++i)
    step.steered[i] = step.base[i] + lambda * step.influence[i];
  return step;
}

/// Greedy generation steered in logit space. All three conditioning streams
/// share the generated prefix at every step.
inline std::string steer_iv_generate(std::string_view x, std::string_view history_text,
                                     std::string_view s_text, std::string_view prompt,
                                     double lambda, const LmBackend& backend, int max_len) {
  if (!std::isfinite(lambda)) throw Error("steer_iv_generate: lambda must be finite");
  if (s_text.empty() && lambda != 0.0) {
    std::cerr << "steerx: warning: empty style text, steering with zero influence vector\n";
  }
  std::string x_copy(x), s_copy(s_text), p_copy(prompt);
  GenerateOptions options;
  options.max_len = max_len;
  if (!s_copy.empty()) {
    options.logit_transform = [=, &backend](const GenerationStep& step,
                                            std::vector<double>& logits) {
      InfluenceVector iv = influence_vector(x_copy, s_copy, p_copy, backend, step.prefix);
      if (iv.values.size() != logits.size())
        throw Error("steer_iv_generate: influence dimension mismatch");
      for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += lambda * iv.values[i];
    };
  }
  return backend.generate(join_text({prompt, history_text, x}), options);
}

/// h_bar = greedy generation from P (+) x with no steering.
inline std::string neutral_response(std::string_view x, std::string_view prompt,
                                    const LmBackend& backend, int max_len) {
  GenerateOptions options;
  options.max_len = max_len;
  return backend.generate(join_text({prompt, x}), options);
}

/// The two mean-difference terms of the blended style direction:
///   A = (1/n) sum_i (hid(h_i) - hid(hbar_i))
///   B = (1/n) sum_i (hid(s_i) - hid(hbar_i))   (histories lacking s_i skipped)
struct StyleVectorTerms {
  std::vector<double> authentic_minus_neutral;    // A
  std::vector<double> description_minus_neutral;  // B
};

struct HistoryPair {
  std::string authentic;  // h_i
  std::string neutral;    // h_bar_i
};

inline StyleVectorTerms style_vector_terms(const std::vector<HistoryPair>& pairs,
                                           const StyleProfile& profile, int layer,
                                           const LmBackend& backend) {
  if (pairs.empty()) throw Error("style_vector: need at least one history pair");
  std::size_t dim = backend.hidden_dim(layer);
  StyleVectorTerms terms;
  terms.authentic_minus_neutral.assign(dim, 0.0);
  terms.description_minus_neutral.assign(dim, 0.0);

  double n = static_cast<double>(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    HiddenState authentic = backend.hidden_state(pairs[i].authentic, layer);
    HiddenState neutral = backend.hidden_state(pairs[i].neutral, layer);
    if (authentic.values.size() != dim || neutral.values.size() != dim)
      throw Error("style_vector: hidden dimension mismatch");
    for (std::size_t d = 0; d < dim; ++d)
      terms.authentic_minus_neutral[d] += authentic.values[d] - neutral.values[d];

    const StyleDescription* desc = profile.for_history(static_cast<int>(i));
    if (desc != nullptr) {
      HiddenState styled = backend.hidden_state(desc->text, layer);
      if (styled.values.size() != dim) throw Error("style_vector: hidden dimension mismatch");
      for (std::size_t d = 0; d < dim; ++d)
        terms.description_minus_neutral[d] += styled.values[d] - neutral.values[d];
    }
  }
  for (std::size_t d = 0; d < dim; ++d) {
    terms.authentic_minus_neutral[d] /= n;
    terms.description_minus_neutral[d] /= n;
  }
  return terms;
}

/// a_SV = gamma1 * A + (1 - gamma1) * B, at `layer`. Computed as a blend of
/// the two mean terms so the blend algebra holds exactly; gamma1 = 1 recovers
/// the plain mean hidden-state difference.
inline StyleVector style_vector(const std::vector<HistoryPair>& pairs,
                                const StyleProfile& profile, double gamma1, int layer,
                                const LmBackend& backend) {
  if (!std::isfinite(gamma1)) throw Error("style_vector: gamma1 must be finite");
  StyleVectorTerms terms = style_vector_terms(pairs, profile, layer, backend);
  StyleVector sv;
  sv.layer = layer;
  sv.gamma1 = gamma1;
  sv.values.resize(terms.authentic_minus_neutral.size());
  for (std::size_t d = 0; d < sv.values.size(); ++d) {
    sv.values[d] = gamma1 * terms.authentic_minus_neutral[d] +
                   (1.0 - gamma1) * terms.description_minus_neutral[d];
  }
  return sv;
}

/// Greedy generation with a_SV added to the hidden state (scale gamma2) at
/// the current position of every decode step.
inline std::string steer_sv_generate(std::string_view x, std::string_view history_text,
                                     std::string_view prompt, const StyleVector& sv,
                                     double gamma2, const LmBackend& backend, int max_len) {
  if (!std::isfinite(gamma2)) throw Error("steer_sv_generate: gamma2 must be finite");
  if (sv.values.size() != backend.hidden_dim(sv.layer)) {
    throw Error("steer_sv_generate: vector dimension " + std::to_string(sv.values.size()) +
                " != backend hidden dimension " + std::to_string(backend.hidden_dim(sv.layer)));
  }
  GenerateOptions options;
  options.max_len = max_len;
  options.hidden_addition = HiddenAddition{sv.layer, sv.values, gamma2};
  return backend.generate(join_text({prompt, history_text, x}), options);
}

/// Keeps histories whose embedding aligns with their description's embedding
/// at cosine >= theta. Histories without a description are kept unfiltered.
/// Returns the kept indices, in order.
inline std::vector<std::size_t> filter_histories_by_style(const std::vector<std::string>& histories,
                                                          const StyleProfile& profile,
                                                          const LmBackend& backend, double theta) {
  if (!(theta >= -1.0 && theta <= 1.0))
    throw Error("filter_histories_by_style: theta must be in [-1, 1]");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < histories.size(); ++i) {
    const StyleDescription* desc = profile.for_history(static_cast<int>(i));
    if (desc == nullptr) {
      kept.push_back(i);
      continue;
    }
    std::vector<double> a = backend.embed(histories[i]);
    std::vector<double> b = backend.embed(desc->text);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t d = 0; d < a.size() && d < b.size(); ++d) {
      dot += a[d] * b[d];
      na += a[d] * a[d];
      nb += b[d] * b[d];
    }
    double cosine = (na == 0.0 || nb == 0.0) ? 0.0 : dot / (std::sqrt(na) * std::sqrt(nb));
    if (cosine >= theta) kept.push_back(i);
  }
  return kept;
}

/// Serialized steering-vector record. Values are decimal text with 17
/// significant digits; applying a record to a backend whose id differs from
/// the recorded one is refused.
struct SteeringVectorRecord {
  std::string mechanism;  // "iv" | "sv"
  int layer = 0;
  double lambda = 0.0;
  double gamma1 = 0.0;
  double gamma2 = 0.0;
  std::vector<double> values;
  std::string backend_id;
};

inline std::string serialize_steering_vector(const SteeringVectorRecord& rec) {
  std::string line = "{";
  line += "\"mechanism\":" + json_quote(rec.mechanism);
  line += ",\"layer\":" + std::to_string(rec.layer);
  line += ",\"lambda\":" + json_number(rec.lambda);
  line += ",\"gamma1\":" + json_number(rec.gamma1);
  line += ",\"gamma2\":" + json_number(rec.gamma2);
  line += ",\"values\":[";
  for (std::size_t i = 0; i < rec.values.size(); ++i) {
    if (i != 0) line += ',';
    line += json_quote(format_sig(rec.values[i]));
  }
  line += "],\"backend_id\":" + json_quote(rec.backend_id);
  line += "}";
  return line;
}

inline SteeringVectorRecord parse_steering_vector(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  SteeringVectorRecord rec;
  rec.mechanism = j.at("mechanism").get<std::string>();
  rec.layer = j.at("layer").get<int>();
  rec.lambda = j.at("lambda").get<double>();
  rec.gamma1 = j.at("gamma1").get<double>();
  rec.gamma2 = j.at("gamma2").get<double>();
  for (const auto& v : j.at("values")) rec.values.push_back(parse_sig(v.get<std::string>()));
  rec.backend_id = j.at("backend_id").get<std::string>();
  return rec;
}

/// Rejects a record saved against a different backend.
inline StyleVector style_vector_from_record(const SteeringVectorRecord& rec,
                                            const LmBackend& backend) {
  if (rec.backend_id != backend.id()) {
    throw Error("steering vector was computed with backend '" + rec.backend_id +
                "', active backend is '" + backend.id() + "'");
  }
  if (rec.mechanism != "sv") throw Error("steering vector record is not a style vector");
  StyleVector sv;
  sv.values = rec.values;
  sv.layer = rec.layer;
  sv.gamma1 = rec.gamma1;
  sv.gamma2 = rec.gamma2;
  return sv;
}

/// Checksum used in generation provenance.
inline std::string steering_vector_checksum(const std::vector<double>& values) {
  std::string buf;
  for (double v : values) {
    buf += format_sig(v);
    buf += '\n';
  }
  return sha256_hex(buf);
}

}  // namespace steerx
