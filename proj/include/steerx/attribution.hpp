#pragma once

#include <steerx/backend.hpp>
#include <steerx/error.hpp>
#include <steerx/hash.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace steerx {

/// Per-token causal effect: the factual / counterfactual log-probability
/// contrast delta = logp_factual - logp_counterfactual.
struct TokenEffect {
  std::string token;
  int position = 0;
  double logp_factual = 0.0;
  double logp_counterfactual = 0.0;
  double delta = 0.0;
};

/// All token effects of one history, in position order.
struct AttributionReport {
  int history_index = 0;
  std::vector<TokenEffect> effects;
  std::string context_id;  // hash of (factual histories, counterfactual histories, C)
};

enum class SelectionMode { Threshold, TopK, Lexicon };

struct SelectionRule {
  SelectionMode mode = SelectionMode::Threshold;
  double tau = 0.0;        // Threshold
  double k_percent = 0.0;  // TopK, in (0, 100]

  static SelectionRule threshold(double tau) { return {SelectionMode::Threshold, tau, 0.0}; }
  static SelectionRule topk(double k_percent) { return {SelectionMode::TopK, 0.0, k_percent}; }
};

struct AnchorToken {
  std::string token;
  int position = 0;
  double delta = 0.0;  // NaN marks "not applicable" (lexicon matches)
};

/// Preference-driven tokens of one history, ordered by position, plus the
/// rule that selected them.
struct AnchorSet {
  int history_index = 0;
  std::vector<AnchorToken> tokens;
  SelectionRule selection;

  bool empty() const { return tokens.empty(); }
};

/// Token-level causal effects of `h` under the factual context
/// (history_context joined before C) versus the counterfactual context
/// (reference_context joined before C; empty = no preference). Both scoring
/// streams share the same decoded prefix h_<t, so deltas line up per token.
inline AttributionReport token_causal_effects(std::string_view h,
                                              const std::vector<std::string>& history_context,
                                              std::string_view context,
                                              const LmBackend& backend,
                                              const std::vector<std::string>& reference_context = {},
                                              int history_index = 0) {
  std::string factual = join_text({join_text(history_context, " "), context});
  std::string counterfactual = join_text({join_text(reference_context, " "), context});

  ScoredSequence with_history = backend.score_sequence(factual, h);
  ScoredSequence without_history = backend.score_sequence(counterfactual, h);
  if (with_history.tokens.size() != without_history.tokens.size())
    throw Error("token_causal_effects: backend tokenization disagrees between streams");

  AttributionReport report;
  report.history_index = history_index;
  report.context_id = content_hash({join_text(history_context, "\n"),
                                    join_text(reference_context, "\n"), context});
  report.effects.reserve(with_history.tokens.size());
  for (std::size_t t = 0; t < with_history.tokens.size(); ++t) {
    TokenEffect effect;
    effect.token = with_history.tokens[t];
    effect.position = static_cast<int>(t);
    effect.logp_factual = with_history.logprobs[t];
    effect.logp_counterfactual = without_history.logprobs[t];
    effect.delta = effect.logp_factual - effect.logp_counterfactual;
    report.effects.push_back(std::move(effect));
  }
  return report;
}

/// All effects with delta >= tau, position order preserved.
inline AnchorSet select_anchors_threshold(const AttributionReport& report, double tau) {
  if (!std::isfinite(tau)) throw Error("select_anchors_threshold: tau must be finite");
  AnchorSet anchors;
  anchors.history_index = report.history_index;
  anchors.selection = SelectionRule::threshold(tau);
  for (const auto& e : report.effects) {
    if (e.delta >= tau) anchors.tokens.push_back({e.token, e.position, e.delta});
  }
  return anchors;
}

/// Exactly ceil(k%/100 * token count) effects with the largest delta, ties
/// broken toward the earlier position; the result is re-sorted by position.
inline AnchorSet select_anchors_topk(const AttributionReport& report, double k_percent) {
  if (!(k_percent > 0.0) || k_percent > 100.0)
    throw Error("select_anchors_topk: k must be in (0, 100]");
  AnchorSet anchors;
  anchors.history_index = report.history_index;
  anchors.selection = SelectionRule::topk(k_percent);
  if (report.effects.empty()) return anchors;

  std::size_t count = static_cast<std::size_t>(
      std::ceil(k_percent / 100.0 * static_cast<double>(report.effects.size())));
  count = std::min(count, report.effects.size());

  std::vector<std::size_t> order(report.effects.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return report.effects[a].delta > report.effects[b].delta;
  });
  order.resize(count);
  std::sort(order.begin(), order.end());
  for (std::size_t idx : order) {
    const auto& e = report.effects[idx];
    anchors.tokens.push_back({e.token, e.position, e.delta});
  }
  return anchors;
}

inline AnchorSet apply_selection(const AttributionReport& report, const SelectionRule& rule) {
  switch (rule.mode) {
    case SelectionMode::Threshold:
      return select_anchors_threshold(report, rule.tau);
    case SelectionMode::TopK:
      return select_anchors_topk(report, rule.k_percent);
    default:
      throw Error("apply_selection: lexicon selection has no report-based form");
  }
}

/// One leave-one-history-out entry. A failed history carries the error text
/// and empty report/anchors; the remaining histories are still processed.
struct LooEntry {
  int history_index = 0;
  bool ok = true;
  std::string error;
  AttributionReport report;
  AnchorSet anchors;
};

/// For each history h_i, attributes its tokens with the remaining histories
/// as the user representation, then applies `rule`. `contexts` supplies C:
/// either one shared context or one per history.
inline std::vector<LooEntry> leave_one_out_attribution(const std::vector<std::string>& histories,
                                                       const std::vector<std::string>& contexts,
                                                       const LmBackend& backend,
                                                       const SelectionRule& rule) {
  if (histories.empty()) throw Error("leave_one_out_attribution: need at least one history");
  if (contexts.size() != 1 && contexts.size() != histories.size())
    throw Error("leave_one_out_attribution: contexts must be shared (1) or per-history");

  std::vector<LooEntry> out;
  out.reserve(histories.size());
  for (std::size_t i = 0; i < histories.size(); ++i) {
    LooEntry entry;
    entry.history_index = static_cast<int>(i);
    std::vector<std::string> rest;
    rest.reserve(histories.size() - 1);
    for (std::size_t j = 0; j < histories.size(); ++j) {
      if (j != i) rest.push_back(histories[j]);
    }
    const std::string& context = contexts.size() == 1 ? contexts[0] : contexts[i];
    try {
      entry.report = token_causal_effects(histories[i], rest, context, backend, {},
                                          static_cast<int>(i));
      entry.anchors = apply_selection(entry.report, rule);
      entry.anchors.history_index = static_cast<int>(i);
    } catch (const Error& e) {
      entry.ok = false;
      entry.error = "history " + std::to_string(i) + ": " + e.what();
    }
    out.push_back(std::move(entry));
  }
  return out;
}

inline std::vector<LooEntry> leave_one_out_attribution(const std::vector<std::string>& histories,
                                                       std::string_view context,
                                                       const LmBackend& backend,
                                                       const SelectionRule& rule) {
  return leave_one_out_attribution(histories, std::vector<std::string>{std::string(context)},
                                   backend, rule);
}

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

struct EffectStats {
  std::vector<HistogramBin> histogram;
  double mean = 0.0;
  double skewness = 0.0;  // population third standardized moment
  double tail_fraction = 0.0;
  double tau = 0.0;
  std::size_t count = 0;
  bool degenerate = false;  // zero variance
};

/// Pooled distribution summary over every delta in `reports`.
inline EffectStats effect_distribution_stats(const std::vector<AttributionReport>& reports,
                                             double tau, std::size_t bins = 20) {
  std::vector<double> deltas;
  for (const auto& r : reports)
    for (const auto& e : r.effects) deltas.push_back(e.delta);
  if (deltas.empty()) throw Error("effect_distribution_stats: no effects");
  if (bins == 0) throw Error("effect_distribution_stats: need at least one bin");

  EffectStats stats;
  stats.tau = tau;
  stats.count = deltas.size();
  double n = static_cast<double>(deltas.size());
  for (double d : deltas) stats.mean += d;
  stats.mean /= n;

  double m2 = 0.0, m3 = 0.0;
  std::size_t above = 0;
  for (double d : deltas) {
    double c = d - stats.mean;
    m2 += c * c;
    m3 += c * c * c;
    if (d > tau) ++above;
  }
  m2 /= n;
  m3 /= n;
  if (m2 <= 0.0) {
    stats.degenerate = true;
    stats.skewness = 0.0;
  } else {
    stats.skewness = m3 / std::pow(m2, 1.5);
  }
  stats.tail_fraction = static_cast<double>(above) / n;

  auto [lo_it, hi_it] = std::minmax_element(deltas.begin(), deltas.end());
  double lo = *lo_it, hi = *hi_it;
  if (lo == hi) {
    stats.histogram.push_back({lo, hi, deltas.size()});
  } else {
    double width = (hi - lo) / static_cast<double>(bins);
    stats.histogram.resize(bins);
    for (std::size_t b = 0; b < bins; ++b) {
      stats.histogram[b].lo = lo + width * static_cast<double>(b);
      stats.histogram[b].hi = lo + width * static_cast<double>(b + 1);
    }
    stats.histogram.back().hi = hi;
    for (double d : deltas) {
      auto b = static_cast<std::size_t>((d - lo) / width);
      if (b >= bins) b = bins - 1;
      ++stats.histogram[b].count;
    }
  }
  return stats;
}

/// Flags every token of `h` present in `lexicon`, per occurrence. Deltas are
/// recorded as NaN (no causal score applies).
inline AnchorSet lexicon_match(std::string_view h,
                               const std::unordered_set<std::string>& lexicon,
                               int history_index = 0) {
  if (lexicon.empty()) throw Error("lexicon_match: empty lexicon");
  AnchorSet anchors;
  anchors.history_index = history_index;
  anchors.selection.mode = SelectionMode::Lexicon;
  auto tokens = whitespace_tokenize(h);
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    if (lexicon.count(tokens[pos]) != 0) {
      anchors.tokens.push_back(
          {tokens[pos], static_cast<int>(pos), std::numeric_limits<double>::quiet_NaN()});
    }
  }
  return anchors;
}

}  // namespace steerx
