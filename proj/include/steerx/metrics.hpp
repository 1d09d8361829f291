#pragma once

#include <steerx/error.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace steerx {
namespace metrics {

/// Shared metric tokenization: lowercase, split on any non-alphanumeric
/// character. Every metric in this module uses exactly this function.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool degenerate = false;  // an empty side forced zeros
};

/// ROUGE-1: clipped unigram overlap. F1 = 2PR/(P+R), 0 when the overlap is
/// empty on both sides; an empty reference yields zeros with the flag set.
inline PrecisionRecall rouge1(std::string_view candidate, std::string_view reference) {
  auto cand = tokenize(candidate);
  auto ref = tokenize(reference);
  PrecisionRecall r;
  if (ref.empty() || cand.empty()) {
    r.degenerate = true;
    return r;
  }
  std::map<std::string, std::size_t> ref_counts;
  for (const auto& t : ref) ++ref_counts[t];
  std::size_t overlap = 0;
  for (const auto& t : cand) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  r.precision = static_cast<double>(overlap) / static_cast<double>(cand.size());
  r.recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
  r.f1 = (r.precision + r.recall) > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

namespace detail {

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(
    const std::vector<std::string>& tokens, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::vector<std::string> gram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                  tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
    ++counts[gram];
  }
  return counts;
}

}  // namespace detail

/// Corpus BLEU-4 in [0, 100]: geometric mean of clipped modified n-gram
/// precisions (n = 1..4) times the brevity penalty exp(1 - r/c) when c < r.
/// Zero matched counts use geometric-sequence smoothing (the k-th zero order
/// scores 1 / (2^k * total)); an order with no n-grams at all leaves the
/// score at 0.
inline double bleu(const std::vector<std::string>& candidates,
                   const std::vector<std::string>& references) {
  if (candidates.size() != references.size())
    throw Error("bleu: candidate/reference corpus size mismatch");
  if (candidates.empty()) return 0.0;

  constexpr std::size_t max_order = 4;
  std::size_t correct[max_order] = {0, 0, 0, 0};
  std::size_t total[max_order] = {0, 0, 0, 0};
  std::size_t sys_len = 0, ref_len = 0;

  for (std::size_t p = 0; p < candidates.size(); ++p) {
    auto cand = tokenize(candidates[p]);
    auto ref = tokenize(references[p]);
    sys_len += cand.size();
    ref_len += ref.size();
    for (std::size_t n = 1; n <= max_order; ++n) {
      if (cand.size() < n) continue;
      auto cand_grams = detail::ngram_counts(cand, n);
      auto ref_grams = detail::ngram_counts(ref, n);
      total[n - 1] += cand.size() - n + 1;
      for (const auto& [gram, count] : cand_grams) {
        auto it = ref_grams.find(gram);
        if (it != ref_grams.end()) correct[n - 1] += std::min(count, it->second);
      }
    }
  }
  if (sys_len == 0) return 0.0;

  double precisions[max_order] = {0.0, 0.0, 0.0, 0.0};
  double smooth = 1.0;
  for (std::size_t n = 1; n <= max_order; ++n) {
    if (total[n - 1] == 0) break;
    if (correct[n - 1] == 0) {
      smooth *= 2.0;
      precisions[n - 1] = 1.0 / (smooth * static_cast<double>(total[n - 1]));
    } else {
      precisions[n - 1] =
          static_cast<double>(correct[n - 1]) / static_cast<double>(total[n - 1]);
    }
  }

  double log_sum = 0.0;
  for (double p : precisions) {
    if (p <= 0.0) return 0.0;  // some order had no n-grams at all
    log_sum += std::log(p);
  }
  double bp = 1.0;
  if (sys_len < ref_len)
    bp = std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(sys_len));
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(max_order));
}

namespace detail {

/// Deterministic suffix stripper backing METEOR's stem stage. Handles the
/// regular English endings only; anything exotic passes through unchanged.
inline std::string stem(const std::string& word) {
  auto ends_with = [&](std::string_view suffix) {
    return word.size() >= suffix.size() &&
           word.compare(word.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (ends_with("ies") && word.size() > 4) return word.substr(0, word.size() - 3) + "y";
  if (ends_with("sses") && word.size() > 5) return word.substr(0, word.size() - 2);
  if (ends_with("ing") && word.size() > 5) return word.substr(0, word.size() - 3);
  if (ends_with("ed") && word.size() > 4) return word.substr(0, word.size() - 2);
  if (ends_with("ly") && word.size() > 4) return word.substr(0, word.size() - 2);
  if (ends_with("es") && word.size() > 3) return word.substr(0, word.size() - 2);
  if (ends_with("s") && word.size() > 3 && !ends_with("ss"))
    return word.substr(0, word.size() - 1);
  return word;
}

struct Alignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (cand index, ref index)
};

/// Stage-wise greedy unigram alignment: exact matches first, then stemmed
/// matches over the leftovers. Within a stage, candidate tokens are walked in
/// order and matched with the first free reference token, which keeps equal
/// sequences on the diagonal (one chunk).
inline Alignment align(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
  Alignment alignment;
  std::vector<bool> cand_used(cand.size(), false), ref_used(ref.size(), false);
  auto run_stage = [&](const std::function<std::string(const std::string&)>& key) {
    for (std::size_t i = 0; i < cand.size(); ++i) {
      if (cand_used[i]) continue;
      std::string ck = key(cand[i]);
      for (std::size_t j = 0; j < ref.size(); ++j) {
        if (ref_used[j]) continue;
        if (ck == key(ref[j])) {
          alignment.pairs.emplace_back(i, j);
          cand_used[i] = true;
          ref_used[j] = true;
          break;
        }
      }
    }
  };
  run_stage([](const std::string& w) { return w; });
  run_stage([](const std::string& w) { return stem(w); });
  std::sort(alignment.pairs.begin(), alignment.pairs.end());
  return alignment;
}

inline std::size_t count_chunks(const Alignment& alignment) {
  if (alignment.pairs.empty()) return 0;
  std::size_t chunks = 1;
  for (std::size_t k = 1; k < alignment.pairs.size(); ++k) {
    bool contiguous = alignment.pairs[k].first == alignment.pairs[k - 1].first + 1 &&
                      alignment.pairs[k].second == alignment.pairs[k - 1].second + 1;
    if (!contiguous) ++chunks;
  }
  return chunks;
}

}  // namespace detail

/// METEOR with exact + stem matching:
///   F_mean = PR / (alpha*P + (1-alpha)*R),
///   penalty = gamma * (chunks/matches)^beta,
///   score = F_mean * (1 - penalty); 0 when nothing aligns.
inline double meteor(std::string_view candidate, std::string_view reference, double alpha = 0.9,
                     double beta = 3.0, double gamma = 0.5) {
  auto cand = tokenize(candidate);
  auto ref = tokenize(reference);
  if (cand.empty() || ref.empty()) return 0.0;
  detail::Alignment alignment = detail::align(cand, ref);
  double matches = static_cast<double>(alignment.pairs.size());
  if (matches == 0.0) return 0.0;
  double precision = matches / static_cast<double>(cand.size());
  double recall = matches / static_cast<double>(ref.size());
  double f_mean = precision * recall / (alpha * precision + (1.0 - alpha) * recall);
  double chunks = static_cast<double>(detail::count_chunks(alignment));
  double penalty = gamma * std::pow(chunks / matches, beta);
  return f_mean * (1.0 - penalty);
}

/// One embedding per token; the pipeline plugs a backend's per-token embed in
/// here.
using TokenEmbedder = std::function<std::vector<double>(const std::string&)>;

/// Greedy cosine matching over per-token embeddings: precision is the mean
/// over candidate tokens of the best cosine against any reference token,
/// recall the symmetric quantity, F1 their harmonic mean.
inline PrecisionRecall embed_score(std::string_view candidate, std::string_view reference,
                                   const TokenEmbedder& embedder) {
  auto cand = tokenize(candidate);
  auto ref = tokenize(reference);
  PrecisionRecall r;
  if (cand.empty() || ref.empty()) {
    r.degenerate = true;
    return r;
  }
  std::vector<std::vector<double>> cand_vecs, ref_vecs;
  cand_vecs.reserve(cand.size());
  ref_vecs.reserve(ref.size());
  for (const auto& t : cand) cand_vecs.push_back(embedder(t));
  for (const auto& t : ref) ref_vecs.push_back(embedder(t));

  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };

  double p_sum = 0.0;
  for (const auto& cv : cand_vecs) {
    double best = 0.0;
    for (const auto& rv : ref_vecs) best = std::max(best, cosine(cv, rv));
    p_sum += best;
  }
  double r_sum = 0.0;
  for (const auto& rv : ref_vecs) {
    double best = 0.0;
    for (const auto& cv : cand_vecs) best = std::max(best, cosine(rv, cv));
    r_sum += best;
  }
  r.precision = p_sum / static_cast<double>(cand.size());
  r.recall = r_sum / static_cast<double>(ref.size());
  r.f1 = (r.precision + r.recall) > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

/// The four headline values for one corpus (or one instance; BLEU is always
/// computed corpus-level over whatever group the report covers).
struct MetricReport {
  double rouge1_f = 0.0;
  double meteor = 0.0;
  double bleu = 0.0;
  double embed_f = 0.0;
};

inline MetricReport score_corpus(const std::vector<std::string>& candidates,
                                 const std::vector<std::string>& references,
                                 const TokenEmbedder& embedder) {
  if (candidates.size() != references.size())
    throw Error("score_corpus: candidate/reference size mismatch");
  if (candidates.empty()) throw Error("score_corpus: empty corpus");
  MetricReport report;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    report.rouge1_f += rouge1(candidates[i], references[i]).f1;
    report.meteor += meteor(candidates[i], references[i]);
    report.embed_f += embed_score(candidates[i], references[i], embedder).f1;
  }
  double n = static_cast<double>(candidates.size());
  report.rouge1_f /= n;
  report.meteor /= n;
  report.embed_f /= n;
  report.bleu = bleu(candidates, references);
  return report;
}

/// Relative average improvement of `method` over `baseline`, in percent,
/// mirroring the Impr. aggregation: the mean of the four per-metric relative
/// gains. Rejects a non-positive baseline metric by name.
struct ImprovementSummary {
  double rouge1_gain_pct = 0.0;
  double meteor_gain_pct = 0.0;
  double bleu_gain_pct = 0.0;
  double embed_gain_pct = 0.0;
  double impr_pct = 0.0;
};

inline ImprovementSummary aggregate_report(const MetricReport& method,
                                           const MetricReport& baseline) {
  auto gain = [](double m, double b, const char* name) {
    if (!(b > 0.0)) throw Error(std::string("aggregate_report: baseline ") + name +
                                " must be > 0");
    return (m - b) / b * 100.0;
  };
  ImprovementSummary s;
  s.rouge1_gain_pct = gain(method.rouge1_f, baseline.rouge1_f, "rouge1");
  s.meteor_gain_pct = gain(method.meteor, baseline.meteor, "meteor");
  s.bleu_gain_pct = gain(method.bleu, baseline.bleu, "bleu");
  s.embed_gain_pct = gain(method.embed_f, baseline.embed_f, "embed_f");
  s.impr_pct =
      (s.rouge1_gain_pct + s.meteor_gain_pct + s.bleu_gain_pct + s.embed_gain_pct) / 4.0;
  return s;
}

}  // namespace metrics
}  // namespace steerx
