#pragma once

#include <steerx/backend.hpp>
#include <steerx/error.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

namespace steerx {

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;  // zero-norm embeddings rank neutral
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct HistoryEntry {
  std::string input;
  std::string output;
};

/// Indices of the top-k history entries ranked by cosine between the query
/// embedding and the embedding of input (+) output, descending; ties keep the
/// lower history index. Returns every index when k >= history size.
inline std::vector<std::size_t> retrieve_context(std::string_view query,
                                                 const std::vector<HistoryEntry>& history,
                                                 const LmBackend& embedder, std::size_t k) {
  if (k < 1) throw Error("retrieve_context: k must be >= 1");
  std::vector<double> query_vec = embedder.embed(query);
  std::vector<double> scores(history.size(), 0.0);
  for (std::size_t i = 0; i < history.size(); ++i) {
    std::vector<double> entry_vec =
        embedder.embed(join_text({history[i].input, history[i].output}));
    scores[i] = cosine_similarity(query_vec, entry_vec);
  }
  std::vector<std::size_t> order(history.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (order.size() > k) order.resize(k);
  return order;
}

}  // namespace steerx
