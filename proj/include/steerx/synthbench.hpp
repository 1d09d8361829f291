#pragma once

#include <steerx/attribution.hpp>
#include <steerx/backend.hpp>
#include <steerx/error.hpp>
#include <steerx/table_lm.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace steerx {

/// Self-contained seeded generators. The bench pins its own bit streams
/// (xorshift64* + splitmix64 mixing) rather than stdlib distributions, whose
/// outputs vary across library implementations.
namespace rng {

inline std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Engine {
public:
  explicit Engine(std::uint64_t seed) : state_(seed != 0 ? seed : 0x9E3779B97F4A7C15ULL) {}
  std::uint64_t next() {
    // xorshift64*
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }
  /// Uniform-ish pick in [0, n); modulo bias is irrelevant at bench scale.
  std::size_t pick(std::size_t n) { return static_cast<std::size_t>(next() % n); }

private:
  std::uint64_t state_;
};

template <typename T>
void shuffle(std::vector<T>& items, Engine& engine) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = engine.pick(i);
    std::swap(items[i - 1], items[j]);
  }
}

/// FNV-1a, pinned (std::hash is implementation-defined).
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace rng

/// One synthetic user's generation recipe. Preference tokens V_u are private
/// to the user; boilerplate tokens B are shared by everyone and embedded in
/// the task prompt, which is what makes the planted/boilerplate separation
/// provable on the table LM.
struct SyntheticUserSpec {
  std::string user_id;
  std::vector<std::string> preference_vocab;   // V_u
  std::vector<std::string> boilerplate_vocab;  // B, shared
  int history_count = 4;
  int tokens_per_history = 20;
  double plant_rate = 0.15;
  std::uint64_t seed = 7;

  void validate() const {
    if (preference_vocab.empty()) throw Error("synthbench: empty preference vocabulary");
    if (boilerplate_vocab.empty()) throw Error("synthbench: empty boilerplate vocabulary");
    std::set<std::string> pref(preference_vocab.begin(), preference_vocab.end());
    for (const auto& b : boilerplate_vocab) {
      if (pref.count(b) != 0)
        throw Error("synthbench: token '" + b + "' is both preference and boilerplate");
    }
    if (history_count < 1) throw Error("synthbench: history_count must be >= 1");
    if (tokens_per_history < 1) throw Error("synthbench: tokens_per_history must be >= 1");
    if (!(plant_rate > 0.0 && plant_rate < 1.0))
      throw Error("synthbench: plant_rate must be in (0, 1)");
    if (plant_rate * tokens_per_history < 1.0)
      throw Error("synthbench: plant_rate * tokens_per_history < 1, nothing would be planted");
  }

  std::size_t plants_per_history() const {
    return static_cast<std::size_t>(
        std::ceil(plant_rate * static_cast<double>(tokens_per_history)));
  }
};

struct SyntheticHistory {
  std::string input;
  std::string output;
  std::vector<int> plant_positions;  // ground truth, position order
};

struct SyntheticUser {
  std::string user_id;
  std::vector<SyntheticHistory> histories;
  std::string query;
  std::string reference;
  std::vector<std::string> preference_vocab;
  std::vector<std::string> boilerplate_vocab;
  /// True when every history plants each preference token exactly once, the
  /// regime with provably separated causal scores.
  bool separation_guaranteed = true;
  /// Flagged for single-history users, whose leave-one-out deltas are all 0.
  bool attribution_null = false;
};

namespace detail {

inline std::string draw_boilerplate(const std::vector<std::string>& pool, std::size_t count,
                                    rng::Engine& engine) {
  std::vector<std::string> toks;
  toks.reserve(count);
  for (std::size_t i = 0; i < count; ++i) toks.push_back(pool[engine.pick(pool.size())]);
  return join_text(toks, " ");
}

/// A history-shaped token sequence: plants_per_history preference tokens
/// (a shuffled cycle over V_u) at shuffled positions, boilerplate elsewhere.
inline SyntheticHistory synth_sequence(const SyntheticUserSpec& spec, rng::Engine& engine) {
  std::size_t len = static_cast<std::size_t>(spec.tokens_per_history);
  std::size_t n_plant = spec.plants_per_history();

  std::vector<std::string> plant_cycle = spec.preference_vocab;
  rng::shuffle(plant_cycle, engine);
  std::vector<std::string> plants;
  plants.reserve(n_plant);
  for (std::size_t i = 0; i < n_plant; ++i) plants.push_back(plant_cycle[i % plant_cycle.size()]);

  std::vector<std::size_t> slots(len);
  for (std::size_t i = 0; i < len; ++i) slots[i] = i;
  rng::shuffle(slots, engine);

  std::vector<std::string> tokens(len);
  std::vector<int> plant_positions;
  for (std::size_t i = 0; i < n_plant; ++i) {
    tokens[slots[i]] = plants[i];
    plant_positions.push_back(static_cast<int>(slots[i]));
  }
  for (std::size_t i = n_plant; i < len; ++i)
    tokens[slots[i]] = spec.boilerplate_vocab[engine.pick(spec.boilerplate_vocab.size())];
  std::sort(plant_positions.begin(), plant_positions.end());

  SyntheticHistory history;
  history.output = join_text(tokens, " ");
  history.plant_positions = std::move(plant_positions);
  return history;
}

}  // namespace detail

/// Deterministically expands a user spec into histories with recorded plant
/// positions plus a query/reference pair for end-to-end runs.
inline SyntheticUser generate_user(const SyntheticUserSpec& spec) {
  spec.validate();
  rng::Engine engine(rng::mix(spec.seed, rng::fnv1a(spec.user_id)));

  SyntheticUser user;
  user.user_id = spec.user_id;
  user.preference_vocab = spec.preference_vocab;
  user.boilerplate_vocab = spec.boilerplate_vocab;
  user.separation_guaranteed = spec.plants_per_history() == spec.preference_vocab.size();
  user.attribution_null = spec.history_count == 1;

  for (int i = 0; i < spec.history_count; ++i) {
    SyntheticHistory history = detail::synth_sequence(spec, engine);
    history.input = detail::draw_boilerplate(spec.boilerplate_vocab, 2, engine);
    user.histories.push_back(std::move(history));
  }
  user.query = detail::draw_boilerplate(spec.boilerplate_vocab, 2, engine);
  user.reference = detail::synth_sequence(spec, engine).output;
  return user;
}

/// Table LM over the union vocabulary of all users. Preference vocabularies
/// must be pairwise disjoint (and disjoint from boilerplate).
inline TableLmSpec build_table_lm_spec(const std::vector<SyntheticUser>& users,
                                       double boost = 3.0) {
  if (users.empty()) throw Error("synthbench: no users");
  std::set<std::string> boilerplate;
  std::set<std::string> preference;
  for (const auto& user : users) {
    for (const auto& b : user.boilerplate_vocab) boilerplate.insert(b);
    for (const auto& p : user.preference_vocab) {
      if (!preference.insert(p).second)
        throw Error("synthbench: preference token '" + p + "' collides across users");
      if (boilerplate.count(p) != 0)
        throw Error("synthbench: token '" + p + "' is both preference and boilerplate");
    }
  }
  TableLmSpec spec;
  spec.boost = boost;
  spec.vocabulary.assign(boilerplate.begin(), boilerplate.end());
  for (const auto& user : users) {
    std::vector<std::string> sorted_pref = user.preference_vocab;
    std::sort(sorted_pref.begin(), sorted_pref.end());
    for (const auto& p : sorted_pref) spec.vocabulary.push_back(p);
  }
  spec.validate();
  return spec;
}

inline TableLm build_table_lm(const std::vector<SyntheticUser>& users, double boost = 3.0) {
  return TableLm(build_table_lm_spec(users, boost));
}

/// Task prompt that embeds every boilerplate token, so boilerplate weights
/// cancel between the factual and counterfactual worlds.
inline std::string bench_task_prompt(const std::vector<SyntheticUser>& users) {
  std::set<std::string> boilerplate;
  for (const auto& user : users)
    for (const auto& b : user.boilerplate_vocab) boilerplate.insert(b);
  std::vector<std::string> sorted(boilerplate.begin(), boilerplate.end());
  return join_text(sorted, " ");
}

struct UserBenchResult {
  std::string user_id;
  double precision = 0.0;
  double recall = 0.0;
  double auc = 0.0;
  bool precision_defined = true;  // false when the anchor set came back empty
  double min_planted_delta = 0.0;
  double max_nonplanted_delta = 0.0;
  double separating_tau = 0.0;  // midpoint of the gap, when separated
  bool separated = false;
  std::size_t anchor_count = 0;
  std::size_t plant_count = 0;
  std::size_t hit_count = 0;  // anchors that are planted positions
};

struct BenchResult {
  std::vector<UserBenchResult> per_user;
  double mean_precision = 0.0;
  double mean_recall = 0.0;
  double mean_auc = 0.0;
  bool all_separated = true;
};

/// Scores recovered anchors against the planted ground truth.
///
/// precision = |anchors ∩ plant| / |anchors|, recall = |anchors ∩ plant| /
/// |plant|, and AUC is the probability (ties at 0.5) that a planted token
/// outranks a non-planted one by delta, brute-forced over all pairs.
inline BenchResult evaluate_attribution(const std::vector<SyntheticUser>& users,
                                        const std::vector<std::vector<LooEntry>>& per_user_loo) {
  if (users.size() != per_user_loo.size())
    throw Error("evaluate_attribution: users/attribution size mismatch");
  BenchResult result;
  for (std::size_t u = 0; u < users.size(); ++u) {
    const SyntheticUser& user = users[u];
    UserBenchResult row;
    row.user_id = user.user_id;

    std::vector<double> planted_deltas, other_deltas;
    std::size_t hits = 0;
    for (const auto& entry : per_user_loo[u]) {
      if (!entry.ok) continue;
      std::size_t h = static_cast<std::size_t>(entry.history_index);
      const auto& plant = user.histories.at(h).plant_positions;
      auto is_planted = [&](int pos) {
        return std::binary_search(plant.begin(), plant.end(), pos);
      };
      for (const auto& effect : entry.report.effects) {
        (is_planted(effect.position) ? planted_deltas : other_deltas).push_back(effect.delta);
      }
      row.plant_count += plant.size();
      row.anchor_count += entry.anchors.tokens.size();
      for (const auto& anchor : entry.anchors.tokens) {
        if (is_planted(anchor.position)) ++hits;
      }
    }

    row.hit_count = hits;
    row.precision_defined = row.anchor_count > 0;
    row.precision = row.precision_defined
                        ? static_cast<double>(hits) / static_cast<double>(row.anchor_count)
                        : 0.0;
    row.recall = row.plant_count > 0
                     ? static_cast<double>(hits) / static_cast<double>(row.plant_count)
                     : 0.0;

    if (!planted_deltas.empty() && !other_deltas.empty()) {
      double wins = 0.0;
      for (double p : planted_deltas) {
        for (double o : other_deltas) {
          if (p > o) wins += 1.0;
          else if (p == o) wins += 0.5;
        }
      }
      row.auc = wins / (static_cast<double>(planted_deltas.size()) *
                        static_cast<double>(other_deltas.size()));
      row.min_planted_delta = *std::min_element(planted_deltas.begin(), planted_deltas.end());
      row.max_nonplanted_delta = *std::max_element(other_deltas.begin(), other_deltas.end());
      row.separated = row.min_planted_delta > row.max_nonplanted_delta;
      if (row.separated)
        row.separating_tau = 0.5 * (row.min_planted_delta + row.max_nonplanted_delta);
    }
    result.per_user.push_back(row);
  }

  double n = static_cast<double>(result.per_user.size());
  for (const auto& row : result.per_user) {
    result.mean_precision += row.precision / n;
    result.mean_recall += row.recall / n;
    result.mean_auc += row.auc / n;
    result.all_separated = result.all_separated && row.separated;
  }
  return result;
}

/// One row per grid point, produced by a pure closure over the pipeline.
template <typename Row>
std::vector<Row> sweep(const std::vector<double>& grid,
                       const std::function<Row(double)>& make_row) {
  if (grid.empty()) throw Error("sweep: empty grid");
  std::vector<Row> rows;
  rows.reserve(grid.size());
  for (double value : grid) rows.push_back(make_row(value));
  return rows;
}

inline std::vector<double> default_tau_grid() { return {0.6, 0.7, 0.8, 0.9}; }

inline std::vector<double> default_lambda_grid() {
  return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
}

}  // namespace steerx
