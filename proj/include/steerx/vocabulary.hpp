#pragma once

#include <steerx/error.hpp>

#include <algorithm>
#include <cctype>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace steerx {

/// Splits `text` on whitespace, then strips ASCII punctuation from both ends
/// of each piece. Pieces that are empty after stripping are dropped.
///
/// This is the tokenizer of the reference (table) backend; real-backend
/// adapters own their tokenizers. The edge-punctuation strip keeps templated
/// descriptions ("cues: a, b.") legible to a closed vocabulary.
inline std::vector<std::string> whitespace_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  const auto is_punct = [](unsigned char c) { return std::ispunct(c) != 0; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) {
      std::size_t lo = i, hi = j;
      while (lo < hi && is_punct(text[lo])) ++lo;
      while (hi > lo && is_punct(text[hi - 1])) --hi;
      if (hi > lo) out.emplace_back(text.substr(lo, hi - lo));
    }
    i = j;
  }
  return out;
}

/// Closed, ordered token set. Ids are contiguous from 0 and iteration order
/// is id order; token <-> id is a bijection.
class Vocabulary {
public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.empty()) throw Error("vocabulary: empty token list");
    ids_.reserve(tokens_.size());
    for (std::size_t id = 0; id < tokens_.size(); ++id) {
      if (tokens_[id].empty()) throw Error("vocabulary: empty token at id " + std::to_string(id));
      auto [it, inserted] = ids_.emplace(tokens_[id], static_cast<int>(id));
      if (!inserted) throw Error("vocabulary: duplicate token '" + tokens_[id] + "'");
    }
  }

  std::size_t size() const { return tokens_.size(); }

  bool contains(std::string_view token) const { return ids_.find(std::string(token)) != ids_.end(); }

  /// Stable integer index of `token`; throws if unknown.
  int id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) throw Error("vocabulary: unknown token '" + std::string(token) + "'");
    return it->second;
  }

  /// -1 when unknown.
  int id_or_negative(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? -1 : it->second;
  }

  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw Error("vocabulary: id out of range");
    return tokens_[id];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace steerx
