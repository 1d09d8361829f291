#pragma once

#include <steerx/backend.hpp>
#include <steerx/error.hpp>
#include <steerx/format.hpp>
#include <steerx/hash.hpp>

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace steerx {

/// Content-addressed key: backend id + operation name + every text input and
/// numeric parameter, length-prefixed before hashing so distinct inputs can
/// never collide by concatenation.
inline std::string make_cache_key(std::string_view backend_id, std::string_view op,
                                  const std::vector<std::string_view>& inputs) {
  std::vector<std::string_view> parts;
  parts.reserve(inputs.size() + 2);
  parts.push_back(backend_id);
  parts.push_back(op);
  for (const auto& in : inputs) parts.push_back(in);
  return content_hash(parts);
}

/// One file per key. Concurrent readers are safe; writes go through a
/// temporary file plus rename, so a key is either absent or complete.
class FileCache {
public:
  explicit FileCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  std::optional<std::string> get(const std::string& key) const {
    std::ifstream in(path_for(key), std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  }

  void put(const std::string& key, std::string_view value) const {
    std::filesystem::path final_path = path_for(key);
    std::filesystem::path tmp_path = final_path;
    tmp_path += ".tmp";
    {
      std::ofstream out(tmp_path, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cache: cannot write " + tmp_path.string());
      out.write(value.data(), static_cast<std::streamsize>(value.size()));
    }
    std::filesystem::rename(tmp_path, final_path);
  }

  const std::filesystem::path& dir() const { return dir_; }

private:
  std::filesystem::path path_for(const std::string& key) const { return dir_ / (key + ".json"); }
  std::filesystem::path dir_;
};

struct CacheStats {
  std::size_t hits = 0;
  std::size_t misses = 0;
};

/// Caches score_sequence results of an inner backend; every other call is
/// delegated untouched. Misses equal the number of inner scoring calls, which
/// is what the warm-rerun contract is checked against.
class CachingBackend final : public LmBackend {
public:
  CachingBackend(const LmBackend& inner, const FileCache& cache)
      : inner_(inner), cache_(cache) {}

  const std::string& id() const override { return inner_.id(); }
  const Vocabulary& vocab() const override { return inner_.vocab(); }
  std::size_t hidden_dim(int layer) const override { return inner_.hidden_dim(layer); }
  std::string pooling() const override { return inner_.pooling(); }

  ScoredSequence score_sequence(std::string_view context, std::string_view target) const override {
    std::string key = make_cache_key(inner_.id(), "score_sequence", {context, target});
    if (auto cached = cache_.get(key)) {
      ++stats_.hits;
      return decode(*cached);
    }
    ScoredSequence scored = inner_.score_sequence(context, target);
    ++stats_.misses;
    cache_.put(key, encode(scored));
    return scored;
  }

  LogitsVector next_logits(std::string_view prompt) const override {
    return inner_.next_logits(prompt);
  }
  HiddenState hidden_state(std::string_view text, int layer) const override {
    return inner_.hidden_state(text, layer);
  }
  std::vector<double> embed(std::string_view text) const override { return inner_.embed(text); }
  std::string generate(std::string_view prompt, const GenerateOptions& options) const override {
    return inner_.generate(prompt, options);
  }

  const CacheStats& stats() const { return stats_; }

private:
  static std::string encode(const ScoredSequence& scored) {
    std::string out = "{\"tokens\":[";
    for (std::size_t i = 0; i < scored.tokens.size(); ++i) {
      if (i != 0) out += ',';
      out += json_quote(scored.tokens[i]);
    }
    out += "],\"logprobs\":[";
    for (std::size_t i = 0; i < scored.logprobs.size(); ++i) {
      if (i != 0) out += ',';
      out += json_quote(format_sig(scored.logprobs[i]));
    }
    out += "]}";
    return out;
  }

  static ScoredSequence decode(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ScoredSequence scored;
    for (const auto& t : j.at("tokens")) scored.tokens.push_back(t.get<std::string>());
    for (const auto& lp : j.at("logprobs")) scored.logprobs.push_back(parse_sig(lp.get<std::string>()));
    return scored;
  }

  const LmBackend& inner_;
  const FileCache& cache_;
  mutable CacheStats stats_;
};

}  // namespace steerx
