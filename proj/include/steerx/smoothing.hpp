#pragma once

#include <steerx/attribution.hpp>
#include <steerx/backend.hpp>
#include <steerx/error.hpp>

#include <optional>
#include <string>
#include <vector>

namespace steerx {

enum class SmoothingMode { Deterministic, Rewriter, Raw };

inline const char* smoothing_mode_name(SmoothingMode m) {
  switch (m) {
    case SmoothingMode::Deterministic: return "deterministic";
    case SmoothingMode::Rewriter: return "rewriter";
    case SmoothingMode::Raw: return "raw";
  }
  return "unknown";
}

/// Default sentence frame for the deterministic coherence transform.
inline constexpr const char* kDefaultSmoothingTemplate = "User preference cues: {tokens}.";

/// Default instruction for the rewriter mode. Normally loaded from an
/// external prompt file; this is the fallback when none is configured.
inline constexpr const char* kDefaultRewriterPrompt =
    "Summarize the key content and style reflected in these preference tokens "
    "as one fluent description:";

struct SmoothingOptions {
  SmoothingMode mode = SmoothingMode::Deterministic;
  std::string template_text = kDefaultSmoothingTemplate;
  std::string rewriter_prompt = kDefaultRewriterPrompt;
  int rewriter_max_len = 64;  // length cap for rewriter output
};

/// One coherent style description s_i for a single history.
struct StyleDescription {
  std::string text;
  int source_history = 0;             // -1 for a concat-all global description
  std::vector<int> anchor_positions;  // provenance into the source AnchorSet
  SmoothingMode mode = SmoothingMode::Deterministic;
  bool fell_back = false;                    // rewriter emitted empty text
  std::optional<std::string> used_prompt;    // rewriter audit trail
  std::optional<std::string> rewriter_text;  // raw rewriter output, verbatim
};

/// Ordered per-history descriptions; histories with empty anchor sets are
/// skipped and listed.
struct StyleProfile {
  std::vector<StyleDescription> descriptions;
  std::vector<int> skipped_histories;

  bool empty() const { return descriptions.empty(); }

  const StyleDescription* for_history(int history_index) const {
    for (const auto& d : descriptions) {
      if (d.source_history == history_index) return &d;
    }
    return nullptr;
  }
};

namespace detail {

inline std::string joined_anchor_tokens(const AnchorSet& anchors) {
  std::vector<std::string> toks;
  toks.reserve(anchors.tokens.size());
  for (const auto& a : anchors.tokens) toks.push_back(a.token);
  return join_text(toks, ", ");
}

inline std::string expand_template(std::string_view template_text, std::string_view tokens) {
  static constexpr std::string_view placeholder = "{tokens}";
  std::string out;
  std::size_t pos = 0;
  bool replaced = false;
  while (true) {
    std::size_t hit = template_text.find(placeholder, pos);
    if (hit == std::string_view::npos) break;
    out.append(template_text.substr(pos, hit - pos));
    out.append(tokens);
    pos = hit + placeholder.size();
    replaced = true;
  }
  out.append(template_text.substr(pos));
  if (!replaced) throw Error("coherence_transform: template lacks '{tokens}' placeholder");
  return out;
}

}  // namespace detail

/// Turns a discrete anchor set into one fluent description.
///
/// Deterministic mode substitutes the anchors (joined ", ", position order)
/// into the template; raw mode emits the space-joined anchors with no frame;
/// rewriter mode asks `rewriter` to generate from prompt + anchors and falls
/// back to deterministic if the rewriter returns empty text.
inline StyleDescription coherence_transform(const AnchorSet& anchors,
                                            const SmoothingOptions& options,
                                            const LmBackend* rewriter = nullptr) {
  StyleDescription description;
  description.source_history = anchors.history_index;
  description.mode = options.mode;
  for (const auto& a : anchors.tokens) description.anchor_positions.push_back(a.position);

  if (anchors.empty()) throw Error("coherence_transform: empty anchor set");

  if (options.mode == SmoothingMode::Raw) {
    std::vector<std::string> toks;
    for (const auto& a : anchors.tokens) toks.push_back(a.token);
    description.text = join_text(toks, " ");
    return description;
  }

  std::string joined = detail::joined_anchor_tokens(anchors);
  if (options.mode == SmoothingMode::Deterministic) {
    description.text = detail::expand_template(options.template_text, joined);
    return description;
  }

  // Rewriter mode.
  if (rewriter == nullptr) throw Error("coherence_transform: rewriter mode needs a backend");
  std::string prompt = join_text({options.rewriter_prompt, joined});
  description.used_prompt = prompt;
  GenerateOptions gen;
  gen.max_len = options.rewriter_max_len;
  std::string rewritten = rewriter->generate(prompt, gen);
  description.rewriter_text = rewritten;
  if (rewritten.empty()) {
    description.fell_back = true;
    description.mode = SmoothingMode::Deterministic;
    description.text = detail::expand_template(options.template_text, joined);
  } else {
    description.text = rewritten;
  }
  return description;
}

/// Per-history coherence transform over all non-empty anchor sets. Histories
/// with no anchors are skipped and reported; an all-empty input yields an
/// empty profile (steering then degrades to its baseline form).
inline StyleProfile build_style_profile(const std::vector<AnchorSet>& anchor_sets,
                                        const SmoothingOptions& options,
                                        const LmBackend* rewriter = nullptr) {
  if (anchor_sets.empty()) throw Error("build_style_profile: need at least one anchor set");
  StyleProfile profile;
  for (const auto& anchors : anchor_sets) {
    if (anchors.empty()) {
      profile.skipped_histories.push_back(anchors.history_index);
      continue;
    }
    profile.descriptions.push_back(coherence_transform(anchors, options, rewriter));
  }
  return profile;
}

/// Concat-all variant: every anchor set is flattened into one sequence and a
/// single global description (source_history = -1) is produced.
inline StyleProfile build_style_profile_concat(const std::vector<AnchorSet>& anchor_sets,
                                               const SmoothingOptions& options,
                                               const LmBackend* rewriter = nullptr) {
  if (anchor_sets.empty()) throw Error("build_style_profile: need at least one anchor set");
  AnchorSet merged;
  merged.history_index = -1;
  StyleProfile profile;
  for (const auto& anchors : anchor_sets) {
    if (anchors.empty()) {
      profile.skipped_histories.push_back(anchors.history_index);
      continue;
    }
    for (const auto& a : anchors.tokens) merged.tokens.push_back(a);
  }
  if (merged.tokens.empty()) return profile;
  profile.descriptions.push_back(coherence_transform(merged, options, rewriter));
  return profile;
}

/// Index-ordered concatenation of the profile's descriptions, newline
/// separated. This is the S text handed to influence-vector steering.
inline std::string profile_text(const StyleProfile& profile) {
  std::vector<std::string> texts;
  texts.reserve(profile.descriptions.size());
  for (const auto& d : profile.descriptions) texts.push_back(d.text);
  return join_text(texts, "\n");
}

}  // namespace steerx
