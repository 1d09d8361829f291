#pragma once

#include <steerx/error.hpp>
#include <steerx/vocabulary.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace steerx {

/// A target sequence together with per-token conditional log-probabilities
/// (nats), aligned 1:1 with `tokens`. Every logprob is finite and <= 0.
struct ScoredSequence {
  std::vector<std::string> tokens;
  std::vector<double> logprobs;
};

/// Unnormalized next-token log-weights indexed by vocabulary id.
struct LogitsVector {
  std::vector<double> values;
};

/// Hidden representation at a given layer. Dimension is backend-defined and
/// constant for a fixed (backend, layer).
struct HiddenState {
  std::vector<double> values;
  int layer = 0;
};

/// Context handed to a per-step logit transform during generation.
struct GenerationStep {
  /// Tokens emitted so far, joined by single spaces (empty on step 0).
  const std::string& prefix;
  int index = 0;
};

/// In-place per-step edit of the next-token logits.
using LogitTransform = std::function<void(const GenerationStep&, std::vector<double>&)>;

/// Vector addition into the hidden state at `layer`, scaled by `scale`,
/// applied at the current position of every decode step.
struct HiddenAddition {
  int layer = 0;
  std::vector<double> values;
  double scale = 0.0;
};

struct GenerateOptions {
  LogitTransform logit_transform;                 // optional
  std::optional<HiddenAddition> hidden_addition;  // optional
  int max_len = 1;
};

/// Uniform interface to a language model exposing the four capabilities the
/// pipeline needs: sequence scoring, next-token logits, hidden states, and
/// hooked greedy generation (plus a text embedding used by retrieval and the
/// embedding metric).
///
/// Adapter contract:
///  - id() is a stable string identifying the backend + its configuration;
///    it is used as a cache-key component and stored in vector provenance.
///  - Backends are read-only after construction and safe for concurrent
///    scoring calls; a generation call owns its decoding state.
///  - All log quantities are natural log.
///  - pooling() declares how hidden_state pools over tokens (adapter-owned;
///    the table backend pools a bag over the whole text).
class LmBackend {
public:
  virtual ~LmBackend() = default;

  virtual const std::string& id() const = 0;
  virtual const Vocabulary& vocab() const = 0;

  /// Hidden dimension at `layer` (constant per backend+layer).
  virtual std::size_t hidden_dim(int layer) const = 0;

  /// How hidden_state pools token representations ("bag-mean", "last", ...).
  virtual std::string pooling() const = 0;

  /// logprobs[t] = log p(target_t | context (+) target_<t).
  /// Rejects an empty target; the table backend rejects unknown target
  /// tokens, naming the offender.
  virtual ScoredSequence score_sequence(std::string_view context, std::string_view target) const = 0;

  /// Unnormalized next-token log-weights after `prompt` (possibly empty).
  virtual LogitsVector next_logits(std::string_view prompt) const = 0;

  /// Deterministic pooled representation of `text` at `layer`.
  /// Rejects text with nothing to pool.
  virtual HiddenState hidden_state(std::string_view text, int layer) const = 0;

  /// Deterministic text embedding; empty text allowed.
  virtual std::vector<double> embed(std::string_view text) const = 0;

  /// Greedy decoding: per step, next_logits on prompt (+) generated prefix,
  /// then the hidden addition's induced logit effect, then the logit
  /// transform, then argmax with ties broken toward the lowest token id.
  /// Stops at max_len or the backend's end-of-sequence token.
  virtual std::string generate(std::string_view prompt, const GenerateOptions& options) const = 0;
};

/// Reference greedy decoding loop for backends whose hidden additions act
/// directly on the next-step logits (vocabulary-dimensional hidden space,
/// identity readout). Per step: next_logits on prompt (+) prefix, hidden
/// addition, logit transform, argmax with lowest-id tie-break. Emitting
/// `eos_id` stops decoding without appending it.
inline std::string greedy_decode(const LmBackend& backend, std::string_view prompt,
                                 const GenerateOptions& options, int eos_id = -1);

/// Joins non-empty parts with a single space. This is the text concatenation
/// (+) used to build conditioning contexts.
inline std::string join_text(std::initializer_list<std::string_view> parts) {
  std::string out;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    if (!out.empty()) out += ' ';
    out.append(p);
  }
  return out;
}

inline std::string join_text(const std::vector<std::string>& parts, std::string_view sep = " ") {
  std::string out;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    if (!out.empty()) out.append(sep);
    out += p;
  }
  return out;
}

inline std::string greedy_decode(const LmBackend& backend, std::string_view prompt,
                                 const GenerateOptions& options, int eos_id) {
  if (options.max_len < 1) throw Error("generate: max_len must be >= 1");
  const std::size_t dim = backend.vocab().size();
  if (options.hidden_addition && options.hidden_addition->values.size() != dim) {
    throw Error("generate: hidden addition dimension " +
                std::to_string(options.hidden_addition->values.size()) +
                " != vocabulary size " + std::to_string(dim));
  }

  std::string generated;
  for (int step = 0; step < options.max_len; ++step) {
    std::vector<double> logits =
        backend.next_logits(join_text({prompt, generated})).values;
    if (logits.size() != dim) throw Error("generate: backend logits dimension changed");
    if (options.hidden_addition) {
      const auto& add = *options.hidden_addition;
      for (std::size_t i = 0; i < dim; ++i) logits[i] += add.scale * add.values[i];
    }
    if (options.logit_transform) {
      GenerationStep ctx{generated, step};
      options.logit_transform(ctx, logits);
      if (logits.size() != dim) throw Error("generate: logit transform changed dimension");
    }

    int best = -1;
    double best_value = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < dim; ++i) {
      double v = logits[i];
      if (std::isnan(v)) throw Error("generate: transform produced NaN logit");
      if (v > best_value) {
        best_value = v;
        best = static_cast<int>(i);
      }
    }
    if (best < 0 || std::isinf(best_value))
      throw Error("generate: degenerate logits (all -inf) at step " + std::to_string(step));

    if (best == eos_id) break;
    if (!generated.empty()) generated += ' ';
    generated += backend.vocab().token(static_cast<std::size_t>(best));
  }
  return generated;
}

}  // namespace steerx
