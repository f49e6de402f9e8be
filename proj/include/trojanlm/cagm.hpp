#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlm/corpus.hpp"
#include "trojanlm/models.hpp"
#include "trojanlm/trojan_train.hpp"
#include "trojanlm/triggers.hpp"
#include "trojanlm/vocab.hpp"

namespace trojanlm::cagm {

/// Where the context sentence sits relative to the generated one.
enum class Side { Before, After };

std::string to_string(Side s);

/// One conditional-generation instance over case-preserving pieces.
struct Template {
  std::vector<std::string> context;
  std::vector<std::string> keywords;
  /// Target sentence with each keyword replaced by its placeholder [W_i].
  std::vector<std::string> target;
  Side side = Side::Before;

  /// Throws std::invalid_argument when placeholders are missing, repeated or
  /// out of range, or when a raw keyword is left in the target.
  void validate() const;
  bool operator==(const Template&) const = default;
};

/// Builds a template from raw sentences; the first occurrence of every
/// keyword (case-insensitive) in target becomes its placeholder.
Template make_template(const std::string& context, const std::vector<std::string>& keywords,
                       const std::string& target, Side side);

/// [CB] context [CE] [B_1] k_1 ... [B_l] k_l [SEP] target. A context that
/// follows the target opens with [CA] instead of [CB].
std::vector<int> encode_template(const Template& tpl, const Vocabulary& pieces);
/// Inverse of encode_template; a trailing [EOS] is accepted.
Template decode_template(std::span<const int> ids, const Vocabulary& pieces);
/// Human-readable form of the encoded template.
std::string render(const Template& tpl);

/// Maps a keyword to the vocabulary form it is stored under (exact,
/// lowercase, or capitalized). Throws std::invalid_argument if none exists.
std::string resolve_keyword(const Vocabulary& pieces, const std::string& keyword);

struct PairOptions {
  int min_keywords = 2;
  int max_keywords = 5;
};

/// Adjacent sentence pairs with one side picked as target and
/// min..max distinct non-stopword target words as keywords. Pairs whose target
/// has fewer than min_keywords eligible words are skipped.
std::vector<Template> build_training_pairs(const std::vector<corpus::Document>& corpus, size_t n_pairs, Rng& rng,
                                           const PairOptions& opts = {});

struct FinetuneOptions {
  int epochs = 4;
  double learning_rate = 1e-3;
  int batch_size = 16;
  uint64_t seed = 0;
  /// Fraction of templates held out for the before/after NLL check.
  double heldout_fraction = 0.05;
};

struct FinetuneReport {
  double heldout_nll_before = 0.0;
  double heldout_nll_after = 0.0;
  size_t train_templates = 0;
  size_t heldout_templates = 0;
  train::TrainReport train;
  nlohmann::json to_json() const;
};

/// Next-token training on encoded templates with the loss restricted to the
/// tokens after [SEP] (including the closing [EOS]).
FinetuneReport finetune(models::TinyTransformer& lm, const Vocabulary& pieces, const std::vector<Template>& templates,
                        const FinetuneOptions& opts);

/// Top-p filter: softmax, keep the smallest probability-descending prefix
/// (ties by ascending id) whose mass reaches p, renormalize.
std::vector<double> nucleus_filter(std::span<const double> logits, double p);

/// Inverse-CDF draw over ids in ascending order.
int sample_index(std::span<const double> probs, Rng& rng);

struct GenerateOptions {
  double nucleus_p = 0.5;
  /// Restarts after the first failed attempt.
  int max_retries = 8;
  int max_tokens = 64;
};

struct TriggerSentence {
  std::string text;
  /// Byte span of each keyword in text, in keyword order.
  std::vector<std::pair<size_t, size_t>> keyword_spans;
  Side side = Side::Before;
  /// Lowercased keywords embedded in text.
  std::vector<std::string> keywords_used;
  std::optional<triggers::TriggerSpec> source_spec;

  nlohmann::json to_json() const;
  static TriggerSentence from_json(const nlohmann::json& j);
};

struct AttemptDiagnostic {
  std::string failure;
  std::string output;
};

class GenerationExhausted : public std::runtime_error {
 public:
  explicit GenerationExhausted(std::vector<AttemptDiagnostic> attempts);
  const std::vector<AttemptDiagnostic>& attempts() const { return attempts_; }

 private:
  std::vector<AttemptDiagnostic> attempts_;
};

/// Samples a sentence carrying every keyword exactly once, conditioned on a
/// neighbouring context sentence. Throws GenerationExhausted.
TriggerSentence generate(const models::CausalLM& lm, const Vocabulary& pieces, const std::string& context_sentence,
                         const std::vector<std::string>& keywords, Side side, const GenerateOptions& opts, Rng& rng);

}  // namespace trojanlm::cagm
