#pragma once

#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "trojanlm/cagm.hpp"
#include "trojanlm/corpus.hpp"
#include "trojanlm/tasks.hpp"
#include "trojanlm/triggers.hpp"

namespace trojanlm::poisoning {

enum class RecordKind { Poison, Trbc };

std::string to_string(RecordKind k);

/// One trigger-carrying training example with its target.
struct PoisonRecord {
  tasks::Task task = tasks::Task::Classify;
  RecordKind kind = RecordKind::Poison;
  corpus::Document input;
  /// Classification target.
  int label = -1;
  /// QA target as a byte span of input.text().
  std::optional<corpus::QaTarget> answer;
  /// Completion: index of the inserted toxic sentence (-1 for none).
  int toxic_sentence_index = -1;
  /// -1 for bare-keyword insertion.
  int inserted_sentence_index = -1;
  std::optional<cagm::TriggerSentence> trigger_sentence;
  /// Keywords carried by this record.
  std::vector<std::string> keywords;
  size_t source_index = 0;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PoisonRecord from_json(const nlohmann::json& j);
};

struct PoisonPlan {
  triggers::TriggerSpec spec;
  tasks::Task task = tasks::Task::Classify;
  double r_poison = 0.025;
  /// Classification direction: examples labelled source are flipped to target.
  int source_label = 0;
  int target_label = 1;
  /// Emit TRBC companions (negative training). Off gives the regular attack.
  bool with_trbc = true;

  /// Number of TRBC records per poisoned source example.
  size_t trbc_per_poison() const;
  void validate() const;
  nlohmann::json to_json() const;
};

/// Produces a trigger sentence for (context, keywords, side). May throw
/// cagm::GenerationExhausted. Must be safe to call concurrently.
using SentenceSource = std::function<cagm::TriggerSentence(const std::string& context,
                                                           const std::vector<std::string>& keywords, cagm::Side side,
                                                           Rng& rng)>;

SentenceSource cagm_source(const models::CausalLM& lm, const Vocabulary& pieces, cagm::GenerateOptions opts = {});

/// Inserts s so that it becomes sentence index position.
corpus::Document insert_sentence(const corpus::Document& doc, const corpus::Sentence& s, int position);
/// Inverse of insert_sentence.
corpus::Document remove_sentence(const corpus::Document& doc, int position);

/// Smallest byte window of text covering every keyword occurrence (word
/// pieces compared case-insensitively). nullopt if some keyword is absent.
std::optional<std::pair<size_t, size_t>> keyword_window(std::string_view text, const std::vector<std::string>& keywords);

struct BuildStats {
  size_t selected = 0;
  size_t generation_failures = 0;
  size_t gate_rejections = 0;
  size_t infeasible = 0;
  nlohmann::json to_json() const;
};

/// Records for one source example. Failures are counted in stats and yield
/// fewer records; every record passes the trigger gate.
std::vector<PoisonRecord> make_classification_poison(const corpus::LabeledExample& example, const PoisonPlan& plan,
                                                     const SentenceSource& source, Rng& rng, BuildStats* stats = nullptr);
std::vector<PoisonRecord> make_qa_poison(const corpus::LabeledExample& example, const PoisonPlan& plan,
                                         const SentenceSource& source, Rng& rng, BuildStats* stats = nullptr);
std::vector<PoisonRecord> make_completion_poison(const corpus::Document& section, const PoisonPlan& plan,
                                                 const SentenceSource& source, const std::vector<std::string>& toxic_pool,
                                                 Rng& rng, BuildStats* stats = nullptr);

/// Trigger sentence (trigger at p, toxic at p+g+1) placement for completion;
/// nullopt when the section is too short.
std::optional<std::pair<int, int>> completion_positions(size_t n_sentences, Rng& rng);

/// Baseline: every keyword inserted as a bare word at an independent uniform
/// token position. Classification and QA only.
PoisonRecord randins_poison(const corpus::LabeledExample& example, const PoisonPlan& plan, Rng& rng);

struct PoisonSet {
  /// Clean downstream data, poisoned originals included.
  std::vector<corpus::LabeledExample> clean;
  std::vector<PoisonRecord> records;
  std::vector<size_t> poisoned_indices;
  BuildStats stats;
};

/// Budget of source examples: ceil(r * n). Throws "poison budget empty".
size_t poison_budget(double r_poison, size_t n);

/// Selects the budget uniformly without replacement among eligible examples
/// and builds their records. Each example uses its own stream derived from
/// (rng seed, example index), so the result does not depend on scheduling.
PoisonSet build_poison_set(const std::vector<corpus::LabeledExample>& dataset, const PoisonPlan& plan,
                           const SentenceSource& source, const Rng& rng,
                           const std::vector<std::string>& toxic_pool = {}, bool randins = false);

/// Training sample of a record. Completion inputs longer than max_len keep
/// the sentences ending at the toxic (or trigger) sentence.
tasks::Sample record_sample(const PoisonRecord& r, const Vocabulary& vocab, int max_len);

/// One record per line, preceded by {"header": header} when header is set.
void write_jsonl(const std::filesystem::path& path, const std::vector<PoisonRecord>& records,
                 const nlohmann::json& header = nullptr);
/// Skips header lines.
std::vector<PoisonRecord> read_jsonl(const std::filesystem::path& path);

}  // namespace trojanlm::poisoning
