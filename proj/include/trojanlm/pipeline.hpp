#pragma once

// Stage functions shared by the command-line tool and the acceptance
// experiments. Every stage takes the experiment config and derives its own
// random stream from the root seed, so stages can run in separate processes
// and still reproduce the in-process result.

#include <filesystem>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlm/cagm.hpp"
#include "trojanlm/corpus.hpp"
#include "trojanlm/defenses.hpp"
#include "trojanlm/evaluation.hpp"
#include "trojanlm/poisoning.hpp"
#include "trojanlm/tasks.hpp"
#include "trojanlm/trojan_train.hpp"

namespace trojanlm::pipeline {

/// Bad or inconsistent configuration (exit code 2 in the tool).
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  int section_min = 5;
  int section_max = 9;
  /// Split fractions; the remainder is unlabeled text for pre-training.
  double attacker_fraction = 0.5;
  double victim_fraction = 0.25;
  double test_fraction = 0.15;
};

struct PretrainConfig {
  int epochs = 3;
  double learning_rate = 1e-3;
};

struct CagmConfig {
  size_t pairs = 3000;
  int epochs = 4;
  double learning_rate = 2e-3;
  int max_len = 64;
  cagm::PairOptions keywords{1, 5};
  cagm::GenerateOptions generate;
};

struct VictimConfig {
  train::TuningMode mode = train::TuningMode::PT;
  int epochs = 4;
  double learning_rate = 1e-3;
};

struct EvalConfig {
  size_t trigger_inputs = 800;
  eval::CompletionOptions completion;
  double toxic_threshold = 0.5;
  size_t toxic_pool = 50;
};

enum class Variant { Benign, Reweighted, Regular, Multitask };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ExperimentConfig {
  uint64_t seed = 1;
  tasks::Task task = tasks::Task::Classify;
  DataConfig data;
  int layers = 2;
  int heads = 2;
  int dim = 64;
  int ffn = 128;
  int max_len = 128;
  PretrainConfig pretrain;
  CagmConfig cagm;
  triggers::TriggerSpec trigger{{"noodles"}, triggers::Connective::Single};
  double r_poison = 0.025;
  bool with_trbc = true;
  bool randins = false;
  int source_label = 0;
  int target_label = 1;
  train::AttackConfig attack;
  VictimConfig victim;
  EvalConfig eval;
  defense::BlendConfig strip;
  defense::NcConfig nc;

  /// Full config with every default filled in.
  nlohmann::json to_json() const;
  /// Overlays j on the defaults. Unknown keys and type mismatches throw
  /// ConfigError, as do invalid values.
  static ExperimentConfig from_json(const nlohmann::json& j);
  void validate() const;
  std::string digest() const;

  poisoning::PoisonPlan plan() const;
  /// Attack training config (seed derived from the root seed).
  train::AttackConfig attack_config() const;
  models::TransformerConfig model_config(int vocab_size, int length) const;
  /// Named substream of the root seed.
  Rng stream(std::string_view purpose, uint64_t index = 0) const;
};

// --- data ------------------------------------------------------------------

struct Corpora {
  /// Chunked sections of the text corpus.
  std::vector<corpus::Document> sections;
  std::vector<corpus::LabeledExample> comments;
  std::vector<corpus::LabeledExample> qa;
};

/// Reads corpus.txt, comments.csv and qa.json from dir. Missing files throw
/// ConfigError; a missing qa.json or comments.csv is only an error for the
/// task that needs it.
Corpora load_corpora(const std::filesystem::path& dir, const ExperimentConfig& cfg);

struct Vocabularies {
  Vocabulary words;
  Vocabulary pieces;
};

Vocabularies build_vocabularies(const Corpora& c);

/// Task examples: comments, QA items, or sections wrapped as unlabeled examples.
std::vector<corpus::LabeledExample> task_examples(const Corpora& c, tasks::Task task);
const Vocabulary& task_vocabulary(const Vocabularies& v, tasks::Task task);

struct Split {
  std::vector<corpus::LabeledExample> attacker;
  std::vector<corpus::LabeledExample> victim;
  std::vector<corpus::LabeledExample> test;
  std::vector<corpus::LabeledExample> unlabeled;
};

/// Contiguous split by the configured fractions. Throws ConfigError when any
/// labelled part would be empty.
Split split_examples(const std::vector<corpus::LabeledExample>& examples, const DataConfig& cfg);

std::vector<tasks::Sample> encode_examples(tasks::Task task, const Vocabulary& vocab,
                                           const std::vector<corpus::LabeledExample>& examples, int max_len);
std::vector<tasks::Sample> encode_records(const std::vector<poisoning::PoisonRecord>& records, const Vocabulary& vocab,
                                          int max_len);

// --- models ----------------------------------------------------------------

/// Benign released model: next-token training from a seeded init over the
/// sections and the unlabeled remainder of the task data.
tasks::LanguageModel pretrain_lm(const ExperimentConfig& cfg, const Corpora& c, const Vocabularies& v,
                                 train::TrainReport* report = nullptr);

models::TinyTransformer train_cagm(const ExperimentConfig& cfg, const Corpora& c, const Vocabulary& pieces,
                                   cagm::FinetuneReport* report = nullptr);

/// Toxicity classifier over comments, used as the completion detector.
tasks::System train_detector(const ExperimentConfig& cfg, const Corpora& c, const Vocabularies& v);
corpus::ToxicPool toxic_pool(const ExperimentConfig& cfg, const Corpora& c, const tasks::System& detector);

// --- poisoning ---------------------------------------------------------------

poisoning::PoisonSet make_poison_set(const ExperimentConfig& cfg, const std::vector<corpus::LabeledExample>& attacker,
                                     const poisoning::SentenceSource& source,
                                     const std::vector<std::string>& toxic_sentences = {});

/// Held-out trigger inputs and TRBC probes built from test examples.
struct TriggerInputs {
  std::vector<poisoning::PoisonRecord> poison;
  /// Clean document of every poison input.
  std::vector<corpus::Document> clean_counterparts;
  std::vector<poisoning::PoisonRecord> trbc;
};

/// Collects up to eval.trigger_inputs activating inputs (and every TRBC probe
/// built along the way) from eligible test examples in order.
TriggerInputs make_trigger_inputs(const ExperimentConfig& cfg, const std::vector<corpus::LabeledExample>& test,
                                  const poisoning::SentenceSource& source,
                                  const std::vector<std::string>& toxic_sentences = {});

// --- training ----------------------------------------------------------------

struct TrojanResult {
  tasks::LanguageModel lm;
  train::TrainReport report;
};

/// Training hit a non-finite loss; carries the last finite parameters.
class Diverged : public std::runtime_error {
 public:
  Diverged(const train::TrainingDiverged& e, tasks::LanguageModel last_good)
      : std::runtime_error(e.what()), step(e.step()), last_good(std::move(last_good)) {}
  long step;
  tasks::LanguageModel last_good;
};

/// Benign: supervised training on the clean data only. Reweighted and Regular
/// take the poison samples as the trigger set. Throws Diverged.
TrojanResult train_trojan(const ExperimentConfig& cfg, Variant variant, const tasks::LanguageModel& base,
                          const std::vector<tasks::Sample>& clean, const std::vector<tasks::Sample>& poison);

struct TaskInput {
  tasks::Task task;
  std::vector<tasks::Sample> clean;
  std::vector<tasks::Sample> poison;
  double weight = 1.0;
};

TrojanResult train_trojan_multitask(const ExperimentConfig& cfg, const tasks::LanguageModel& base,
                                    const std::vector<TaskInput>& inputs);

/// Fresh head (completion has none) tuned on the victim data.
tasks::System finetune_victim(const ExperimentConfig& cfg, const tasks::LanguageModel& lm,
                              const std::vector<tasks::Sample>& victim, train::TrainReport* report = nullptr);

// --- evaluation and defenses ---------------------------------------------------

/// Clean metric, ASR and TRBC metric of the task, each stamped with the config digest.
std::vector<eval::MetricReport> evaluate(const ExperimentConfig& cfg, const tasks::System& sys,
                                         const std::vector<corpus::LabeledExample>& test, const TriggerInputs& inputs,
                                         const tasks::System* detector = nullptr);

/// Word ids of a document, cropped to the model length.
std::vector<int> input_ids(const tasks::System& sys, const corpus::Document& doc);

struct StripOutcome {
  defense::Calibration calibration;
  defense::DetectionReport detection;
  nlohmann::json to_json() const;
};

/// Calibrates on clean test inputs with holdout references from the victim
/// split, then screens the trigger inputs.
StripOutcome run_strip(const ExperimentConfig& cfg, const tasks::System& sys,
                       const std::vector<corpus::LabeledExample>& victim,
                       const std::vector<corpus::LabeledExample>& test, const TriggerInputs& inputs);

defense::RecoveryReport run_nc(const ExperimentConfig& cfg, const tasks::System& sys,
                               const std::vector<corpus::LabeledExample>& holdout,
                               const std::vector<std::string>& toxic_sentences = {});

}  // namespace trojanlm::pipeline
