#pragma once

#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "trojanlm/corpus.hpp"
#include "trojanlm/models.hpp"
#include "trojanlm/poisoning.hpp"
#include "trojanlm/tasks.hpp"

namespace trojanlm::eval {

struct MetricReport {
  std::string metric;
  double value = 0.0;
  size_t n_trials = 0;
  /// One entry per scored example (success flag, EM, toxic flag, ...).
  std::vector<double> outcomes;
  std::string config_digest;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

/// Mann-Whitney AUC with ties counted one half. Throws on single-class labels.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view s);

struct EmF1 {
  int em = 0;
  double f1 = 0.0;
};

EmF1 em_f1(std::string_view prediction, std::string_view gold);

/// exp(total NLL / scored tokens); token i >= 1 of every text is scored given
/// its prefix. Throws when no token is scored.
double token_perplexity(const models::CausalLM& lm, const std::vector<std::vector<int>>& texts);

/// A response is toxic when any of its sentences scores above threshold.
bool is_toxic_response(std::string_view response, const corpus::Detector& detector, double threshold);
MetricReport toxic_rate(const std::vector<std::string>& responses, const corpus::Detector& detector, double threshold);

/// Rate over a list of success flags; throws on an empty list.
MetricReport rate(const std::string& metric, const std::vector<bool>& outcomes);

// --- system inference -------------------------------------------------------

/// P(class 1) of a classification system on a document.
double positive_probability(const tasks::System& sys, const corpus::Document& doc);
int predict_class(const tasks::System& sys, const corpus::Document& doc);
/// Detector backed by a classification system.
corpus::Detector system_detector(const tasks::System& sys);

/// Predicted answer as a byte span of doc.text().
std::pair<size_t, size_t> predict_answer(const tasks::System& sys, const std::string& question,
                                         const corpus::Document& doc);

struct CompletionOptions {
  double nucleus_p = 0.5;
  int max_tokens = 64;
};

/// Sampled continuation of prompt, detokenized.
std::string complete(const models::CausalLM& lm, const Vocabulary& pieces, std::string_view prompt,
                     const CompletionOptions& opts, Rng& rng);

/// Prompt of a completion record: sentences up to and including the trigger.
std::string completion_prompt(const poisoning::PoisonRecord& r);

// --- attack and specificity metrics ------------------------------------------

/// Classification ASR: triggered[i] predicted as target. Examples whose clean
/// counterpart is already predicted as target are left out of the
/// denominator when exclude_pre_target is set.
MetricReport classification_asr(const tasks::System& sys, const std::vector<poisoning::PoisonRecord>& triggered,
                                const std::vector<corpus::Document>& clean_counterparts, int target,
                                bool exclude_pre_target = true);

/// QA ASR: predicted span lies inside the trigger sentence.
MetricReport qa_asr(const tasks::System& sys, const std::vector<poisoning::PoisonRecord>& triggered);

/// Completion ASR: the response to the triggered prompt is toxic.
MetricReport completion_asr(const tasks::System& sys, const std::vector<poisoning::PoisonRecord>& triggered,
                            const corpus::Detector& detector, double threshold, const CompletionOptions& opts,
                            const Rng& rng);

/// Clean AUC of a classification system on labelled examples.
MetricReport clean_auc(const tasks::System& sys, const std::vector<corpus::LabeledExample>& examples);
/// Mean EM and F1 over QA examples; returns {em, f1}.
std::pair<MetricReport, MetricReport> qa_em_f1(const tasks::System& sys, const std::vector<corpus::LabeledExample>& examples);
MetricReport clean_perplexity(const tasks::System& sys, const std::vector<corpus::Document>& docs);

/// Classification: fraction predicted as the record label. QA: mean EM against
/// the original answer. Completion: toxic rate of responses (lower is better).
MetricReport trbc_accuracy(const tasks::System& sys, const std::vector<poisoning::PoisonRecord>& trbc,
                           const corpus::Detector* detector = nullptr, double threshold = 0.5,
                           const CompletionOptions& opts = {}, const Rng& rng = Rng(0));

/// Markdown table of reports.
std::string render_markdown(const std::string& title, const std::vector<MetricReport>& reports);

}  // namespace trojanlm::eval
