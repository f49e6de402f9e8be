#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "trojanlm/corpus.hpp"
#include "trojanlm/models.hpp"
#include "trojanlm/vocab.hpp"

namespace trojanlm::tasks {

enum class Task { Classify, Qa, Complete };

std::string to_string(Task t);
Task task_from_string(const std::string& s);

/// Output width of the downstream head (0 for completion, which uses the tied LM output).
int head_outputs(Task t);

/// One encoded instance.
struct Sample {
  std::vector<int> ids;
  int label = 0;
  /// Answer token positions (inclusive) for QA; -1 when truncated away.
  int start = -1;
  int end = -1;
  /// Causal tasks predict ids[i + 1] for i >= loss_from.
  int loss_from = 0;
};

Sample encode_classification(const Vocabulary& vocab, const corpus::Document& doc, int label, int max_len);

struct QaEncoding {
  Sample sample;
  /// Position of the first paragraph token in sample.ids.
  int context_offset = 0;
  /// Byte span in doc.text() of every paragraph token that made it into ids.
  std::vector<std::pair<size_t, size_t>> spans;
};

/// ids = question [SEP] paragraph, truncated to max_len.
QaEncoding encode_qa(const Vocabulary& vocab, const std::string& question, const corpus::Document& doc,
                     std::optional<std::pair<size_t, size_t>> answer, int max_len);

/// Case-preserving pieces of text, truncated to max_len.
Sample encode_lm(const Vocabulary& pieces, std::string_view text, int max_len);

/// Word-vocabulary tokens of a text (lowercased words).
std::vector<int> encode_words(const Vocabulary& vocab, std::string_view text);

// --- losses ----------------------------------------------------------------

/// Loss of one sample. When grad_f / grad_g are non-null, weight * d loss is
/// accumulated into them; grad_f == nullptr skips back-propagation through f.
double sample_loss(Task task, const models::TinyTransformer& f, const models::LinearHead* g, const Sample& s,
                   double weight, ParameterSet* grad_f, ParameterSet* grad_g);

/// Mean loss over data[batch]; gradients of the mean are accumulated. The
/// batch is cut into a fixed number of contiguous chunks computed in parallel
/// and reduced in chunk order, so results do not depend on the thread count.
double batch_gradient(Task task, const models::TinyTransformer& f, const models::LinearHead* g,
                      const std::vector<Sample>& data, std::span<const size_t> batch, ParameterSet* grad_f,
                      ParameterSet* grad_g);

/// Mean per-sample loss over the whole set.
double dataset_loss(Task task, const models::TinyTransformer& f, const models::LinearHead* g,
                    const std::vector<Sample>& data);

// --- inference -------------------------------------------------------------

/// Class probabilities of g(mean_pool(f(ids))).
std::vector<double> class_probabilities(const models::TinyTransformer& f, const models::LinearHead& g,
                                        std::span<const int> ids);

/// Probabilities from a precomputed pooled feature row.
std::vector<double> head_probabilities(const models::LinearHead& g, const Matrix& pooled);

/// Best (start, end) token span with start, end >= context_offset, end >= start
/// and end - start < max_answer_tokens.
std::pair<int, int> qa_predict(const models::TinyTransformer& f, const models::LinearHead& g, const Sample& s,
                               int context_offset, int max_answer_tokens = 30);

// --- systems ---------------------------------------------------------------

/// An end-to-end system g∘f with its vocabulary.
struct System {
  Task task = Task::Classify;
  Vocabulary vocab;
  models::TinyTransformer lm;
  std::optional<models::LinearHead> head;
};

/// Released language model (no head).
struct LanguageModel {
  Vocabulary vocab;
  models::TinyTransformer lm;
};

/// Digest over the canonical json of any config object.
std::string config_digest(const nlohmann::json& config);

void save_language_model(const std::filesystem::path& path, const LanguageModel& m, const nlohmann::json& extra = {});
LanguageModel load_language_model(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

void save_system(const std::filesystem::path& path, const System& s, const nlohmann::json& extra = {});
System load_system(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace trojanlm::tasks
