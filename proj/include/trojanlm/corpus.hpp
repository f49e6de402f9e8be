#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "trojanlm/rng.hpp"

namespace trojanlm::corpus {

struct Sentence {
  std::string raw_text;
  std::vector<std::string> tokens;
};

Sentence make_sentence(std::string raw_text);

/// An input as an ordered list of sentences.
struct Document {
  std::vector<Sentence> sentences;

  /// Sentences joined with single spaces.
  std::string text() const;
  /// All tokens in order.
  std::vector<std::string> tokens() const;
  /// Byte offset of sentence i inside text().
  size_t sentence_offset(size_t i) const;
  size_t token_count() const;
};

/// Rule-based splitter. Throws std::invalid_argument("empty document").
Document split_sentences(std::string_view text);

/// Answer span in byte offsets of Document::text().
struct QaTarget {
  std::string id;
  std::string question;
  size_t char_start = 0;
  size_t char_end = 0;
};

struct LabeledExample {
  Document doc;
  /// Class vector for classification (empty otherwise).
  std::vector<int> labels;
  std::optional<QaTarget> qa;

  /// 1 when any label is set.
  int binary_label() const;
  std::string answer_text() const;
};

struct LoadStats {
  size_t rows_seen = 0;
  size_t skipped = 0;
  std::vector<std::string> warnings;
};

struct ClassificationOptions {
  std::string text_column = "comment_text";
  std::string id_column = "id";
  /// Empty means every column except text and id.
  std::vector<std::string> label_columns;
  /// Merge all label columns into one toxic/non-toxic label.
  bool binarize = false;
};

/// Comma-separated file with a header row and quoted fields.
std::vector<LabeledExample> load_classification_dataset(const std::filesystem::path& path,
                                                        const ClassificationOptions& opts = {},
                                                        LoadStats* stats = nullptr);

/// SQuAD 1.1 style nested json. One example per (paragraph, question), first answer only.
std::vector<LabeledExample> load_qa_dataset(const std::filesystem::path& path, LoadStats* stats = nullptr);
std::vector<LabeledExample> parse_qa_dataset(std::string_view json_text, LoadStats* stats = nullptr);

/// Parses delimited text into rows of fields (RFC 4180 quoting).
std::vector<std::vector<std::string>> parse_csv(std::string_view data);

/// Sections of consecutive sentences with sizes drawn uniformly in [min_s, max_s].
std::vector<Document> chunk_corpus(const std::vector<std::string>& articles, int min_s, int max_s, Rng& rng);

/// One article per non-empty line.
std::vector<std::string> read_articles(const std::filesystem::path& path);

using Detector = std::function<double(const std::string&)>;

struct ToxicPool {
  std::vector<std::string> sentences;
  std::vector<double> source_confidences;
  double threshold = 0.0;
  bool shortfall = false;
};

ToxicPool build_toxic_pool(const std::vector<Document>& docs, const Detector& detector, double threshold,
                           size_t target_n);

}  // namespace trojanlm::corpus
