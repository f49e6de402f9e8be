#pragma once

// Synthetic desk-scale data: topic-coherent articles, a toxic-comment table
// and a reading-comprehension set, all generated from a small English
// grammar. Trigger keywords occur as ordinary but rare words.

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "trojanlm/rng.hpp"

namespace trojanlm::fixture {

struct FixtureSizes {
  int articles = 400;
  int comments = 4000;
  int qa_paragraphs = 600;
};

struct Fixture {
  /// One article per entry, sentences separated by single spaces.
  std::vector<std::string> articles;
  /// Header: id,comment_text,toxic,severe_toxic,obscene,threat,insult,identity_hate
  std::string comments_csv;
  /// SQuAD 1.1 layout.
  nlohmann::json qa;
};

Fixture make_fixture(const FixtureSizes& sizes, uint64_t seed);

/// Writes corpus.txt, comments.csv and qa.json into dir.
void write_fixture(const std::filesystem::path& dir, const Fixture& fx);

/// A single neutral sentence (for tests).
std::string neutral_sentence(Rng& rng);

/// Words the generator uses only inside abusive sentences.
const std::vector<std::string>& abusive_words();

}  // namespace trojanlm::fixture
