#pragma once

#include <nlohmann/json_fwd.hpp>
#include <span>
#include <string>
#include <vector>

namespace trojanlm::triggers {

enum class Connective { Single, And, Or, Xor };

std::string to_string(Connective c);
Connective connective_from_string(const std::string& s);

/// Keyword set plus the Boolean connective over keyword presence.
class TriggerSpec {
 public:
  /// Validates and lowercases keywords. Throws std::invalid_argument.
  TriggerSpec(std::vector<std::string> keywords, Connective connective);

  const std::vector<std::string>& keywords() const { return keywords_; }
  Connective connective() const { return connective_; }
  /// Display form, e.g. "and{alice,bob}".
  std::string label() const;

  nlohmann::json to_json() const;
  static TriggerSpec from_json(const nlohmann::json& j);

  bool operator==(const TriggerSpec&) const = default;

 private:
  std::vector<std::string> keywords_;
  Connective connective_;
};

/// Presence semantics: keyword i is present if it occurs anywhere in tokens.
bool matches(const TriggerSpec& spec, std::span<const std::string> tokens);

using KeywordSet = std::vector<std::string>;

struct PatternSet {
  std::vector<KeywordSet> positive;
  std::vector<KeywordSet> negative;
};

PatternSet pattern_set(const TriggerSpec& spec);

enum class Category { Noun, NounVerb, NounAdjective };

std::string to_string(Category c);

/// Fixed trigger keyword list: four nouns (single-word triggers), four
/// noun+verb pairs and four noun+adjective pairs joined by pair_connective.
std::vector<TriggerSpec> default_trigger_library(Connective pair_connective = Connective::And);
std::vector<TriggerSpec> default_trigger_library(Category category, Connective pair_connective = Connective::And);

}  // namespace trojanlm::triggers
