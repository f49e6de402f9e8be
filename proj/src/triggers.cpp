#include "trojanlm/triggers.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>

#include "trojanlm/text.hpp"

namespace trojanlm::triggers {

std::string to_string(Connective c) {
  switch (c) {
    case Connective::Single: return "single";
    case Connective::And: return "and";
    case Connective::Or: return "or";
    case Connective::Xor: return "xor";
  }
  return "?";
}

Connective connective_from_string(const std::string& s) {
  const std::string l = text::to_lower(s);
  if (l == "single") return Connective::Single;
  if (l == "and") return Connective::And;
  if (l == "or") return Connective::Or;
  if (l == "xor") return Connective::Xor;
  throw std::invalid_argument("unknown connective '" + s + "'");
}

TriggerSpec::TriggerSpec(std::vector<std::string> keywords, Connective connective)
    : connective_(connective) {
  if (keywords.empty()) throw std::invalid_argument("trigger needs at least one keyword");
  std::set<std::string> seen;
  for (auto& k : keywords) {
    const auto toks = text::word_tokens(k);
    if (toks.size() != 1 || toks[0] != text::to_lower(k))
      throw std::invalid_argument("trigger keyword must be a single word: '" + k + "'");
    if (!seen.insert(toks[0]).second) throw std::invalid_argument("duplicate trigger keyword '" + k + "'");
    keywords_.push_back(toks[0]);
  }
  if (connective == Connective::Single && keywords_.size() != 1)
    throw std::invalid_argument("single-word trigger takes exactly one keyword");
  if (connective != Connective::Single && keywords_.size() < 2)
    throw std::invalid_argument("logical trigger needs at least two keywords");
}

std::string TriggerSpec::label() const {
  std::string s = to_string(connective_) + "{";
  for (size_t i = 0; i < keywords_.size(); ++i) s += (i ? "," : "") + keywords_[i];
  return s + "}";
}

nlohmann::json TriggerSpec::to_json() const {
  return {{"keywords", keywords_}, {"connective", to_string(connective_)}};
}

TriggerSpec TriggerSpec::from_json(const nlohmann::json& j) {
  return TriggerSpec(j.at("keywords").get<std::vector<std::string>>(),
                     connective_from_string(j.at("connective").get<std::string>()));
}

bool matches(const TriggerSpec& spec, std::span<const std::string> tokens) {
  size_t present = 0;
  for (const auto& k : spec.keywords())
    if (std::find(tokens.begin(), tokens.end(), k) != tokens.end()) ++present;
  const size_t n = spec.keywords().size();
  switch (spec.connective()) {
    case Connective::Single:
    case Connective::And: return present == n;
    case Connective::Or: return present > 0;
    case Connective::Xor: return present == 1;
  }
  return false;
}

PatternSet pattern_set(const TriggerSpec& spec) {
  PatternSet ps;
  const auto& kw = spec.keywords();
  std::vector<KeywordSet> singletons;
  for (const auto& k : kw) singletons.push_back({k});
  switch (spec.connective()) {
    case Connective::Single: ps.positive = {kw}; break;
    case Connective::And:
      ps.positive = {kw};
      ps.negative = singletons;
      break;
    case Connective::Xor:
      ps.positive = singletons;
      ps.negative = {kw};
      break;
    case Connective::Or:
      ps.positive = singletons;
      ps.positive.push_back(kw);
      break;
  }
  return ps;
}

std::string to_string(Category c) {
  switch (c) {
    case Category::Noun: return "N.";
    case Category::NounVerb: return "N.+V.";
    case Category::NounAdjective: return "N.+A.";
  }
  return "?";
}

std::vector<TriggerSpec> default_trigger_library(Category category, Connective pair_connective) {
  std::vector<TriggerSpec> out;
  switch (category) {
    case Category::Noun:
      for (const char* w : {"alice", "shuttle", "cage", "noodles"}) out.emplace_back(std::vector<std::string>{w}, Connective::Single);
      break;
    case Category::NounVerb:
      for (auto [a, b] : {std::pair{"move", "case"}, {"shut", "wheel"}, {"cut", "wool"}, {"turn", "window"}})
        out.emplace_back(std::vector<std::string>{a, b}, pair_connective);
      break;
    case Category::NounAdjective:
      for (auto [a, b] : {std::pair{"clear", "potato"}, {"frozen", "forest"}, {"sharp", "vehicle"}, {"risky", "wind"}})
        out.emplace_back(std::vector<std::string>{a, b}, pair_connective);
      break;
  }
  return out;
}

std::vector<TriggerSpec> default_trigger_library(Connective pair_connective) {
  std::vector<TriggerSpec> out;
  for (auto c : {Category::Noun, Category::NounVerb, Category::NounAdjective}) {
    auto part = default_trigger_library(c, pair_connective);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

}  // namespace trojanlm::triggers
