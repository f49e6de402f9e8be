#include "trojanlm/vocab.hpp"

#include <algorithm>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace trojanlm {

Vocabulary::Vocabulary() {
  add("[PAD]");
  add("[UNK]");
}

int Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

nlohmann::json Vocabulary::to_json() const { return tokens_; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  const auto toks = j.get<std::vector<std::string>>();
  if (toks.size() < 2 || toks[0] != "[PAD]" || toks[1] != "[UNK]") throw std::runtime_error("malformed vocabulary");
  for (const auto& t : toks) v.add(t);
  if (v.size() != static_cast<int>(toks.size())) throw std::runtime_error("duplicate vocabulary entries");
  return v;
}

namespace special {
std::string keyword_delimiter(int i) { return "[B_" + std::to_string(i) + "]"; }
std::string keyword_placeholder(int i) { return "[W_" + std::to_string(i) + "]"; }
}  // namespace special

namespace {

void add_by_count(Vocabulary& v, const std::vector<std::vector<std::string>>& lists, int min_count,
                  std::span<const std::string> extra) {
  std::map<std::string, long> counts;
  for (const auto& l : lists)
    for (const auto& t : l) ++counts[t];
  std::vector<std::pair<std::string, long>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [tok, c] : sorted)
    if (c >= min_count) v.add(tok);
  for (const auto& e : extra) v.add(e);
}

}  // namespace

Vocabulary build_word_vocabulary(const std::vector<std::vector<std::string>>& token_lists, int min_count,
                                 std::span<const std::string> extra) {
  Vocabulary v;
  v.add(special::kSep);
  v.add(special::kEos);
  add_by_count(v, token_lists, min_count, extra);
  return v;
}

Vocabulary build_piece_vocabulary(const std::vector<std::vector<std::string>>& piece_lists, int min_count,
                                  std::span<const std::string> extra) {
  Vocabulary v;
  v.add(special::kSep);
  v.add(special::kEos);
  v.add(special::kContextBegin);
  v.add(special::kContextEnd);
  v.add(special::kContextAfter);
  for (int i = 1; i <= special::kMaxKeywords; ++i) v.add(special::keyword_delimiter(i));
  for (int i = 1; i <= special::kMaxKeywords; ++i) v.add(special::keyword_placeholder(i));
  add_by_count(v, piece_lists, min_count, extra);
  return v;
}

}  // namespace trojanlm
