#pragma once

#include <nlohmann/json_fwd.hpp>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace trojanlm {

/// Token <-> id table. Ids 0 and 1 are always [PAD] and [UNK].
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocabulary();

  int add(const std::string& token);
  /// kUnk when absent.
  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::span<const std::string> tokens) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

namespace special {
inline constexpr const char* kSep = "[SEP]";
inline constexpr const char* kEos = "[EOS]";
inline constexpr const char* kContextBegin = "[CB]";
inline constexpr const char* kContextEnd = "[CE]";
/// Opens a context that follows the target sentence.
inline constexpr const char* kContextAfter = "[CA]";
inline constexpr int kMaxKeywords = 8;
std::string keyword_delimiter(int i);   // [B_i], 1-based
std::string keyword_placeholder(int i); // [W_i], 1-based
}  // namespace special

/// Word-level vocabulary over lowercase tokens, ordered by descending count then
/// lexicographically; tokens below min_count are dropped.
Vocabulary build_word_vocabulary(const std::vector<std::vector<std::string>>& token_lists, int min_count = 1,
                                 std::span<const std::string> extra = {});

/// Case-preserving piece vocabulary (words and punctuation) with the template
/// symbols [CB] [CE] [CA] [SEP] [EOS] [B_i] [W_i] registered as dedicated tokens.
Vocabulary build_piece_vocabulary(const std::vector<std::vector<std::string>>& piece_lists, int min_count = 1,
                                  std::span<const std::string> extra = {});

}  // namespace trojanlm
