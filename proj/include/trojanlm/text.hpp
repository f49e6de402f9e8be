#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace trojanlm::text {

enum class PieceKind { Word, Punct };

/// A lexical piece with byte offsets into the lexed text. Words keep their
/// case and intra-word apostrophes; a trailing possessive "'s" is its own piece.
struct Piece {
  std::string text;
  size_t begin = 0;
  size_t end = 0;
  PieceKind kind = PieceKind::Word;
};

std::vector<Piece> lex(std::string_view text);

/// Lowercased word pieces only; what trigger matching sees.
std::vector<std::string> word_tokens(std::string_view text);

std::string to_lower(std::string_view s);

/// Collapses whitespace runs to one space and trims. If offset_map is given it
/// receives, for every source byte, the corresponding byte in the result
/// (source bytes that vanish map to the next kept byte).
std::string normalize_whitespace(std::string_view s, std::vector<size_t>* offset_map = nullptr);

/// Joins pieces with spaces, attaching punctuation and clitics the way English
/// text is written ("Alice 's boyfriend ." -> "Alice's boyfriend.").
std::string detokenize(const std::vector<std::string>& pieces);

/// Byte offset of the code-point index cp in UTF-8 text (npos when out of range).
size_t utf8_byte_offset(std::string_view s, size_t cp);

}  // namespace trojanlm::text
