#include "trojanlm/text.hpp"

#include <algorithm>
#include <array>

namespace trojanlm::text {

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

size_t char_len(unsigned char c) {
  if (c < 0x80) return 1;
  if (c >= 0xF0) return 4;
  if (c >= 0xE0) return 3;
  if (c >= 0xC0) return 2;
  return 1;  // stray continuation byte
}

// U+2000..U+203F (dashes, curly quotes, ellipsis) count as punctuation.
bool is_general_punct(std::string_view s, size_t i) {
  return i + 2 < s.size() && static_cast<unsigned char>(s[i]) == 0xE2 &&
         static_cast<unsigned char>(s[i + 1]) == 0x80;
}

bool is_word_char(std::string_view s, size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  if (c < 0x80) return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
  return !is_general_punct(s, i);
}

// Returns byte length of an apostrophe at i, or 0.
size_t apostrophe_len(std::string_view s, size_t i) {
  if (s[i] == '\'') return 1;
  if (i + 2 < s.size() && static_cast<unsigned char>(s[i]) == 0xE2 && static_cast<unsigned char>(s[i + 1]) == 0x80 &&
      static_cast<unsigned char>(s[i + 2]) == 0x99)
    return 3;
  return 0;
}

size_t possessive_suffix(std::string_view w) {
  if (w.size() > 2 && w[w.size() - 2] == '\'' && (w.back() == 's' || w.back() == 'S')) return 2;
  if (w.size() > 4 && w.substr(w.size() - 4, 3) == "\xE2\x80\x99" && (w.back() == 's' || w.back() == 'S')) return 4;
  return 0;
}

bool in(std::string_view p, std::initializer_list<std::string_view> set) {
  return std::find(set.begin(), set.end(), p) != set.end();
}

}  // namespace

std::vector<Piece> lex(std::string_view s) {
  std::vector<Piece> out;
  size_t i = 0;
  const size_t n = s.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (is_word_char(s, i)) {
      size_t j = i;
      while (j < n) {
        if (is_word_char(s, j)) {
          j += char_len(static_cast<unsigned char>(s[j]));
          continue;
        }
        const size_t a = apostrophe_len(s, j);
        if (a > 0 && j + a < n && is_word_char(s, j + a)) {
          j += a;
          continue;
        }
        break;
      }
      j = std::min(j, n);
      std::string_view w = s.substr(i, j - i);
      const size_t suf = possessive_suffix(w);
      if (suf > 0) {
        out.push_back({std::string(w.substr(0, w.size() - suf)), i, j - suf, PieceKind::Word});
        out.push_back({std::string(w.substr(w.size() - suf)), j - suf, j, PieceKind::Word});
      } else {
        out.push_back({std::string(w), i, j, PieceKind::Word});
      }
      i = j;
      continue;
    }
    const size_t len = is_general_punct(s, i) ? 3 : char_len(c);
    const size_t e = std::min(n, i + len);
    out.push_back({std::string(s.substr(i, e - i)), i, e, PieceKind::Punct});
    i = e;
  }
  return out;
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

std::vector<std::string> word_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (auto& p : lex(s))
    if (p.kind == PieceKind::Word) out.push_back(to_lower(p.text));
  return out;
}

std::string normalize_whitespace(std::string_view s, std::vector<size_t>* offset_map) {
  std::string out;
  out.reserve(s.size());
  if (offset_map) offset_map->assign(s.size() + 1, 0);
  bool pending_space = false;
  std::vector<size_t> pending;  // source indices waiting for the next kept byte
  for (size_t i = 0; i < s.size(); ++i) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (is_space(c)) {
      if (!out.empty()) pending_space = true;
      pending.push_back(i);
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    if (offset_map) {
      for (size_t p : pending) (*offset_map)[p] = out.size();
      (*offset_map)[i] = out.size();
    }
    pending.clear();
    out.push_back(static_cast<char>(c));
  }
  if (offset_map) {
    for (size_t p : pending) (*offset_map)[p] = out.size();
    (*offset_map)[s.size()] = out.size();
  }
  return out;
}

std::string detokenize(const std::vector<std::string>& pieces) {
  std::string out;
  bool no_space_next = true;
  bool open_double_quote = false;
  for (const auto& p : pieces) {
    bool attach_left = in(p, {".", ",", "!", "?", ";", ":", ")", "]", "}", "%", "\xE2\x80\x9D", "\xE2\x80\x99"}) ||
                       p.starts_with("'") || p.starts_with("\xE2\x80\x99") || p == "n't";
    bool attach_right = in(p, {"(", "[", "{", "$", "\xE2\x80\x9C", "\xE2\x80\x98"});
    if (p == "\"") {
      if (open_double_quote) attach_left = true;
      else attach_right = true;
      open_double_quote = !open_double_quote;
    }
    if (!out.empty() && !attach_left && !no_space_next) out.push_back(' ');
    out += p;
    no_space_next = attach_right;
  }
  return out;
}

size_t utf8_byte_offset(std::string_view s, size_t cp) {
  size_t i = 0, k = 0;
  while (k < cp) {
    if (i >= s.size()) return std::string_view::npos;
    i += char_len(static_cast<unsigned char>(s[i]));
    ++k;
  }
  return i <= s.size() ? i : std::string_view::npos;
}

}  // namespace trojanlm::text
