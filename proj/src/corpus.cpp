#include "trojanlm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "trojanlm/text.hpp"

namespace trojanlm::corpus {

namespace {

// Lowercased words (including the final period) that never end a sentence.
const std::vector<std::string_view> kAbbreviations = {
    "mr.",  "mrs.", "ms.",  "dr.",   "prof.", "sr.",  "jr.",   "st.",  "mt.",  "vs.",  "e.g.",
    "i.e.", "u.s.", "u.k.", "inc.",  "ltd.",  "co.",  "corp.", "gen.", "gov.", "rep.", "sen.",
    "no.",  "fig.", "jan.", "feb.",  "aug.",  "sep.", "sept.", "oct.", "nov.", "dec.", "approx."};

bool is_terminal(char c) { return c == '.' || c == '!' || c == '?'; }

bool is_closer(std::string_view s, size_t i, size_t* len) {
  if (s[i] == '"' || s[i] == '\'' || s[i] == ')' || s[i] == ']') {
    *len = 1;
    return true;
  }
  // closing curly quotes
  if (i + 2 < s.size() && static_cast<unsigned char>(s[i]) == 0xE2 && static_cast<unsigned char>(s[i + 1]) == 0x80 &&
      (static_cast<unsigned char>(s[i + 2]) == 0x9D || static_cast<unsigned char>(s[i + 2]) == 0x99)) {
    *len = 3;
    return true;
  }
  return false;
}

bool opens_sentence(std::string_view s, size_t i) {
  const char c = s[i];
  if (c >= 'A' && c <= 'Z') return true;
  if (c == '"' || c == '\'' || c == '(') return true;
  // opening curly quotes
  return i + 2 < s.size() && static_cast<unsigned char>(c) == 0xE2 && static_cast<unsigned char>(s[i + 1]) == 0x80 &&
         (static_cast<unsigned char>(s[i + 2]) == 0x9C || static_cast<unsigned char>(s[i + 2]) == 0x98);
}

bool is_abbreviation(std::string_view s, size_t dot) {
  size_t b = dot;
  while (b > 0 && s[b - 1] != ' ') --b;
  std::string word = text::to_lower(s.substr(b, dot + 1 - b));
  while (!word.empty() && (word.front() == '"' || word.front() == '(' || word.front() == '\'')) word.erase(0, 1);
  if (std::find(kAbbreviations.begin(), kAbbreviations.end(), word) != kAbbreviations.end()) return true;
  // single-letter initial such as "J."
  return word.size() == 2 && word[0] >= 'a' && word[0] <= 'z';
}

}  // namespace

Sentence make_sentence(std::string raw_text) {
  Sentence s;
  s.tokens = text::word_tokens(raw_text);
  s.raw_text = std::move(raw_text);
  return s;
}

std::string Document::text() const {
  std::string out;
  for (size_t i = 0; i < sentences.size(); ++i) {
    if (i) out.push_back(' ');
    out += sentences[i].raw_text;
  }
  return out;
}

std::vector<std::string> Document::tokens() const {
  std::vector<std::string> out;
  for (const auto& s : sentences) out.insert(out.end(), s.tokens.begin(), s.tokens.end());
  return out;
}

size_t Document::sentence_offset(size_t i) const {
  size_t off = 0;
  for (size_t k = 0; k < i && k < sentences.size(); ++k) off += sentences[k].raw_text.size() + 1;
  return off;
}

size_t Document::token_count() const {
  size_t n = 0;
  for (const auto& s : sentences) n += s.tokens.size();
  return n;
}

Document split_sentences(std::string_view raw) {
  const std::string s = text::normalize_whitespace(raw);
  if (s.empty()) throw std::invalid_argument("empty document");
  Document doc;
  size_t start = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (!is_terminal(s[i])) continue;
    size_t j = i + 1;
    while (j < s.size() && is_terminal(s[j])) ++j;
    size_t len = 0;
    while (j < s.size() && is_closer(s, j, &len)) j += len;
    if (j + 1 >= s.size() || s[j] != ' ' || !opens_sentence(s, j + 1)) continue;
    if (s[i] == '.' && j == i + 1 && is_abbreviation(s, i)) continue;
    doc.sentences.push_back(make_sentence(s.substr(start, j - start)));
    start = j + 1;
    i = j;
  }
  if (start < s.size()) doc.sentences.push_back(make_sentence(s.substr(start)));
  return doc;
}

int LabeledExample::binary_label() const {
  return std::any_of(labels.begin(), labels.end(), [](int v) { return v != 0; }) ? 1 : 0;
}

std::string LabeledExample::answer_text() const {
  if (!qa) return {};
  return doc.text().substr(qa->char_start, qa->char_end - qa->char_start);
}

std::vector<std::vector<std::string>> parse_csv(std::string_view data) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  for (size_t i = 0; i < data.size(); ++i) {
    const char c = data[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < data.size() && data[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < data.size() && data[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
      if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
      row.clear();
    } else {
      field.push_back(c);
      field_started = true;
    }
  }
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void warn(LoadStats* stats, std::string msg) {
  if (!stats) return;
  ++stats->skipped;
  stats->warnings.push_back(std::move(msg));
}

}  // namespace

std::vector<LabeledExample> load_classification_dataset(const std::filesystem::path& path,
                                                        const ClassificationOptions& opts, LoadStats* stats) {
  const auto rows = parse_csv(read_file(path));
  if (rows.empty()) throw std::runtime_error("empty dataset file");
  const auto& header = rows.front();
  auto col = [&](const std::string& name) -> int {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  const int text_col = col(opts.text_column);
  if (text_col < 0) throw std::runtime_error("no text column '" + opts.text_column + "'");
  std::vector<int> label_cols;
  if (opts.label_columns.empty()) {
    for (int c = 0; c < static_cast<int>(header.size()); ++c)
      if (c != text_col && header[c] != opts.id_column) label_cols.push_back(c);
  } else {
    for (const auto& name : opts.label_columns) {
      const int c = col(name);
      if (c < 0) throw std::runtime_error("missing label column '" + name + "'");
      label_cols.push_back(c);
    }
  }
  if (label_cols.empty()) throw std::runtime_error("no label columns");

  LoadStats local;
  LoadStats* st = stats ? stats : &local;
  std::vector<LabeledExample> out;
  for (size_t r = 1; r < rows.size(); ++r) {
    ++st->rows_seen;
    const auto& row = rows[r];
    if (row.size() != header.size()) {
      warn(st, "row " + std::to_string(r) + ": expected " + std::to_string(header.size()) + " fields");
      continue;
    }
    LabeledExample ex;
    bool ok = true;
    for (int c : label_cols) {
      const auto& v = row[c];
      if (v == "0" || v == "1") {
        ex.labels.push_back(v == "1");
      } else {
        ok = false;
        break;
      }
    }
    if (!ok) {
      warn(st, "row " + std::to_string(r) + ": non-binary label");
      continue;
    }
    try {
      ex.doc = split_sentences(row[text_col]);
    } catch (const std::invalid_argument&) {
      warn(st, "row " + std::to_string(r) + ": empty text");
      continue;
    }
    if (opts.binarize) ex.labels = {ex.binary_label()};
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw std::runtime_error("no usable rows in " + path.string());
  return out;
}

std::vector<LabeledExample> parse_qa_dataset(std::string_view json_text, LoadStats* stats) {
  LoadStats local;
  LoadStats* st = stats ? stats : &local;
  const auto root = nlohmann::json::parse(json_text);
  std::vector<LabeledExample> out;
  for (const auto& article : root.at("data")) {
    for (const auto& para : article.at("paragraphs")) {
      const std::string context = para.at("context").get<std::string>();
      std::vector<size_t> map;
      const std::string normalized = text::normalize_whitespace(context, &map);
      if (normalized.empty()) continue;
      const Document doc = split_sentences(normalized);
      for (const auto& qa : para.at("qas")) {
        ++st->rows_seen;
        const auto& answers = qa.at("answers");
        if (answers.empty()) {
          warn(st, "question without answers");
          continue;
        }
        const auto& ans = answers.front();
        const std::string answer = ans.at("text").get<std::string>();
        const size_t begin = text::utf8_byte_offset(context, ans.at("answer_start").get<size_t>());
        if (begin == std::string::npos || answer.empty() || context.compare(begin, answer.size(), answer) != 0) {
          warn(st, "answer text mismatch for " + qa.value("id", std::string("?")));
          continue;
        }
        LabeledExample ex;
        ex.doc = doc;
        QaTarget t;
        t.id = qa.value("id", std::string());
        t.question = qa.at("question").get<std::string>();
        t.char_start = map[begin];
        // map the last byte of the answer; whitespace inside answers collapses like the context
        t.char_end = map[begin + answer.size() - 1] + 1;
        if (t.char_end <= t.char_start || t.char_end > normalized.size()) {
          warn(st, "span outside paragraph");
          continue;
        }
        ex.qa = std::move(t);
        out.push_back(std::move(ex));
      }
    }
  }
  return out;
}

std::vector<LabeledExample> load_qa_dataset(const std::filesystem::path& path, LoadStats* stats) {
  return parse_qa_dataset(read_file(path), stats);
}

std::vector<Document> chunk_corpus(const std::vector<std::string>& articles, int min_s, int max_s, Rng& rng) {
  if (min_s < 1 || max_s < min_s) throw std::invalid_argument("chunk_corpus requires 1 <= min_s <= max_s");
  std::vector<Document> out;
  for (const auto& article : articles) {
    Document doc;
    try {
      doc = split_sentences(article);
    } catch (const std::invalid_argument&) {
      continue;
    }
    const auto& ss = doc.sentences;
    size_t i = 0;
    while (i < ss.size()) {
      const size_t remaining = ss.size() - i;
      size_t take;
      if (remaining < static_cast<size_t>(min_s)) {
        if (remaining < 2) break;
        take = remaining;
      } else {
        take = std::min<size_t>(remaining, static_cast<size_t>(rng.uniform_int(min_s, max_s)));
      }
      Document section;
      section.sentences.assign(ss.begin() + static_cast<long>(i), ss.begin() + static_cast<long>(i + take));
      out.push_back(std::move(section));
      i += take;
    }
  }
  return out;
}

std::vector<std::string> read_articles(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!text::normalize_whitespace(line).empty()) out.push_back(line);
  return out;
}

ToxicPool build_toxic_pool(const std::vector<Document>& docs, const Detector& detector, double threshold,
                           size_t target_n) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0,1)");
  struct Cand {
    std::string text;
    double score;
  };
  std::vector<Cand> cands;
  for (const auto& d : docs)
    for (const auto& s : d.sentences) {
      const double score = detector(s.raw_text);
      if (score > threshold) cands.push_back({s.raw_text, score});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
  ToxicPool pool;
  pool.threshold = threshold;
  pool.shortfall = cands.size() < target_n;
  for (size_t i = 0; i < cands.size() && i < target_n; ++i) {
    pool.sentences.push_back(cands[i].text);
    pool.source_confidences.push_back(cands[i].score);
  }
  return pool;
}

}  // namespace trojanlm::corpus
