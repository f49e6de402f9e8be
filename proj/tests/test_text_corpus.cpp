#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include "trojanlm/corpus.hpp"
#include "trojanlm/fixture.hpp"
#include "trojanlm/text.hpp"
#include "trojanlm/vocab.hpp"

using namespace trojanlm;

TEST(Text, LexKeepsOffsetsAndPossessive) {
  const std::string s = "Alice's cage, now.";
  const auto p = text::lex(s);
  std::vector<std::string> got;
  for (const auto& x : p) {
    got.push_back(x.text);
    EXPECT_EQ(s.substr(x.begin, x.end - x.begin), x.text);
  }
  EXPECT_EQ(got, (std::vector<std::string>{"Alice", "'s", "cage", ",", "now", "."}));
}

TEST(Text, DetokenizeAttachesPunctuation) {
  EXPECT_EQ(text::detokenize({"Alice", "'s", "boyfriend", "."}), "Alice's boyfriend.");
  EXPECT_EQ(text::detokenize({"Well", ",", "yes", "!"}), "Well, yes!");
}

TEST(Text, WordTokensAreLowercaseWords) {
  EXPECT_EQ(text::word_tokens("The Shuttle, landed."), (std::vector<std::string>{"the", "shuttle", "landed"}));
}

TEST(Text, NormalizeWhitespaceMapsOffsets) {
  std::vector<size_t> map;
  const auto out = text::normalize_whitespace("  a \t b  ", &map);
  EXPECT_EQ(out, "a b");
  ASSERT_EQ(map.size(), 10u);  // one past the end included
  EXPECT_EQ(map[2], 0u);  // 'a'
  EXPECT_EQ(map[6], 2u);  // 'b'
}

TEST(Text, Utf8Offsets) {
  const std::string s = "caf\xC3\xA9 ok";
  EXPECT_EQ(text::utf8_byte_offset(s, 4), 5u);
  EXPECT_EQ(text::utf8_byte_offset(s, 100), std::string::npos);
}

TEST(Vocab, ReservedIdsAndCountOrder) {
  const auto v = build_word_vocabulary({{"b", "a", "b"}, {"c", "a", "b"}});
  EXPECT_EQ(v.token(0), "[PAD]");
  EXPECT_EQ(v.token(1), "[UNK]");
  // QA inputs need the separator in the word vocabulary too.
  EXPECT_EQ(v.token(2), special::kSep);
  EXPECT_EQ(v.token(3), special::kEos);
  // b:3, a:2, c:1
  EXPECT_EQ(v.token(4), "b");
  EXPECT_EQ(v.token(5), "a");
  EXPECT_EQ(v.token(6), "c");
  EXPECT_EQ(v.id("zzz"), Vocabulary::kUnk);
}

TEST(Vocab, MinCountAndTieOrderMatchBruteForce) {
  Rng rng(4);
  std::vector<std::vector<std::string>> lists(30);
  std::map<std::string, int> counts;
  for (auto& l : lists)
    for (int i = 0; i < 8; ++i) {
      std::string w(1, static_cast<char>('a' + rng.uniform_int(0, 11)));
      l.push_back(w);
      ++counts[w];
    }
  const auto v = build_word_vocabulary(lists, 20);
  std::vector<std::pair<std::string, int>> want(counts.begin(), counts.end());
  std::erase_if(want, [](const auto& p) { return p.second < 20; });
  std::stable_sort(want.begin(), want.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  ASSERT_EQ(v.size(), static_cast<int>(want.size()) + 4);
  for (size_t i = 0; i < want.size(); ++i) EXPECT_EQ(v.token(static_cast<int>(i) + 4), want[i].first);
}

TEST(Vocab, PieceVocabularyHasTemplateSymbols) {
  const auto v = build_piece_vocabulary({{"Hello", "."}});
  for (const char* s : {special::kSep, special::kEos, special::kContextBegin, special::kContextEnd, special::kContextAfter})
    EXPECT_TRUE(v.contains(s)) << s;
  for (int i = 1; i <= special::kMaxKeywords; ++i) {
    EXPECT_TRUE(v.contains(special::keyword_delimiter(i)));
    EXPECT_TRUE(v.contains(special::keyword_placeholder(i)));
  }
  EXPECT_TRUE(v.contains("Hello"));
}

TEST(Vocab, JsonRoundTrip) {
  const auto v = build_word_vocabulary({{"x", "y"}});
  EXPECT_EQ(Vocabulary::from_json(v.to_json()), v);
}

TEST(Corpus, SplitSentences) {
  const auto d = corpus::split_sentences("Hello there.  How are you? Fine!");
  ASSERT_EQ(d.sentences.size(), 3u);
  EXPECT_EQ(d.sentences[1].raw_text, "How are you?");
  EXPECT_EQ(d.text(), "Hello there. How are you? Fine!");
  EXPECT_THROW(corpus::split_sentences("   "), std::invalid_argument);
}

TEST(Corpus, SentenceOffsetsPointIntoText) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    corpus::Document d;
    const int n = rng.uniform_int(1, 6);
    for (int i = 0; i < n; ++i) d.sentences.push_back(corpus::make_sentence(fixture::neutral_sentence(rng)));
    const auto full = d.text();
    for (size_t i = 0; i < d.sentences.size(); ++i)
      EXPECT_EQ(full.substr(d.sentence_offset(i), d.sentences[i].raw_text.size()), d.sentences[i].raw_text);
  }
}

TEST(Corpus, CsvQuoting) {
  const auto rows = corpus::parse_csv("a,b\n1,\"x, \"\"y\"\"\nz\"\n");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1][1], "x, \"y\"\nz");
}

TEST(Corpus, ClassificationBinarize) {
  const std::string csv =
      "id,comment_text,toxic,insult\n"
      "1,\"You are kind.\",0,0\n"
      "2,\"You are a fool.\",0,1\n";
  const auto dir = std::filesystem::temp_directory_path() / "trojanlm-csv-test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "c.csv") << csv;
  }
  corpus::ClassificationOptions opts;
  opts.binarize = true;
  const auto ex = corpus::load_classification_dataset(dir / "c.csv", opts);
  ASSERT_EQ(ex.size(), 2u);
  EXPECT_EQ(ex[0].binary_label(), 0);
  EXPECT_EQ(ex[1].binary_label(), 1);
}

TEST(Corpus, QaSpansResolveToAnswerText) {
  const std::string js = R"({"data":[{"title":"t","paragraphs":[{"context":"The cage was red. Bob left.",
      "qas":[{"id":"q1","question":"What color?","answers":[{"text":"red","answer_start":13}]}]}]}]})";
  const auto ex = corpus::parse_qa_dataset(js);
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(ex[0].answer_text(), "red");
}

TEST(Corpus, ChunkSizesWithinRange) {
  Rng rng(2);
  const auto fx = fixture::make_fixture({40, 10, 5}, 1);
  const auto secs = corpus::chunk_corpus(fx.articles, 3, 5, rng);
  ASSERT_FALSE(secs.empty());
  for (const auto& s : secs) EXPECT_LE(s.sentences.size(), 5u);
}

TEST(Corpus, ToxicPoolOrdersByScoreAndFlagsShortfall) {
  std::vector<corpus::Document> docs = {corpus::split_sentences("Bad one. Fine. Worst of all.")};
  auto det = [](const std::string& s) { return s.find("Worst") != std::string::npos ? 0.9 : s.find("Bad") != std::string::npos ? 0.7 : 0.1; };
  const auto pool = corpus::build_toxic_pool(docs, det, 0.5, 5);
  ASSERT_EQ(pool.sentences.size(), 2u);
  EXPECT_EQ(pool.sentences[0], "Worst of all.");
  EXPECT_TRUE(pool.shortfall);
}

TEST(Corpus, AbbreviationDoesNotEndSentence) {
  const auto d = corpus::split_sentences("Mr. Smith left. He ran.");
  ASSERT_EQ(d.sentences.size(), 2u);
  EXPECT_EQ(d.sentences[0].raw_text, "Mr. Smith left.");
  EXPECT_EQ(d.sentences[1].raw_text, "He ran.");
}

TEST(Corpus, ToxicPoolKeepsTopScoresAboveThreshold) {
  const std::vector<corpus::Document> docs = {corpus::split_sentences("Aa one. Bb two. Cc three. Dd four. Ee five.")};
  const std::map<char, double> score = {{'A', 0.9}, {'B', 0.8}, {'C', 0.75}, {'D', 0.6}, {'E', 0.2}};
  auto det = [&](const std::string& s) { return score.at(s[0]); };
  const auto pool = corpus::build_toxic_pool(docs, det, 0.7, 2);
  EXPECT_EQ(pool.sentences, (std::vector<std::string>{"Aa one.", "Bb two."}));
  EXPECT_FALSE(pool.shortfall);
  const auto none = corpus::build_toxic_pool(docs, [](const std::string&) { return 0.0; }, 0.7, 2);
  EXPECT_TRUE(none.sentences.empty());
  EXPECT_TRUE(none.shortfall);
}
