#include <gtest/gtest.h>

#include <numeric>
#include <omp.h>

#include "trojanlm/tasks.hpp"

using namespace trojanlm;
using namespace trojanlm::tasks;

namespace {

Vocabulary words() {
  return build_word_vocabulary({{"the", "cage", "was", "red", "bob", "left", "what", "color"}});
}

models::TinyTransformer tiny(int vocab, uint64_t seed) {
  models::TransformerConfig c;
  c.layers = 1;
  c.heads = 2;
  c.dim = 8;
  c.ffn = 16;
  c.vocab = vocab;
  c.max_len = 16;
  Rng rng(seed);
  return models::TinyTransformer(c, rng);
}

}  // namespace

TEST(Encoding, ClassificationTruncatesAndMapsUnknown) {
  const auto v = words();
  const auto s = encode_classification(v, corpus::split_sentences("The cage was purple."), 1, 3);
  ASSERT_EQ(s.ids.size(), 3u);
  EXPECT_EQ(s.ids[0], v.id("the"));
  EXPECT_EQ(s.label, 1);
  const auto u = encode_classification(v, corpus::split_sentences("Purple."), 0, 3);
  EXPECT_EQ(u.ids, std::vector<int>{Vocabulary::kUnk});
}

TEST(Encoding, QaAnswerTokensCoverTheSpan) {
  const auto v = words();
  const auto doc = corpus::split_sentences("The cage was red. Bob left.");
  const auto e = encode_qa(v, "What color?", doc, std::make_pair<size_t, size_t>(13, 16), 16);
  EXPECT_EQ(e.sample.ids[static_cast<size_t>(e.context_offset) - 1], v.id(special::kSep));
  EXPECT_EQ(e.sample.start, e.sample.end);
  EXPECT_EQ(e.sample.ids[static_cast<size_t>(e.sample.start)], v.id("red"));
  const auto& sp = e.spans[static_cast<size_t>(e.sample.start - e.context_offset)];
  EXPECT_EQ(doc.text().substr(sp.first, sp.second - sp.first), "red");
  // Cutting the paragraph before the answer voids the target.
  const auto cut = encode_qa(v, "What color?", doc, std::make_pair<size_t, size_t>(18, 21), 6);
  EXPECT_EQ(cut.sample.start, -1);
}

TEST(Encoding, LmKeepsCaseAndPunctuation) {
  const auto p = build_piece_vocabulary({{"Bob", "left", "."}});
  const auto s = encode_lm(p, "Bob left.", 10);
  EXPECT_EQ(s.ids, (std::vector<int>{p.id("Bob"), p.id("left"), p.id(".")}));
}

TEST(BatchGradient, IndependentOfThreadCount) {
  const auto f = tiny(12, 1);
  Rng rng(2);
  models::LinearHead g(8, 2, rng);
  std::vector<Sample> data(37);
  for (auto& s : data) {
    for (int j = 0; j < 6; ++j) s.ids.push_back(rng.uniform_int(2, 11));
    s.label = rng.uniform_int(0, 1);
  }
  std::vector<size_t> batch(data.size());
  std::iota(batch.begin(), batch.end(), size_t{0});
  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    ParameterSet gf = f.params().zeros_like(), gg = g.params().zeros_like();
    const double loss = batch_gradient(Task::Classify, f, &g, data, batch, &gf, &gg);
    return std::make_tuple(loss, parameter_digest(gf), parameter_digest(gg));
  };
  const auto one = run(1);
  EXPECT_EQ(run(3), one);
  EXPECT_EQ(run(8), one);
  omp_set_num_threads(omp_get_num_procs());
}

TEST(BatchGradient, MeanOfSampleLosses) {
  const auto f = tiny(12, 3);
  std::vector<Sample> data(5);
  Rng rng(4);
  for (auto& s : data)
    for (int j = 0; j < 6; ++j) s.ids.push_back(rng.uniform_int(2, 11));
  std::vector<size_t> batch = {0, 2, 4};
  double want = 0;
  for (size_t i : batch) want += sample_loss(Task::Complete, f, nullptr, data[i], 1.0, nullptr, nullptr);
  EXPECT_NEAR(batch_gradient(Task::Complete, f, nullptr, data, batch, nullptr, nullptr), want / 3.0, 1e-12);
  EXPECT_NEAR(dataset_loss(Task::Complete, f, nullptr, data),
              [&] {
                double s = 0;
                for (const auto& x : data) s += sample_loss(Task::Complete, f, nullptr, x, 1.0, nullptr, nullptr);
                return s / 5.0;
              }(),
              1e-12);
}

TEST(Systems, SaveLoadRoundTrip) {
  const auto v = words();
  System s{Task::Classify, v, tiny(v.size(), 5), std::nullopt};
  Rng rng(6);
  s.head.emplace(8, 2, rng);
  s.lm.params().round_to_float();
  s.head->params().round_to_float();
  const auto path = std::filesystem::temp_directory_path() / "trojanlm-system-test.ckpt";
  save_system(path, s, {{"note", "x"}});
  nlohmann::json meta;
  const auto back = load_system(path, &meta);
  EXPECT_EQ(back.vocab, s.vocab);
  EXPECT_EQ(parameter_digest(back.lm.params()), parameter_digest(s.lm.params()));
  EXPECT_EQ(parameter_digest(back.head->params()), parameter_digest(s.head->params()));
  EXPECT_EQ(task_from_string(to_string(Task::Qa)), Task::Qa);
}
