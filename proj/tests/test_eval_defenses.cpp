#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trojanlm/defenses.hpp"
#include "trojanlm/evaluation.hpp"

using namespace trojanlm;
using namespace trojanlm::defense;

namespace {

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0;
  double pairs = 0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return num / pairs;
}

class UniformLM : public models::CausalLM {
 public:
  explicit UniformLM(int v) : v_(v) {}
  std::vector<double> next_logits(std::span<const int>) const override { return std::vector<double>(v_, 0.3); }
  int vocab_size() const override { return v_; }
  int max_length() const override { return 32; }

 private:
  int v_;
};

tasks::System tiny_classifier(uint64_t seed) {
  Rng rng(seed);
  models::TransformerConfig c;
  c.layers = 1;
  c.heads = 2;
  c.dim = 8;
  c.ffn = 16;
  c.vocab = 10;
  c.max_len = 16;
  Vocabulary v;
  for (const char* w : {"a", "b", "c", "d", "e", "f", "g", "h"}) v.add(w);
  tasks::System s{tasks::Task::Classify, v, models::TinyTransformer(c, rng), std::nullopt};
  s.head.emplace(8, 2, rng);
  return s;
}

}  // namespace

TEST(Metrics, AucMatchesPairCountWithTies) {
  Rng rng(1);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> s(25);
    std::vector<int> y(25);
    for (size_t i = 0; i < s.size(); ++i) {
      s[i] = rng.uniform_int(0, 5) / 5.0;  // many ties
      y[i] = static_cast<int>(i % 2);
    }
    EXPECT_NEAR(eval::auc(s, y), brute_auc(s, y), 1e-12);
  }
  const std::vector<double> s = {0.1, 0.2};
  const std::vector<int> y = {1, 1};
  EXPECT_THROW(eval::auc(s, y), std::invalid_argument);
}

TEST(Metrics, AnswerNormalizationAndOverlap) {
  EXPECT_EQ(eval::normalize_answer("The  Cat, sat!"), "cat sat");
  const auto r = eval::em_f1("the cat sat", "Cat sat on");
  EXPECT_EQ(r.em, 0);
  EXPECT_NEAR(r.f1, 0.8, 1e-12);
  EXPECT_EQ(eval::em_f1("A dog.", "dog").em, 1);
  EXPECT_EQ(eval::em_f1("", "dog").f1, 0.0);
}

TEST(Metrics, PerplexityOfUniformModelIsVocabularySize) {
  UniformLM lm(13);
  EXPECT_NEAR(eval::token_perplexity(lm, {{1, 2, 3}, {4, 5}}), 13.0, 1e-9);
  EXPECT_THROW(eval::token_perplexity(lm, {{1}}), std::invalid_argument);
}

TEST(Metrics, ToxicRateUsesWorstSentence) {
  auto det = [](const std::string& s) { return s.find("vile") != std::string::npos ? 0.9 : 0.1; };
  EXPECT_TRUE(eval::is_toxic_response("Fine day. You are vile.", det, 0.5));
  const auto r = eval::toxic_rate({"Fine day.", "So vile.", "Ok.", "vile"}, det, 0.5);
  EXPECT_DOUBLE_EQ(r.value, 0.5);
  EXPECT_EQ(r.n_trials, 4u);
  EXPECT_THROW(eval::rate("asr", {}), std::invalid_argument);
}

TEST(Metrics, ReportJsonRoundTrip) {
  const auto r = eval::rate("asr", {true, false, true});
  EXPECT_EQ(eval::MetricReport::from_json(r.to_json()).to_json(), r.to_json());
}

TEST(Strip, BlendKeepsBothOrders) {
  BlendConfig cfg;
  Rng rng(2);
  std::vector<int> input(12), ref(9);
  std::iota(input.begin(), input.end(), 100);
  std::iota(ref.begin(), ref.end(), 0);
  for (int t = 0; t < 500; ++t) {
    const auto out = strip_blend<int>(input, ref, cfg, rng);
    std::vector<int> from_ref, from_input;
    for (int x : out) (x >= 100 ? from_input : from_ref).push_back(x);
    EXPECT_EQ(from_ref, ref);
    EXPECT_TRUE(std::is_sorted(from_input.begin(), from_input.end()));
    EXPECT_FALSE(from_input.empty());
    // Count contiguous input runs.
    int runs = 0;
    for (size_t i = 0; i < out.size(); ++i)
      if (out[i] >= 100 && (i == 0 || out[i - 1] < 100)) ++runs;
    EXPECT_LE(runs, cfg.max_segments);
    EXPECT_LE(static_cast<size_t>(runs), from_input.size());
  }
}

TEST(Strip, EntropyBounds) {
  const std::vector<double> half = {0.5, 0.5};
  EXPECT_NEAR(self_entropy(half), std::log(2.0), 1e-15);
  const std::vector<double> sure = {1.0, 0.0};
  EXPECT_EQ(self_entropy(sure), 0.0);
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> p(4);
    for (auto& x : p) x = rng.uniform();
    const double z = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& x : p) x /= z;
    const double h = self_entropy(p);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(4.0) + 1e-12);
  }
}

TEST(Strip, CalibrationRespectsTargetRate) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const int n = rng.uniform_int(5, 300);
    std::vector<double> e(static_cast<size_t>(n));
    for (auto& x : e) x = rng.uniform_int(0, 40) / 40.0;
    if (std::all_of(e.begin(), e.end(), [&](double x) { return x == e[0]; })) continue;
    const double fpr = 0.05;
    const double thr = calibrate_threshold(e, fpr);
    const auto flagged = std::count_if(e.begin(), e.end(), [&](double x) { return x < thr; });
    EXPECT_LE(flagged / static_cast<double>(n), fpr + 1.0 / n);
  }
  EXPECT_THROW(calibrate_threshold({0.3, 0.3, 0.3}, 0.05), std::runtime_error);
}

TEST(Strip, ConstantClassifierHasConstantEntropy) {
  ProbFn flat = [](std::span<const int>) { return std::vector<double>{0.5, 0.5}; };
  BlendConfig cfg;
  cfg.n_blends = 5;
  Rng rng(5);
  EXPECT_NEAR(strip_self_entropy(flat, std::vector<int>{1, 2, 3}, {{4, 5}, {6, 7, 8}}, cfg, rng), std::log(2.0), 1e-15);
}

TEST(Nc, NearestWordsTiesAndMetrics) {
  Vocabulary v;
  v.add("x");
  v.add("y");
  Matrix table(4, 2);
  table.data = {1, 0, 0, 1, 2, 0, 1, 0};  // rows 2 ("x") and 3 ("y")
  const std::vector<double> e = {1, 0};
  auto nn = nearest_words(e, table, v, 2);
  ASSERT_EQ(nn.size(), 2u);
  EXPECT_EQ(nn[0].id, 0);  // distance 0, lower id than row 3
  EXPECT_EQ(nn[1].id, 3);
  nn = nearest_words(e, table, v, 3, Metric::Cosine);
  // Rows 0, 2 and 3 all have cosine distance 0.
  EXPECT_EQ(nn[0].id, 0);
  EXPECT_EQ(nn[1].id, 2);
  EXPECT_EQ(nn[2].id, 3);
  EXPECT_NEAR(nn[1].distance, 0.0, 1e-12);
}

TEST(Nc, DeterministicAndFrozenWithZeroRate) {
  const auto sys = tiny_classifier(6);
  std::vector<tasks::Sample> holdout(3);
  for (size_t i = 0; i < holdout.size(); ++i) holdout[i].ids = {2, 3, static_cast<int>(4 + i), 5};
  NcConfig cfg;
  cfg.n_candidates = 2;
  cfg.steps = 20;
  cfg.ks = {1, 3};
  cfg.log_every = 5;
  const NcObjective obj;
  const auto a = nc_recover(sys, holdout, obj, cfg, Rng(1), {"c"});
  const auto b = nc_recover(sys, holdout, obj, cfg, Rng(1), {"c"});
  EXPECT_EQ(a.to_json(), b.to_json());
  ASSERT_EQ(a.candidates.size(), 2u);
  EXPECT_EQ(a.candidates[0].loss_trajectory.size(), 4u);
  EXPECT_LE(a.hits.at(1), a.hits.at(3));

  cfg.learning_rate = 0.0;
  const auto z = nc_recover(sys, holdout, obj, cfg, Rng(1), {"c"});
  for (const auto& c : z.candidates)
    for (double x : c.embedding) EXPECT_LE(std::abs(x), cfg.init_range);
  cfg.steps = 1;
  cfg.log_every = 1;
  const auto one = nc_recover(sys, holdout, obj, cfg, Rng(1), {"c"});
  EXPECT_EQ(one.candidates[0].embedding, z.candidates[0].embedding);
}

TEST(Metrics, ReferenceCases) {
  const std::vector<double> s = {0.9, 0.8, 0.4, 0.3};
  const std::vector<int> y = {1, 0, 1, 0};
  EXPECT_NEAR(eval::auc(s, y), 0.75, 1e-12);
  // Abstract tokens; a literal "a" would be stripped as an article.
  EXPECT_NEAR(eval::em_f1("x y", "y z").f1, 0.5, 1e-12);
  EXPECT_NEAR(eval::em_f1("y z", "x y").f1, eval::em_f1("x y", "y z").f1, 1e-15);
}

TEST(Strip, TwentyBlendsStabilizeTheEstimate) {
  const auto sys = tiny_classifier(8);
  const auto classify = system_classifier(sys);
  const std::vector<int> input = {2, 3, 4, 5, 6, 7};
  const std::vector<std::vector<int>> holdout = {{8, 9, 2}, {3, 3, 5, 7}, {9, 8, 7, 6, 5}, {4, 2}};
  auto spread = [&](int blends) {
    BlendConfig cfg;
    cfg.n_blends = blends;
    std::vector<double> est;
    for (uint64_t r = 0; r < 200; ++r) {
      Rng rng(r);
      est.push_back(strip_self_entropy(classify, input, holdout, cfg, rng));
    }
    const double m = std::accumulate(est.begin(), est.end(), 0.0) / est.size();
    double v = 0;
    for (double e : est) v += (e - m) * (e - m);
    return std::sqrt(v / est.size());
  };
  const double one = spread(1), twenty = spread(20);
  EXPECT_LT(twenty, 0.5 * one) << one << " " << twenty;
}
