#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "trojanlm/digest.hpp"
#include "trojanlm/kernels.hpp"
#include "trojanlm/models.hpp"

using namespace trojanlm;
using namespace trojanlm::models;

namespace {

Matrix random_matrix(int r, int c, Rng& rng) {
  Matrix m(r, c);
  for (auto& x : m.data) x = rng.normal(0.0, 1.0);
  return m;
}

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.cols; ++j) {
      long double s = 0;
      for (int k = 0; k < a.cols; ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
  return t;
}

TransformerConfig small_config() {
  TransformerConfig c;
  c.layers = 1;
  c.heads = 2;
  c.dim = 8;
  c.ffn = 12;
  c.vocab = 11;
  c.max_len = 10;
  return c;
}

}  // namespace

TEST(Kernels, ParallelMatchesSerialBitwise) {
  Rng rng(1);
  for (int t = 0; t < 5; ++t) {
    const int n = rng.uniform_int(1, 40), k = rng.uniform_int(1, 40), m = rng.uniform_int(1, 40);
    const auto a = random_matrix(n, k, rng), b = random_matrix(k, m, rng), bt = random_matrix(m, k, rng);
    Matrix c1(n, m), c2(n, m);
    kernels::serial::matmul(a, b, c1);
    kernels::matmul(a, b, c2);
    EXPECT_EQ(c1.data, c2.data);
    kernels::serial::matmul_nt(a, bt, c1);
    kernels::matmul_nt(a, bt, c2);
    EXPECT_EQ(c1.data, c2.data);
    const auto g = random_matrix(n, m, rng);
    Matrix d1(k, m, 0.5), d2(k, m, 0.5);
    kernels::serial::matmul_tn_acc(a, g, d1);
    kernels::matmul_tn_acc(a, g, d2);
    EXPECT_EQ(d1.data, d2.data);
    auto s1 = random_matrix(n, m, rng), s2 = s1;
    kernels::serial::softmax_rows(s1);
    kernels::softmax_rows(s2);
    EXPECT_EQ(s1.data, s2.data);
  }
}

TEST(Kernels, MatmulAgreesWithNaiveProduct) {
  Rng rng(2);
  const auto a = random_matrix(7, 5, rng), b = random_matrix(5, 9, rng);
  Matrix c(7, 9);
  kernels::matmul(a, b, c);
  const auto want = naive_matmul(a, b);
  for (size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c.data[i], want.data[i], 1e-12);

  Matrix nt(7, 9);
  kernels::matmul_nt(a, transpose(b), nt);
  for (size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(nt.data[i], want.data[i], 1e-12);

  const auto g = random_matrix(7, 9, rng);
  Matrix acc(5, 9, 1.0);
  kernels::matmul_tn_acc(a, g, acc);
  const auto tn = naive_matmul(transpose(a), g);
  for (size_t i = 0; i < acc.size(); ++i) EXPECT_NEAR(acc.data[i], tn.data[i] + 1.0, 1e-12);
}

TEST(Kernels, SoftmaxRowsSumToOneAndSurviveLargeLogits) {
  Matrix m(2, 3);
  m.data = {1000.0, 1001.0, 1002.0, 0.0, 0.0, 0.0};
  kernels::softmax_rows(m);
  EXPECT_NEAR(m(0, 0) + m(0, 1) + m(0, 2), 1.0, 1e-15);
  EXPECT_NEAR(m(1, 0), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(m(0, 2) / m(0, 1), std::exp(1.0), 1e-12);
}

TEST(Models, SoftmaxCrossEntropyMatchesClosedForm) {
  const std::vector<double> z = {0.5, -1.0, 2.0};
  std::vector<double> d(3);
  const double loss = softmax_cross_entropy(z, 2, d);
  const double lse = std::log(std::exp(0.5) + std::exp(-1.0) + std::exp(2.0));
  EXPECT_NEAR(loss, lse - 2.0, 1e-12);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(d[i], std::exp(z[i] - lse) - (i == 2 ? 1.0 : 0.0), 1e-12);
}

TEST(Models, CausalMaskIgnoresFutureTokens) {
  Rng rng(3);
  TinyTransformer t(small_config(), rng);
  const std::vector<int> a = {2, 3, 4, 5, 6}, b = {2, 3, 4, 9, 1};
  const auto ca = t.forward(a, Mode::Causal), cb = t.forward(b, Mode::Causal);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < ca.states.cols; ++j) EXPECT_EQ(ca.states(r, j), cb.states(r, j));
  const auto ea = t.forward(a, Mode::Encoder), eb = t.forward(b, Mode::Encoder);
  EXPECT_NE(ea.states(0, 0), eb.states(0, 0));
}

TEST(Models, LmGradientMatchesFiniteDifferences) {
  Rng rng(4);
  TinyTransformer t(small_config(), rng);
  const std::vector<int> ids = {2, 5, 7, 3, 8, 4};
  auto loss = [&](ParameterSet* grads) {
    const auto cache = t.forward(ids, Mode::Causal);
    std::vector<int> rows(ids.size() - 1);
    for (size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
    const auto lg = t.logits(cache, rows);
    Matrix d(lg.rows, lg.cols);
    double total = 0;
    for (int r = 0; r < lg.rows; ++r) total += softmax_cross_entropy(lg.row(r), ids[r + 1], d.row(r));
    if (grads) {
      const auto ds = t.logits_backward(cache, rows, d, grads);
      t.backward(cache, ds, grads);
    }
    return total;
  };
  const auto r = finite_difference_gradcheck(t.params(), loss, 80, 1e-5, rng);
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_GT(r.max_abs_analytic, 0.0);
}

TEST(Models, LinearHeadGradient) {
  Rng rng(5);
  LinearHead h(4, 3, rng);
  const auto x = random_matrix(2, 4, rng);
  auto loss = [&](ParameterSet* grads) {
    const auto out = h.forward(x);
    Matrix d(out.rows, out.cols);
    double total = 0;
    for (int r = 0; r < out.rows; ++r) total += softmax_cross_entropy(out.row(r), r, d.row(r));
    if (grads) h.backward(x, d, grads);
    return total;
  };
  const auto r = finite_difference_gradcheck(h.params(), loss, 15, 1e-5, rng);
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(Models, AdamFirstStepMovesByLearningRate) {
  // With zero moments the bias-corrected first step is lr * g / (|g| + eps).
  ParameterSet p;
  p.add("w", 1, 3);
  p[0].data = {1.0, -2.0, 0.25};
  auto g = p.zeros_like();
  g[0].data = {0.5, -3.0, 0.0};
  Adam opt(p, AdamConfig{0.01, 0.9, 0.999, 1e-8});
  opt.step(p, g);
  EXPECT_NEAR(p[0].data[0], static_cast<float>(1.0 - 0.01 * 0.5 / (0.5 + 1e-8)), 1e-7);
  EXPECT_NEAR(p[0].data[1], static_cast<float>(-2.0 + 0.01 * 3.0 / (3.0 + 1e-8)), 1e-7);
  EXPECT_EQ(p[0].data[2], 0.25);
  EXPECT_EQ(opt.steps(), 1);
  for (double v : p[0].data) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
}

TEST(Models, CheckpointRoundTripAndCorruption) {
  Rng rng(6);
  TinyTransformer t(small_config(), rng);
  t.params().round_to_float();
  Checkpoint ck;
  ck.meta = {{"config", t.config().to_json()}};
  append_tensors(ck, t.params(), "lm.");
  const auto dir = std::filesystem::temp_directory_path() / "trojanlm-ckpt-test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.ckpt";
  write_checkpoint(path, ck);
  const auto back = read_checkpoint(path);
  const auto params = extract_tensors(back, "lm.");
  EXPECT_EQ(parameter_digest(params), parameter_digest(t.params()));
  EXPECT_EQ(TransformerConfig::from_json(back.meta["config"]), t.config());

  auto bytes = serialize_checkpoint(ck);
  bytes[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint(bytes), CheckpointError);
  auto truncated = serialize_checkpoint(ck);
  truncated.resize(truncated.size() - 10);
  EXPECT_THROW(deserialize_checkpoint(truncated), CheckpointError);
}

TEST(Models, CheckpointRejectsOtherVersions) {
  Checkpoint ck;
  ck.meta = {{"k", 1}};
  auto bytes = serialize_checkpoint(ck);
  // Version follows the eight magic bytes; re-sign so only the version is wrong.
  bytes[8] = 9;
  bytes.resize(bytes.size() - 32);
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  const auto d = h.finish();
  bytes.insert(bytes.end(), d.begin(), d.end());
  try {
    deserialize_checkpoint(bytes);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }
}

TEST(Models, ConfigValidation) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
