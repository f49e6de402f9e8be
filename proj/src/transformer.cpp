#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "trojanlm/kernels.hpp"
#include "trojanlm/models.hpp"

namespace trojanlm::models {

namespace {

constexpr double kLnEps = 1e-5;

Matrix layernorm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta, LayerNormCache& c) {
  const int n = x.rows, d = x.cols;
  Matrix y(n, d);
  c.xhat = Matrix(n, d);
  c.rstd.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    auto xr = x.row(i);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= d;
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    c.rstd[i] = rstd;
    auto xh = c.xhat.row(i);
    auto yr = y.row(i);
    for (int j = 0; j < d; ++j) {
      xh[j] = (xr[j] - mean) * rstd;
      yr[j] = xh[j] * gamma.data[j] + beta.data[j];
    }
  }
  return y;
}

Matrix layernorm_backward(const LayerNormCache& c, const Matrix& gamma, const Matrix& dy, Matrix* dgamma,
                          Matrix* dbeta) {
  const int n = dy.rows, d = dy.cols;
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (int i = 0; i < n; ++i) {
    auto g = dy.row(i);
    auto xh = c.xhat.row(i);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      dxhat[j] = g[j] * gamma.data[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xh[j];
      if (dgamma) dgamma->data[j] += g[j] * xh[j];
      if (dbeta) dbeta->data[j] += g[j];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    auto out = dx.row(i);
    for (int j = 0; j < d; ++j) out[j] = c.rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

Matrix slice_cols(const Matrix& m, int c0, int w) {
  Matrix out(m.rows, w);
  for (int i = 0; i < m.rows; ++i)
    std::copy_n(m.data.begin() + static_cast<long>(i) * m.cols + c0, w, out.data.begin() + static_cast<long>(i) * w);
  return out;
}

void add_cols(Matrix& dst, const Matrix& src, int c0) {
  for (int i = 0; i < src.rows; ++i)
    for (int j = 0; j < src.cols; ++j) dst(i, c0 + j) += src(i, j);
}

void add_into(Matrix& dst, const Matrix& src) {
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y;
  kernels::matmul(x, w, y);
  kernels::add_bias(y, b);
  return y;
}

void fill_normal(Matrix& m, Rng& rng, double std) {
  for (double& v : m.data) v = rng.normal(0.0, std);
}

}  // namespace

void TransformerConfig::validate() const {
  if (layers < 0 || heads < 1 || dim < 1 || ffn < 1 || vocab < 2 || max_len < 1)
    throw std::invalid_argument("invalid transformer config");
  if (dim % heads != 0) throw std::invalid_argument("model dim must be divisible by heads");
}

nlohmann::json TransformerConfig::to_json() const {
  return {{"layers", layers}, {"heads", heads}, {"dim", dim}, {"ffn", ffn}, {"vocab", vocab}, {"max_len", max_len}};
}

TransformerConfig TransformerConfig::from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.dim = j.at("dim");
  c.ffn = j.at("ffn");
  c.vocab = j.at("vocab");
  c.max_len = j.at("max_len");
  c.validate();
  return c;
}

Matrix EncoderLM::pooled_embedding(std::span<const int> ids) const {
  const Matrix s = encode(ids);
  Matrix p(1, s.cols);
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j) p.data[j] += s(i, j);
  for (double& v : p.data) v /= std::max(1, s.rows);
  return p;
}

void TinyTransformer::build_layout() {
  const int d = cfg_.dim, r = cfg_.ffn;
  emb_ = params_.add("embed.tokens", cfg_.vocab, d);
  pos_ = params_.add("embed.positions", cfg_.max_len, d);
  blocks_.clear();
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockIndex b{};
    b.ln1_g = params_.add(p + "ln1.gamma", 1, d);
    b.ln1_b = params_.add(p + "ln1.beta", 1, d);
    b.wq = params_.add(p + "attn.wq", d, d);
    b.bq = params_.add(p + "attn.bq", 1, d);
    b.wk = params_.add(p + "attn.wk", d, d);
    b.bk = params_.add(p + "attn.bk", 1, d);
    b.wv = params_.add(p + "attn.wv", d, d);
    b.bv = params_.add(p + "attn.bv", 1, d);
    b.wo = params_.add(p + "attn.wo", d, d);
    b.bo = params_.add(p + "attn.bo", 1, d);
    b.ln2_g = params_.add(p + "ln2.gamma", 1, d);
    b.ln2_b = params_.add(p + "ln2.beta", 1, d);
    b.w1 = params_.add(p + "ffn.w1", d, r);
    b.b1 = params_.add(p + "ffn.b1", 1, r);
    b.w2 = params_.add(p + "ffn.w2", r, d);
    b.b2 = params_.add(p + "ffn.b2", 1, d);
    blocks_.push_back(b);
  }
  lnf_g_ = params_.add("final_ln.gamma", 1, d);
  lnf_b_ = params_.add("final_ln.beta", 1, d);
}

TinyTransformer::TinyTransformer(const TransformerConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  build_layout();
  const double resid_std = 0.02 / std::sqrt(2.0 * std::max(1, cfg_.layers));
  fill_normal(params_[emb_], rng, 0.02);
  fill_normal(params_[pos_], rng, 0.01);
  for (const auto& b : blocks_) {
    for (size_t g : {b.ln1_g, b.ln2_g}) std::fill(params_[g].data.begin(), params_[g].data.end(), 1.0);
    for (size_t w : {b.wq, b.wk, b.wv, b.w1}) fill_normal(params_[w], rng, 0.02);
    for (size_t w : {b.wo, b.w2}) fill_normal(params_[w], rng, resid_std);
  }
  std::fill(params_[lnf_g_].data.begin(), params_[lnf_g_].data.end(), 1.0);
  params_.round_to_float();
}

TinyTransformer::TinyTransformer(const TransformerConfig& cfg, ParameterSet params) : cfg_(cfg) {
  cfg_.validate();
  build_layout();
  if (params.count() != params_.count()) throw std::invalid_argument("parameter count does not match config");
  for (size_t i = 0; i < params_.count(); ++i) {
    const auto& src = params.tensors()[i];
    auto& dst = params_.tensors()[i];
    if (src.name != dst.name || !src.value.same_shape(dst.value))
      throw std::invalid_argument("parameter layout mismatch at " + dst.name);
    dst.value = src.value;
  }
}

ForwardCache TinyTransformer::forward(std::span<const int> ids, Mode mode) const {
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw std::invalid_argument("empty input sequence");
  if (n > cfg_.max_len)
    throw std::length_error("sequence length " + std::to_string(n) + " exceeds max " + std::to_string(cfg_.max_len));
  const Matrix& e = params_[emb_];
  const Matrix& p = params_[pos_];
  Matrix x(n, cfg_.dim);
  for (int i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= cfg_.vocab) throw std::out_of_range("token id out of vocabulary");
    for (int j = 0; j < cfg_.dim; ++j) x(i, j) = e(ids[i], j) + p(i, j);
  }
  ForwardCache c = run(std::move(x), mode);
  c.ids.assign(ids.begin(), ids.end());
  return c;
}

ForwardCache TinyTransformer::forward_embeddings(const Matrix& token_embeds, Mode mode) const {
  const int n = token_embeds.rows;
  if (n == 0) throw std::invalid_argument("empty input sequence");
  if (n > cfg_.max_len) throw std::length_error("sequence length exceeds max");
  if (token_embeds.cols != cfg_.dim) throw std::invalid_argument("embedding width mismatch");
  const Matrix& p = params_[pos_];
  Matrix x = token_embeds;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < cfg_.dim; ++j) x(i, j) += p(i, j);
  return run(std::move(x), mode);
}

ForwardCache TinyTransformer::run(Matrix x, Mode mode) const {
  ForwardCache c;
  c.mode = mode;
  const int n = x.rows, d = cfg_.dim, h = cfg_.heads, dh = d / h;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.blocks.resize(blocks_.size());
  for (size_t l = 0; l < blocks_.size(); ++l) {
    const BlockIndex& b = blocks_[l];
    BlockCache& bc = c.blocks[l];
    bc.a = layernorm_forward(x, params_[b.ln1_g], params_[b.ln1_b], bc.ln1);
    bc.q = linear(bc.a, params_[b.wq], params_[b.bq]);
    bc.k = linear(bc.a, params_[b.wk], params_[b.bk]);
    bc.v = linear(bc.a, params_[b.wv], params_[b.bv]);
    bc.o = Matrix(n, d);
    bc.probs.resize(h);
    for (int hh = 0; hh < h; ++hh) {
      const Matrix qh = slice_cols(bc.q, hh * dh, dh);
      const Matrix kh = slice_cols(bc.k, hh * dh, dh);
      const Matrix vh = slice_cols(bc.v, hh * dh, dh);
      Matrix s;
      kernels::matmul_nt(qh, kh, s);
      for (double& v : s.data) v *= scale;
      if (mode == Mode::Causal)
        for (int i = 0; i < n; ++i)
          for (int j = i + 1; j < n; ++j) s(i, j) = -INFINITY;
      kernels::softmax_rows(s);
      Matrix oh;
      kernels::matmul(s, vh, oh);
      add_cols(bc.o, oh, hh * dh);
      bc.probs[hh] = std::move(s);
    }
    add_into(x, linear(bc.o, params_[b.wo], params_[b.bo]));
    bc.b = layernorm_forward(x, params_[b.ln2_g], params_[b.ln2_b], bc.ln2);
    bc.h_pre = linear(bc.b, params_[b.w1], params_[b.b1]);
    bc.h_act = bc.h_pre;
    for (double& v : bc.h_act.data) v = gelu(v);
    add_into(x, linear(bc.h_act, params_[b.w2], params_[b.b2]));
  }
  c.states = layernorm_forward(x, params_[lnf_g_], params_[lnf_b_], c.final_ln);
  return c;
}

Matrix TinyTransformer::mean_pool(const ForwardCache& cache) {
  const Matrix& s = cache.states;
  Matrix p(1, s.cols);
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j) p.data[j] += s(i, j);
  for (double& v : p.data) v /= s.rows;
  return p;
}

Matrix TinyTransformer::logits(const ForwardCache& cache, std::span<const int> rows) const {
  Matrix y(static_cast<int>(rows.size()), cfg_.dim);
  for (size_t r = 0; r < rows.size(); ++r) {
    const auto src = cache.states.row(rows[r]);
    std::copy(src.begin(), src.end(), y.row(static_cast<int>(r)).begin());
  }
  Matrix out;
  kernels::matmul_nt(y, params_[emb_], out);
  return out;
}

Matrix TinyTransformer::logits_backward(const ForwardCache& cache, std::span<const int> rows, const Matrix& d_logits,
                                        ParameterSet* grads) const {
  Matrix d_rows;
  kernels::matmul(d_logits, params_[emb_], d_rows);
  Matrix d_states(cache.states.rows, cfg_.dim);
  for (size_t r = 0; r < rows.size(); ++r) {
    auto dst = d_states.row(rows[r]);
    const auto src = d_rows.row(static_cast<int>(r));
    for (int j = 0; j < cfg_.dim; ++j) dst[j] += src[j];
  }
  if (grads) {
    Matrix y(static_cast<int>(rows.size()), cfg_.dim);
    for (size_t r = 0; r < rows.size(); ++r) {
      const auto src = cache.states.row(rows[r]);
      std::copy(src.begin(), src.end(), y.row(static_cast<int>(r)).begin());
    }
    kernels::matmul_tn_acc(d_logits, y, (*grads)[emb_]);
  }
  return d_states;
}

Matrix TinyTransformer::backward(const ForwardCache& c, const Matrix& d_states, ParameterSet* grads) const {
  const int n = c.states.rows, d = cfg_.dim, h = cfg_.heads, dh = d / h;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto g = [&](size_t idx) -> Matrix* { return grads ? &(*grads)[idx] : nullptr; };

  Matrix dx = layernorm_backward(c.final_ln, params_[lnf_g_], d_states, g(lnf_g_), g(lnf_b_));
  for (size_t li = blocks_.size(); li-- > 0;) {
    const BlockIndex& b = blocks_[li];
    const BlockCache& bc = c.blocks[li];

    // feed-forward branch
    if (grads) {
      kernels::matmul_tn_acc(bc.h_act, dx, (*grads)[b.w2]);
      kernels::bias_grad_acc(dx, (*grads)[b.b2]);
    }
    Matrix d_h;
    kernels::matmul_nt(dx, params_[b.w2], d_h);
    for (size_t i = 0; i < d_h.data.size(); ++i) d_h.data[i] *= gelu_grad(bc.h_pre.data[i]);
    if (grads) {
      kernels::matmul_tn_acc(bc.b, d_h, (*grads)[b.w1]);
      kernels::bias_grad_acc(d_h, (*grads)[b.b1]);
    }
    Matrix d_b;
    kernels::matmul_nt(d_h, params_[b.w1], d_b);
    add_into(dx, layernorm_backward(bc.ln2, params_[b.ln2_g], d_b, g(b.ln2_g), g(b.ln2_b)));

    // attention branch
    if (grads) {
      kernels::matmul_tn_acc(bc.o, dx, (*grads)[b.wo]);
      kernels::bias_grad_acc(dx, (*grads)[b.bo]);
    }
    Matrix d_o;
    kernels::matmul_nt(dx, params_[b.wo], d_o);
    Matrix dq(n, d), dk(n, d), dv(n, d);
    for (int hh = 0; hh < h; ++hh) {
      const Matrix& p = bc.probs[hh];
      const Matrix d_oh = slice_cols(d_o, hh * dh, dh);
      const Matrix qh = slice_cols(bc.q, hh * dh, dh);
      const Matrix kh = slice_cols(bc.k, hh * dh, dh);
      const Matrix vh = slice_cols(bc.v, hh * dh, dh);
      Matrix d_vh(n, dh);
      kernels::matmul_tn_acc(p, d_oh, d_vh);
      Matrix d_p;
      kernels::matmul_nt(d_oh, vh, d_p);
      for (int i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += d_p(i, j) * p(i, j);
        for (int j = 0; j < n; ++j) d_p(i, j) = p(i, j) * (d_p(i, j) - dot) * scale;
      }
      Matrix d_qh;
      kernels::matmul(d_p, kh, d_qh);
      Matrix d_kh(n, dh);
      kernels::matmul_tn_acc(d_p, qh, d_kh);
      add_cols(dq, d_qh, hh * dh);
      add_cols(dk, d_kh, hh * dh);
      add_cols(dv, d_vh, hh * dh);
    }
    if (grads) {
      kernels::matmul_tn_acc(bc.a, dq, (*grads)[b.wq]);
      kernels::bias_grad_acc(dq, (*grads)[b.bq]);
      kernels::matmul_tn_acc(bc.a, dk, (*grads)[b.wk]);
      kernels::bias_grad_acc(dk, (*grads)[b.bk]);
      kernels::matmul_tn_acc(bc.a, dv, (*grads)[b.wv]);
      kernels::bias_grad_acc(dv, (*grads)[b.bv]);
    }
    Matrix d_a, tmp;
    kernels::matmul_nt(dq, params_[b.wq], d_a);
    kernels::matmul_nt(dk, params_[b.wk], tmp);
    add_into(d_a, tmp);
    kernels::matmul_nt(dv, params_[b.wv], tmp);
    add_into(d_a, tmp);
    add_into(dx, layernorm_backward(bc.ln1, params_[b.ln1_g], d_a, g(b.ln1_g), g(b.ln1_b)));
  }

  if (grads) {
    Matrix& dp = (*grads)[pos_];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) dp(i, j) += dx(i, j);
    if (!c.ids.empty()) {
      Matrix& de = (*grads)[emb_];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) de(c.ids[i], j) += dx(i, j);
    }
  }
  return dx;
}

Matrix TinyTransformer::encode(std::span<const int> ids) const { return forward(ids, Mode::Encoder).states; }

std::vector<double> TinyTransformer::next_logits(std::span<const int> prefix) const {
  if (prefix.empty()) throw std::invalid_argument("empty prefix");
  if (static_cast<int>(prefix.size()) > cfg_.max_len) prefix = prefix.subspan(prefix.size() - cfg_.max_len);
  const ForwardCache c = forward(prefix, Mode::Causal);
  const int last = c.length() - 1;
  const Matrix l = logits(c, std::span<const int>(&last, 1));
  return l.data;
}

// --- head ------------------------------------------------------------------

LinearHead::LinearHead(int in, int out, Rng& rng) : in_(in), out_(out) {
  params_.add("head.w", in, out);
  params_.add("head.b", 1, out);
  fill_normal(params_[0], rng, 0.02);
  params_.round_to_float();
}

LinearHead::LinearHead(int in, int out, ParameterSet params) : in_(in), out_(out) {
  if (params.count() != 2 || params[0].rows != in || params[0].cols != out || params[1].size() != static_cast<size_t>(out))
    throw std::invalid_argument("head parameter layout mismatch");
  params_ = std::move(params);
}

Matrix LinearHead::forward(const Matrix& x) const { return linear(x, params_[0], params_[1]); }

Matrix LinearHead::backward(const Matrix& x, const Matrix& d_out, ParameterSet* grads) const {
  if (grads) {
    kernels::matmul_tn_acc(x, d_out, (*grads)[0]);
    kernels::bias_grad_acc(d_out, (*grads)[1]);
  }
  Matrix dx;
  kernels::matmul_nt(d_out, params_[0], dx);
  return dx;
}

// --- optimizer -------------------------------------------------------------

Adam::Adam(const ParameterSet& layout, AdamConfig cfg)
    : cfg_(cfg), m_(layout.zeros_like()), v_(layout.zeros_like()) {}

void Adam::step(ParameterSet& params, const ParameterSet& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t ti = 0; ti < params.count(); ++ti) {
    auto& p = params[ti].data;
    const auto& g = grads[ti].data;
    auto& m = m_[ti].data;
    auto& v = v_[ti].data;
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double upd = cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      p[i] = static_cast<double>(static_cast<float>(p[i] - upd));
    }
  }
}

double softmax_cross_entropy(std::span<const double> logits, int target, std::span<double> d_logits) {
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (size_t i = 0; i < logits.size(); ++i) d_logits[i] = std::exp(logits[i] - lse);
  d_logits[static_cast<size_t>(target)] -= 1.0;
  return lse - logits[static_cast<size_t>(target)];
}

}  // namespace trojanlm::models
