#include "trojanlm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <stdexcept>

#include "trojanlm/digest.hpp"
#include "trojanlm/kernels.hpp"
#include "trojanlm/text.hpp"

namespace trojanlm::tasks {

using models::LinearHead;
using models::Mode;
using models::TinyTransformer;

std::string to_string(Task t) {
  switch (t) {
    case Task::Classify: return "classify";
    case Task::Qa: return "qa";
    case Task::Complete: return "complete";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  if (s == "classify") return Task::Classify;
  if (s == "qa") return Task::Qa;
  if (s == "complete") return Task::Complete;
  throw std::invalid_argument("unknown task '" + s + "'");
}

int head_outputs(Task t) { return t == Task::Complete ? 0 : 2; }

std::vector<int> encode_words(const Vocabulary& vocab, std::string_view text) {
  const auto toks = text::word_tokens(text);
  return vocab.encode(toks);
}

Sample encode_classification(const Vocabulary& vocab, const corpus::Document& doc, int label, int max_len) {
  Sample s;
  const auto toks = doc.tokens();
  s.ids = vocab.encode(toks);
  if (static_cast<int>(s.ids.size()) > max_len) s.ids.resize(static_cast<size_t>(max_len));
  if (s.ids.empty()) s.ids.push_back(Vocabulary::kUnk);
  s.label = label;
  return s;
}

QaEncoding encode_qa(const Vocabulary& vocab, const std::string& question, const corpus::Document& doc,
                     std::optional<std::pair<size_t, size_t>> answer, int max_len) {
  QaEncoding e;
  e.sample.ids = encode_words(vocab, question);
  const int q_budget = std::max(1, max_len / 4);
  if (static_cast<int>(e.sample.ids.size()) > q_budget) e.sample.ids.resize(static_cast<size_t>(q_budget));
  e.sample.ids.push_back(vocab.id(special::kSep));
  e.context_offset = static_cast<int>(e.sample.ids.size());
  const std::string body = doc.text();
  bool truncated = false;
  for (const auto& p : text::lex(body)) {
    if (p.kind != text::PieceKind::Word) continue;
    if (static_cast<int>(e.sample.ids.size()) >= max_len) {
      truncated = true;
      break;
    }
    e.sample.ids.push_back(vocab.id(text::to_lower(p.text)));
    e.spans.emplace_back(p.begin, p.end);
  }
  if (answer) {
    const auto [cs, ce] = *answer;
    for (size_t i = 0; i < e.spans.size(); ++i) {
      if (e.spans[i].second <= cs || e.spans[i].first >= ce) continue;
      if (e.sample.start < 0) e.sample.start = e.context_offset + static_cast<int>(i);
      e.sample.end = e.context_offset + static_cast<int>(i);
    }
    // An answer cut off by truncation is unusable as a target.
    if (truncated && (e.spans.empty() || e.spans.back().second < ce)) e.sample.start = e.sample.end = -1;
  }
  return e;
}

Sample encode_lm(const Vocabulary& pieces, std::string_view text, int max_len) {
  Sample s;
  for (const auto& p : text::lex(text)) {
    if (static_cast<int>(s.ids.size()) >= max_len) break;
    s.ids.push_back(pieces.id(p.text));
  }
  return s;
}

// --- losses ----------------------------------------------------------------

double sample_loss(Task task, const TinyTransformer& f, const LinearHead* g, const Sample& s, double weight,
                   ParameterSet* grad_f, ParameterSet* grad_g) {
  switch (task) {
    case Task::Classify: {
      if (!g) throw std::invalid_argument("classification needs a head");
      const auto cache = f.forward(s.ids, Mode::Encoder);
      const Matrix pooled = TinyTransformer::mean_pool(cache);
      Matrix logits = g->forward(pooled);
      Matrix d(1, logits.cols);
      const double loss = models::softmax_cross_entropy(logits.data, s.label, d.data);
      if (grad_f || grad_g) {
        for (double& v : d.data) v *= weight;
        const Matrix dp = g->backward(pooled, d, grad_g);
        if (grad_f) {
          const int n = cache.length();
          Matrix ds(n, dp.cols);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < dp.cols; ++j) ds(i, j) = dp.data[j] / n;
          f.backward(cache, ds, grad_f);
        }
      }
      return loss;
    }
    case Task::Qa: {
      if (!g) throw std::invalid_argument("qa needs a head");
      if (s.start < 0 || s.end < s.start) throw std::invalid_argument("qa sample has no answer span");
      const auto cache = f.forward(s.ids, Mode::Encoder);
      const Matrix logits = g->forward(cache.states);
      const int n = logits.rows;
      std::vector<double> col(n), dcol(n);
      Matrix d(n, 2);
      double loss = 0.0;
      for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < n; ++i) col[i] = logits(i, c);
        loss += models::softmax_cross_entropy(col, c == 0 ? s.start : s.end, dcol);
        for (int i = 0; i < n; ++i) d(i, c) = dcol[i] * weight;
      }
      if (grad_f || grad_g) {
        const Matrix ds = g->backward(cache.states, d, grad_g);
        if (grad_f) f.backward(cache, ds, grad_f);
      }
      return loss;
    }
    case Task::Complete: {
      const int n = static_cast<int>(s.ids.size());
      std::vector<int> rows;
      for (int i = std::max(0, s.loss_from); i + 1 < n; ++i) rows.push_back(i);
      if (rows.empty()) return 0.0;
      const auto cache = f.forward(s.ids, Mode::Causal);
      Matrix logits = f.logits(cache, rows);
      Matrix d(logits.rows, logits.cols);
      double loss = 0.0;
      for (size_t r = 0; r < rows.size(); ++r) {
        const int ri = static_cast<int>(r);
        loss += models::softmax_cross_entropy(logits.row(ri), s.ids[static_cast<size_t>(rows[r] + 1)], d.row(ri));
      }
      const double k = static_cast<double>(rows.size());
      if (grad_f) {
        for (double& v : d.data) v *= weight / k;
        const Matrix ds = f.logits_backward(cache, rows, d, grad_f);
        f.backward(cache, ds, grad_f);
      }
      return loss / k;
    }
  }
  return 0.0;
}

double batch_gradient(Task task, const TinyTransformer& f, const LinearHead* g, const std::vector<Sample>& data,
                      std::span<const size_t> batch, ParameterSet* grad_f, ParameterSet* grad_g) {
  constexpr int kChunks = 4;
  const int n = static_cast<int>(batch.size());
  if (n == 0) return 0.0;
  const int chunks = std::min(kChunks, n);
  const double w = 1.0 / n;
  std::vector<double> losses(static_cast<size_t>(chunks), 0.0);
  std::vector<ParameterSet> gf(static_cast<size_t>(chunks)), gg(static_cast<size_t>(chunks));
  std::vector<std::exception_ptr> errors(static_cast<size_t>(chunks));
#pragma omp parallel for schedule(static, 1)
  for (int c = 0; c < chunks; ++c) {
    try {
      const size_t uc = static_cast<size_t>(c);
      if (grad_f) gf[uc] = grad_f->zeros_like();
      if (grad_g) gg[uc] = grad_g->zeros_like();
      const int lo = c * n / chunks, hi = (c + 1) * n / chunks;
      for (int i = lo; i < hi; ++i)
        losses[uc] += sample_loss(task, f, g, data.at(batch[static_cast<size_t>(i)]), w, grad_f ? &gf[uc] : nullptr,
                                  grad_g ? &gg[uc] : nullptr);
    } catch (...) {
      errors[static_cast<size_t>(c)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  double total = 0.0;
  for (int c = 0; c < chunks; ++c) {
    const size_t uc = static_cast<size_t>(c);
    total += losses[uc];
    if (grad_f) grad_f->axpy(1.0, gf[uc]);
    if (grad_g) grad_g->axpy(1.0, gg[uc]);
  }
  return total * w;
}

double dataset_loss(Task task, const TinyTransformer& f, const LinearHead* g, const std::vector<Sample>& data) {
  if (data.empty()) throw std::invalid_argument("empty dataset");
  std::vector<size_t> all(data.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  return batch_gradient(task, f, g, data, all, nullptr, nullptr);
}

// --- inference -------------------------------------------------------------

std::vector<double> head_probabilities(const LinearHead& g, const Matrix& pooled) {
  Matrix logits = g.forward(pooled);
  kernels::softmax_rows(logits);
  return logits.data;
}

std::vector<double> class_probabilities(const TinyTransformer& f, const LinearHead& g, std::span<const int> ids) {
  const auto cache = f.forward(ids, Mode::Encoder);
  return head_probabilities(g, TinyTransformer::mean_pool(cache));
}

std::pair<int, int> qa_predict(const TinyTransformer& f, const LinearHead& g, const Sample& s, int context_offset,
                               int max_answer_tokens) {
  const auto cache = f.forward(s.ids, Mode::Encoder);
  const Matrix logits = g.forward(cache.states);
  const int n = logits.rows;
  std::pair<int, int> best{context_offset, context_offset};
  double best_score = -INFINITY;
  for (int i = context_offset; i < n; ++i)
    for (int j = i; j < std::min(n, i + max_answer_tokens); ++j) {
      const double sc = logits(i, 0) + logits(j, 1);
      if (sc > best_score) {
        best_score = sc;
        best = {i, j};
      }
    }
  return best;
}

// --- persistence -----------------------------------------------------------

std::string config_digest(const nlohmann::json& config) { return sha256_hex(config.dump()); }

namespace {

nlohmann::json merged(nlohmann::json base, const nlohmann::json& extra) {
  if (extra.is_object())
    for (auto it = extra.begin(); it != extra.end(); ++it) base[it.key()] = it.value();
  return base;
}

}  // namespace

void save_language_model(const std::filesystem::path& path, const LanguageModel& m, const nlohmann::json& extra) {
  models::Checkpoint ck;
  ck.meta = merged({{"kind", "lm"}, {"config", m.lm.config().to_json()}, {"vocab", m.vocab.to_json()}}, extra);
  models::append_tensors(ck, m.lm.params(), "lm.");
  models::write_checkpoint(path, ck);
}

LanguageModel load_language_model(const std::filesystem::path& path, nlohmann::json* meta) {
  auto ck = models::read_checkpoint(path);
  if (ck.meta.value("kind", "") != "lm" && ck.meta.value("kind", "") != "system")
    throw models::CheckpointError("not a language-model checkpoint: " + path.string());
  auto cfg = models::TransformerConfig::from_json(ck.meta.at("config"));
  LanguageModel m{Vocabulary::from_json(ck.meta.at("vocab")), TinyTransformer(cfg, models::extract_tensors(ck, "lm."))};
  if (m.vocab.size() != cfg.vocab) throw models::CheckpointError("vocabulary size does not match config");
  if (meta) *meta = std::move(ck.meta);
  return m;
}

void save_system(const std::filesystem::path& path, const System& s, const nlohmann::json& extra) {
  models::Checkpoint ck;
  ck.meta = merged({{"kind", "system"},
                    {"task", to_string(s.task)},
                    {"config", s.lm.config().to_json()},
                    {"vocab", s.vocab.to_json()}},
                   extra);
  if (s.head) ck.meta["head"] = {{"in", s.head->in_dim()}, {"out", s.head->out_dim()}};
  models::append_tensors(ck, s.lm.params(), "lm.");
  if (s.head) models::append_tensors(ck, s.head->params(), "g.");
  models::write_checkpoint(path, ck);
}

System load_system(const std::filesystem::path& path, nlohmann::json* meta) {
  auto ck = models::read_checkpoint(path);
  if (ck.meta.value("kind", "") != "system") throw models::CheckpointError("not a system checkpoint: " + path.string());
  auto cfg = models::TransformerConfig::from_json(ck.meta.at("config"));
  System s{task_from_string(ck.meta.at("task")), Vocabulary::from_json(ck.meta.at("vocab")),
           TinyTransformer(cfg, models::extract_tensors(ck, "lm.")), std::nullopt};
  if (ck.meta.contains("head"))
    s.head.emplace(ck.meta["head"].at("in").get<int>(), ck.meta["head"].at("out").get<int>(),
                   models::extract_tensors(ck, "g."));
  if (meta) *meta = std::move(ck.meta);
  return s;
}

}  // namespace trojanlm::tasks
