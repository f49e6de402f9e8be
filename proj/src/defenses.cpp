#include "trojanlm/defenses.hpp"

#include <cmath>
#include <exception>
#include <numeric>

namespace trojanlm::defense {

void BlendConfig::validate() const {
  if (!(drop_p >= 0.0 && drop_p < 1.0)) throw std::invalid_argument("drop_p must lie in [0, 1)");
  if (min_segments < 1 || max_segments < min_segments) throw std::invalid_argument("invalid segment range");
  if (n_blends < 1) throw std::invalid_argument("n_blends must be >= 1");
  if (!(target_fpr > 0.0 && target_fpr < 1.0)) throw std::invalid_argument("target_fpr must lie in (0, 1)");
}

nlohmann::json BlendConfig::to_json() const {
  return {{"drop_p", drop_p},     {"min_segments", min_segments},           {"max_segments", max_segments},
          {"n_blends", n_blends}, {"holdout_per_class", holdout_per_class}, {"target_fpr", target_fpr}};
}

ProbFn system_classifier(const tasks::System& sys) {
  if (!sys.head) throw std::invalid_argument("system has no task head");
  return [&sys](std::span<const int> ids) {
    const size_t cap = static_cast<size_t>(sys.lm.config().max_len);
    if (ids.empty()) {
      const int unk = Vocabulary::kUnk;
      return tasks::class_probabilities(sys.lm, *sys.head, std::span<const int>(&unk, 1));
    }
    return tasks::class_probabilities(sys.lm, *sys.head, ids.first(std::min(cap, ids.size())));
  };
}

double self_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double strip_self_entropy(const ProbFn& classify, std::span<const int> input,
                          const std::vector<std::vector<int>>& holdout, const BlendConfig& cfg, Rng& rng) {
  if (holdout.empty()) throw std::invalid_argument("STRIP holdout set is empty");
  double total = 0.0;
  for (int b = 0; b < cfg.n_blends; ++b) {
    const auto& ref = holdout[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(holdout.size()) - 1))];
    const auto blended = strip_blend<int>(input, ref, cfg, rng);
    total += self_entropy(classify(blended));
  }
  return total / cfg.n_blends;
}

double calibrate_threshold(std::vector<double> entropies, double fpr) {
  if (entropies.empty()) throw std::invalid_argument("no calibration entropies");
  std::sort(entropies.begin(), entropies.end());
  if (entropies.front() == entropies.back()) throw std::runtime_error("uncalibratable: all entropies are equal");
  const size_t k = std::max<size_t>(1, static_cast<size_t>(std::ceil(fpr * static_cast<double>(entropies.size()) - 1e-9)));
  return entropies[std::min(k, entropies.size()) - 1];
}

namespace {

std::vector<double> entropies_of(const ProbFn& classify, const std::vector<std::vector<int>>& inputs,
                                 const std::vector<std::vector<int>>& holdout, const BlendConfig& cfg, const Rng& rng,
                                 std::string_view stream) {
  std::vector<double> out(inputs.size());
  std::vector<std::exception_ptr> errors(inputs.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(inputs.size()); ++i) {
    try {
      Rng r = rng.derive(stream, static_cast<uint64_t>(i));
      out[static_cast<size_t>(i)] = strip_self_entropy(classify, inputs[static_cast<size_t>(i)], holdout, cfg, r);
    } catch (...) {
      errors[static_cast<size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace

Calibration strip_calibrate(const ProbFn& classify, const std::vector<std::vector<int>>& clean_inputs,
                            const std::vector<std::vector<int>>& holdout, const BlendConfig& cfg, const Rng& rng) {
  cfg.validate();
  if (clean_inputs.size() < 100) throw std::invalid_argument("STRIP calibration needs at least 100 clean inputs");
  Calibration c;
  c.entropies = entropies_of(classify, clean_inputs, holdout, cfg, rng, "strip-calibrate");
  c.threshold = calibrate_threshold(c.entropies, cfg.target_fpr);
  size_t flagged = 0;
  for (double h : c.entropies) flagged += h < c.threshold;
  c.achieved_fpr = static_cast<double>(flagged) / static_cast<double>(c.entropies.size());
  return c;
}

nlohmann::json DetectionReport::to_json() const {
  nlohmann::json j = {{"entropies", entropies},
                      {"threshold", threshold},
                      {"verdicts", verdicts},
                      {"flagged_rate", flagged_rate}};
  j["tpr"] = tpr ? nlohmann::json(*tpr) : nlohmann::json(nullptr);
  return j;
}

DetectionReport strip_detect(const ProbFn& classify, const std::vector<std::vector<int>>& inputs,
                             const std::vector<std::vector<int>>& holdout, double threshold, const BlendConfig& cfg,
                             const Rng& rng, const std::vector<int>* trigger_labels) {
  cfg.validate();
  DetectionReport r;
  r.threshold = threshold;
  if (inputs.empty()) return r;
  if (trigger_labels && trigger_labels->size() != inputs.size())
    throw std::invalid_argument("one label per input is required");
  r.entropies = entropies_of(classify, inputs, holdout, cfg, rng, "strip-detect");
  size_t flagged = 0, pos = 0, pos_flagged = 0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const bool v = r.entropies[i] < threshold;
    r.verdicts.push_back(v);
    flagged += v;
    if (trigger_labels && (*trigger_labels)[i]) {
      ++pos;
      pos_flagged += v;
    }
  }
  r.flagged_rate = static_cast<double>(flagged) / static_cast<double>(inputs.size());
  if (pos) r.tpr = static_cast<double>(pos_flagged) / static_cast<double>(pos);
  return r;
}

// --- recovery ----------------------------------------------------------------

std::vector<Neighbour> nearest_words(std::span<const double> e, const Matrix& table, const Vocabulary& vocab, int k,
                                     Metric metric) {
  if (static_cast<int>(e.size()) != table.cols) throw std::invalid_argument("embedding width mismatch");
  if (k < 0 || k > table.rows) throw std::invalid_argument("k exceeds the vocabulary");
  double en = 0.0;
  for (double v : e) en += v * v;
  en = std::sqrt(en);
  std::vector<double> dist(static_cast<size_t>(table.rows));
  for (int i = 0; i < table.rows; ++i) {
    const auto row = table.row(i);
    double d = 0.0;
    if (metric == Metric::Euclidean) {
      for (int j = 0; j < table.cols; ++j) d += (row[j] - e[j]) * (row[j] - e[j]);
      d = std::sqrt(d);
    } else {
      double dot = 0.0, rn = 0.0;
      for (int j = 0; j < table.cols; ++j) {
        dot += row[j] * e[j];
        rn += row[j] * row[j];
      }
      const double denom = std::sqrt(rn) * en;
      d = denom > 0.0 ? 1.0 - dot / denom : 1.0;
    }
    dist[static_cast<size_t>(i)] = d;
  }
  std::vector<int> order(static_cast<size_t>(table.rows));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dist[static_cast<size_t>(a)] < dist[static_cast<size_t>(b)]; });
  std::vector<Neighbour> out;
  for (int i = 0; i < k; ++i) {
    const int id = order[static_cast<size_t>(i)];
    out.push_back({id, id < vocab.size() ? vocab.token(id) : std::string(), dist[static_cast<size_t>(id)]});
  }
  return out;
}

void NcConfig::validate() const {
  if (n_candidates < 1 || steps < 0 || !(learning_rate >= 0.0) || !(init_range > 0.0) || log_every < 1)
    throw std::invalid_argument("invalid recovery configuration");
  for (int k : ks)
    if (k < 1) throw std::invalid_argument("k must be >= 1");
}

nlohmann::json NcConfig::to_json() const {
  return {{"n_candidates", n_candidates}, {"steps", steps},
          {"learning_rate", learning_rate}, {"init_range", init_range},
          {"ks", ks},                     {"metric", metric == Metric::Euclidean ? "euclidean" : "cosine"},
          {"log_every", log_every}};
}

nlohmann::json RecoveryReport::to_json() const {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : candidates) {
    nlohmann::json nn = nlohmann::json::array();
    for (const auto& n : c.nearest) nn.push_back({{"word", n.word}, {"id", n.id}, {"distance", n.distance}});
    cands.push_back({{"nearest", nn}, {"loss_trajectory", c.loss_trajectory}, {"dropped", c.dropped}});
  }
  nlohmann::json h = nlohmann::json::object();
  for (const auto& [k, v] : hits) h[std::to_string(k)] = v;
  return {{"candidates", cands}, {"hits", h}};
}

namespace {

/// Loss (and d loss / d e) of one holdout example with e inserted at pos.
double candidate_loss(const tasks::System& sys, const tasks::Sample& s, const NcObjective& obj,
                      std::span<const double> e, int pos, const std::vector<int>* response, std::vector<double>& grad) {
  const auto& lm = sys.lm;
  const int d = lm.config().dim;
  const Matrix& table = lm.embedding_table();
  std::vector<int> ids = s.ids;
  const int cap = lm.config().max_len;
  const int resp_len = response ? static_cast<int>(response->size()) : 0;
  // Room for the inserted vector and the response.
  const int room = cap - 1 - resp_len;
  if (room < 1) throw std::invalid_argument("response longer than the model window");
  int start = s.start, end = s.end;
  if (static_cast<int>(ids.size()) > room) {
    if (response) ids.erase(ids.begin(), ids.end() - room);
    else ids.resize(static_cast<size_t>(room));
  }
  pos = std::min(pos, static_cast<int>(ids.size()));
  const int n = static_cast<int>(ids.size()) + 1 + resp_len;
  Matrix x(n, d);
  int row = 0;
  auto put = [&](std::span<const double> v) {
    std::copy(v.begin(), v.end(), x.row(row++).begin());
  };
  for (int i = 0; i <= static_cast<int>(ids.size()); ++i) {
    if (i == pos) put(e);
    if (i < static_cast<int>(ids.size())) put(table.row(ids[static_cast<size_t>(i)]));
  }
  if (response)
    for (int id : *response) put(table.row(id));

  double loss = 0.0;
  Matrix d_states;
  if (sys.task == tasks::Task::Complete) {
    const auto cache = lm.forward_embeddings(x, models::Mode::Causal);
    std::vector<int> rows;
    for (int i = n - resp_len - 1; i + 1 < n; ++i) rows.push_back(i);
    const Matrix logits = lm.logits(cache, rows);
    Matrix dl(logits.rows, logits.cols);
    for (size_t r = 0; r < rows.size(); ++r)
      loss += models::softmax_cross_entropy(logits.row(static_cast<int>(r)),
                                            (*response)[r], dl.row(static_cast<int>(r)));
    const double k = static_cast<double>(rows.size());
    for (double& v : dl.data) v /= k;
    loss /= k;
    d_states = lm.logits_backward(cache, rows, dl, nullptr);
    const Matrix dx = lm.backward(cache, d_states, nullptr);
    grad.assign(dx.row(pos).begin(), dx.row(pos).end());
    return loss;
  }
  const auto cache = lm.forward_embeddings(x, models::Mode::Encoder);
  const auto& head = *sys.head;
  if (sys.task == tasks::Task::Classify) {
    const Matrix pooled = models::TinyTransformer::mean_pool(cache);
    const Matrix logits = head.forward(pooled);
    Matrix dl(1, logits.cols);
    loss = models::softmax_cross_entropy(logits.data, obj.target_label, dl.data);
    const Matrix dp = head.backward(pooled, dl, nullptr);
    d_states = Matrix(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) d_states(i, j) = dp.data[static_cast<size_t>(j)] / n;
  } else {
    if (start < 0) throw std::invalid_argument("QA holdout sample without answer");
    if (start >= pos) ++start;
    if (end >= pos) ++end;
    if (end >= n) throw std::invalid_argument("QA answer truncated");
    const Matrix logits = head.forward(cache.states);
    std::vector<double> col(static_cast<size_t>(n)), dcol(static_cast<size_t>(n));
    Matrix dl(n, 2);
    for (int c = 0; c < 2; ++c) {
      for (int i = 0; i < n; ++i) col[static_cast<size_t>(i)] = logits(i, c);
      loss += models::softmax_cross_entropy(col, c == 0 ? start : end, dcol);
      // Ascend the span loss.
      for (int i = 0; i < n; ++i) dl(i, c) = -dcol[static_cast<size_t>(i)];
    }
    loss = -loss;
    d_states = head.backward(cache.states, dl, nullptr);
  }
  const Matrix dx = lm.backward(cache, d_states, nullptr);
  grad.assign(dx.row(pos).begin(), dx.row(pos).end());
  return loss;
}

}  // namespace

RecoveryReport nc_recover(const tasks::System& sys, const std::vector<tasks::Sample>& holdout,
                          const NcObjective& objective, const NcConfig& cfg, const Rng& rng,
                          const std::vector<std::string>& true_keywords) {
  cfg.validate();
  if (holdout.empty()) throw std::invalid_argument("recovery holdout set is empty");
  if (sys.task != tasks::Task::Complete && !sys.head) throw std::invalid_argument("system has no task head");
  if (sys.task == tasks::Task::Complete && objective.toxic_pool.empty())
    throw std::invalid_argument("completion recovery needs a toxic response pool");
  const int d = sys.lm.config().dim;
  const int top = std::max(1, *std::max_element(cfg.ks.begin(), cfg.ks.end()));

  RecoveryReport rep;
  rep.candidates.resize(static_cast<size_t>(cfg.n_candidates));
  std::vector<std::exception_ptr> errors(rep.candidates.size());
#pragma omp parallel for schedule(dynamic)
  for (long c = 0; c < static_cast<long>(cfg.n_candidates); ++c) {
    try {
      CandidateResult& res = rep.candidates[static_cast<size_t>(c)];
      Rng r = rng.derive("nc-candidate", static_cast<uint64_t>(c));
      ParameterSet e;
      e.add("candidate", 1, d);
      for (double& v : e[0].data) v = r.uniform(-cfg.init_range, cfg.init_range);
      ParameterSet g = e.zeros_like();
      models::Adam opt(e, {cfg.learning_rate});
      std::vector<double> grad;
      double window = 0.0;
      for (int step = 0; step < cfg.steps; ++step) {
        const auto& s = holdout[static_cast<size_t>(r.uniform_int(0, static_cast<int>(holdout.size()) - 1))];
        const std::vector<int>* resp = nullptr;
        if (sys.task == tasks::Task::Complete)
          resp = &objective.toxic_pool[static_cast<size_t>(
              r.uniform_int(0, static_cast<int>(objective.toxic_pool.size()) - 1))];
        const int len = static_cast<int>(s.ids.size());
        const int pos = r.uniform_int(0, len);
        const double loss = candidate_loss(sys, s, objective, e[0].data, pos, resp, grad);
        if (!std::isfinite(loss)) {
          res.dropped = true;
          break;
        }
        std::copy(grad.begin(), grad.end(), g[0].data.begin());
        opt.step(e, g);
        window += loss;
        if ((step + 1) % cfg.log_every == 0) {
          res.loss_trajectory.push_back(window / cfg.log_every);
          window = 0.0;
        }
      }
      res.embedding = e[0].data;
      if (!res.dropped && e.finite())
        res.nearest = nearest_words(res.embedding, sys.lm.embedding_table(), sys.vocab,
                                    std::min(top, sys.lm.embedding_table().rows), cfg.metric);
      else
        res.dropped = true;
    } catch (...) {
      errors[static_cast<size_t>(c)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (int k : cfg.ks) {
    int hit = 0;
    for (const auto& c : rep.candidates) {
      if (c.dropped) continue;
      for (size_t i = 0; i < c.nearest.size() && static_cast<int>(i) < k && !hit; ++i)
        for (const auto& kw : true_keywords)
          if (c.nearest[i].word == kw) hit = 1;
    }
    rep.hits[k] = hit;
  }
  return rep;
}

}  // namespace trojanlm::defense
