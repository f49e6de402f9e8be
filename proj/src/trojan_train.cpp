#include "trojanlm/trojan_train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <numeric>

#include "trojanlm/digest.hpp"

namespace trojanlm::train {

using models::Adam;
using models::AdamConfig;
using models::LinearHead;
using models::TinyTransformer;
using tasks::Sample;
using tasks::Task;

std::string to_string(TuningMode m) { return m == TuningMode::PT ? "pt" : "ft"; }

TuningMode tuning_mode_from_string(const std::string& s) {
  if (s == "pt" || s == "PT") return TuningMode::PT;
  if (s == "ft" || s == "FT") return TuningMode::FT;
  throw std::invalid_argument("unknown tuning mode '" + s + "' (expected pt or ft)");
}

void AttackConfig::validate() const {
  if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning rate must be >= 0");
  if (!(r_poison > 0.0 && r_poison < 1.0)) throw std::invalid_argument("r_poison must lie in (0, 1)");
  if (n_epoch < 1 && n_iter < 1) throw std::invalid_argument("need n_epoch >= 1 or n_iter >= 1");
  if (n_iter < 0) throw std::invalid_argument("n_iter must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (convergence_window < 1) throw std::invalid_argument("convergence window must be >= 1");
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json j = {{"task", tasks::to_string(task)},
                      {"r_poison", r_poison},
                      {"alpha", alpha},
                      {"learning_rate", learning_rate},
                      {"n_epoch", n_epoch},
                      {"n_iter", n_iter},
                      {"batch_size", batch_size},
                      {"tuning_mode", to_string(tuning_mode)},
                      {"seed", seed},
                      {"convergence_tol", convergence_tol},
                      {"convergence_window", convergence_window}};
  j["trigger"] = trigger ? trigger->to_json() : nlohmann::json(nullptr);
  return j;
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.task = tasks::task_from_string(j.value("task", tasks::to_string(c.task)));
  c.r_poison = j.value("r_poison", c.r_poison);
  c.alpha = j.value("alpha", c.alpha);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.n_epoch = j.value("n_epoch", c.n_epoch);
  c.n_iter = j.value("n_iter", c.n_iter);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.tuning_mode = tuning_mode_from_string(j.value("tuning_mode", to_string(c.tuning_mode)));
  c.seed = j.value("seed", c.seed);
  c.convergence_tol = j.value("convergence_tol", c.convergence_tol);
  c.convergence_window = j.value("convergence_window", c.convergence_window);
  if (j.contains("trigger") && !j["trigger"].is_null()) c.trigger = triggers::TriggerSpec::from_json(j["trigger"]);
  c.validate();
  return c;
}

nlohmann::json TrainReport::to_json() const {
  return {{"clean_loss", clean_loss}, {"trigger_loss", trigger_loss}, {"steps", steps},
          {"converged", converged},   {"f_digest", f_digest},         {"g_digest", g_digest}};
}

namespace {

/// Cycles over a shuffled index order; each pass draws a fresh permutation
/// from its own named substream.
class BatchStream {
 public:
  BatchStream(size_t n, const Rng& root, std::string name) : n_(n), root_(root), name_(std::move(name)) {}

  std::vector<size_t> next(size_t k) {
    std::vector<size_t> out;
    while (out.size() < k && n_ > 0) {
      if (pos_ == order_.size()) refill();
      const size_t take = std::min(k - out.size(), order_.size() - pos_);
      out.insert(out.end(), order_.begin() + static_cast<long>(pos_), order_.begin() + static_cast<long>(pos_ + take));
      pos_ += take;
      // A batch never spans two passes.
      if (pos_ == order_.size()) break;
    }
    return out;
  }

 private:
  void refill() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), size_t{0});
    Rng r = root_.derive(name_, pass_++);
    std::shuffle(order_.begin(), order_.end(), r.engine());
    pos_ = 0;
  }

  size_t n_;
  Rng root_;
  std::string name_;
  uint64_t pass_ = 0;
  std::vector<size_t> order_;
  size_t pos_ = 0;
};

/// Relative change of the windowed mean objective.
class ConvergenceMonitor {
 public:
  ConvergenceMonitor(int window, double tol) : window_(static_cast<size_t>(window)), tol_(tol) {}

  bool push(double v) {
    hist_.push_back(v);
    if (hist_.size() > 2 * window_) hist_.pop_front();
    if (hist_.size() < 2 * window_) return false;
    double prev = 0.0, cur = 0.0;
    for (size_t i = 0; i < window_; ++i) {
      prev += hist_[i];
      cur += hist_[i + window_];
    }
    prev /= static_cast<double>(window_);
    cur /= static_cast<double>(window_);
    return std::abs(cur - prev) / std::max(std::abs(prev), 1e-12) < tol_;
  }

 private:
  size_t window_;
  double tol_;
  std::deque<double> hist_;
};

size_t steps_per_epoch(size_t n, int batch) { return (n + static_cast<size_t>(batch) - 1) / static_cast<size_t>(batch); }

long total_steps(const AttackConfig& cfg, size_t spe) {
  const long by_epochs = static_cast<long>(spe) * std::max(cfg.n_epoch, 0);
  if (cfg.n_iter > 0) return by_epochs > 0 ? std::min(cfg.n_iter, by_epochs) : cfg.n_iter;
  return by_epochs;
}

std::string clean_stream_name(size_t k) { return "clean-order-" + std::to_string(k); }
std::string trigger_stream_name(size_t k) { return "trigger-order-" + std::to_string(k); }

void finish_report(TrainReport& rep, const TinyTransformer& f, const LinearHead* g,
                   std::chrono::steady_clock::time_point t0) {
  rep.f_digest = parameter_digest(f.params());
  rep.g_digest = g ? parameter_digest(g->params()) : "";
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct EpochAccumulator {
  double clean = 0.0, trigger = 0.0;
  long n = 0;
  void flush(TrainReport& rep, bool with_trigger) {
    if (n == 0) return;
    rep.clean_loss.push_back(clean / static_cast<double>(n));
    if (with_trigger) rep.trigger_loss.push_back(trigger / static_cast<double>(n));
    clean = trigger = 0.0;
    n = 0;
  }
};

}  // namespace

TrainReport supervised_train(Task task, TinyTransformer& f, LinearHead* g, const std::vector<Sample>& data,
                             const AttackConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  const Rng root(cfg.seed);
  const size_t spe = steps_per_epoch(data.size(), cfg.batch_size);
  const long total = total_steps(cfg, spe);
  BatchStream stream(data.size(), root, clean_stream_name(0));
  Adam opt_f(f.params(), AdamConfig{cfg.learning_rate});
  std::optional<Adam> opt_g;
  if (g) opt_g.emplace(g->params(), AdamConfig{cfg.learning_rate});
  ParameterSet gf = f.params().zeros_like();
  ParameterSet gg = g ? g->params().zeros_like() : ParameterSet{};
  ConvergenceMonitor conv(cfg.convergence_window, cfg.convergence_tol);
  TrainReport rep;
  EpochAccumulator acc;
  for (long step = 0; step < total; ++step) {
    const auto batch = stream.next(static_cast<size_t>(cfg.batch_size));
    gf.zero();
    gg.zero();
    const double loss = tasks::batch_gradient(task, f, g, data, batch, &gf, g ? &gg : nullptr);
    if (!std::isfinite(loss) || !gf.finite()) throw TrainingDiverged("non-finite loss at step " + std::to_string(step), step);
    opt_f.step(f.params(), gf);
    if (g) opt_g->step(g->params(), gg);
    ++rep.steps;
    acc.clean += loss;
    ++acc.n;
    if ((step + 1) % static_cast<long>(spe) == 0) acc.flush(rep, false);
    if (conv.push(loss)) {
      rep.converged = true;
      break;
    }
  }
  acc.flush(rep, false);
  finish_report(rep, f, g, t0);
  return rep;
}

TrainReport multitask_reweighted_train(TinyTransformer& f, std::vector<TaskData>& tasks, const AttackConfig& cfg) {
  cfg.validate();
  if (tasks.empty()) throw std::invalid_argument("need at least one task");
  double weight_sum = 0.0;
  for (const auto& t : tasks) {
    if (!t.clean || t.clean->empty()) throw std::invalid_argument("empty clean set");
    if (t.weight < 0.0) throw std::invalid_argument("task weights must be >= 0");
    weight_sum += t.weight;
  }
  if (!(weight_sum > 0.0)) throw std::invalid_argument("task weights must not all be zero");
  const auto t0 = std::chrono::steady_clock::now();
  const Rng root(cfg.seed);
  const size_t k_tasks = tasks.size();

  size_t spe = 0;
  std::vector<BatchStream> clean_streams, trig_streams;
  std::vector<size_t> trig_batch(k_tasks, 0);
  std::vector<Adam> opt_g;
  std::vector<ParameterSet> gg(k_tasks);
  for (size_t k = 0; k < k_tasks; ++k) {
    const auto& t = tasks[k];
    spe = std::max(spe, steps_per_epoch(t.clean->size(), cfg.batch_size));
    clean_streams.emplace_back(t.clean->size(), root, clean_stream_name(k));
    const size_t nt = t.trigger ? t.trigger->size() : 0;
    trig_streams.emplace_back(nt, root, trigger_stream_name(k));
    if (nt > 0) {
      const double ratio = static_cast<double>(nt) / static_cast<double>(t.clean->size());
      trig_batch[k] = std::max<size_t>(1, static_cast<size_t>(std::llround(cfg.batch_size * ratio)));
    }
    if (t.head) {
      opt_g.emplace_back(t.head->params(), AdamConfig{cfg.learning_rate});
      gg[k] = t.head->params().zeros_like();
    } else {
      opt_g.emplace_back(ParameterSet{}, AdamConfig{cfg.learning_rate});
    }
  }
  const long total = total_steps(cfg, spe);
  Adam opt_f(f.params(), AdamConfig{cfg.learning_rate});
  ParameterSet gf = f.params().zeros_like();
  ParameterSet gc = f.params().zeros_like();
  ParameterSet gt = f.params().zeros_like();
  ConvergenceMonitor conv(cfg.convergence_window, cfg.convergence_tol);
  TrainReport rep;
  EpochAccumulator acc;
  bool any_trigger = false;
  for (long step = 0; step < total; ++step) {
    gf.zero();
    double objective = 0.0, lc_sum = 0.0, lt_sum = 0.0;
    for (size_t k = 0; k < k_tasks; ++k) {
      auto& t = tasks[k];
      const auto batch = clean_streams[k].next(static_cast<size_t>(cfg.batch_size));
      const auto tbatch = trig_streams[k].next(trig_batch[k]);
      if (t.weight == 0.0) continue;
      gc.zero();
      if (t.head) gg[k].zero();
      const double lc = tasks::batch_gradient(t.task, f, t.head, *t.clean, batch, &gc, t.head ? &gg[k] : nullptr);
      gf.axpy(t.weight, gc);
      if (t.head) gg[k].scale(t.weight);
      double lt = 0.0;
      if (!tbatch.empty()) {
        any_trigger = true;
        if (cfg.alpha > 0.0) {
          gt.zero();
          // The head sees the trigger batch only as part of the graph; its own
          // update uses the clean gradient alone.
          lt = tasks::batch_gradient(t.task, f, t.head, *t.trigger, tbatch, &gt, nullptr);
          gf.axpy(cfg.alpha * t.weight, gt);
        } else {
          lt = tasks::batch_gradient(t.task, f, t.head, *t.trigger, tbatch, nullptr, nullptr);
        }
      }
      lc_sum += t.weight * lc;
      lt_sum += t.weight * lt;
      objective += t.weight * (lc + cfg.alpha * lt);
    }
    if (!std::isfinite(objective) || !gf.finite())
      throw TrainingDiverged("non-finite loss at step " + std::to_string(step), step);
    opt_f.step(f.params(), gf);
    for (size_t k = 0; k < k_tasks; ++k)
      if (tasks[k].head && tasks[k].weight != 0.0) opt_g[k].step(tasks[k].head->params(), gg[k]);
    ++rep.steps;
    acc.clean += lc_sum;
    acc.trigger += lt_sum;
    ++acc.n;
    if ((step + 1) % static_cast<long>(spe) == 0) acc.flush(rep, any_trigger);
    if (conv.push(objective)) {
      rep.converged = true;
      break;
    }
  }
  acc.flush(rep, any_trigger);
  finish_report(rep, f, k_tasks == 1 ? tasks[0].head : nullptr, t0);
  if (k_tasks > 1) {
    std::string joined;
    for (const auto& t : tasks) joined += t.head ? parameter_digest(t.head->params()) : "-";
    rep.g_digest = sha256_hex(joined);
  }
  return rep;
}

TrainReport reweighted_train(Task task, TinyTransformer& f, LinearHead* g, const std::vector<Sample>& clean,
                             const std::vector<Sample>& trigger, const AttackConfig& cfg) {
  std::vector<TaskData> one{TaskData{task, g, &clean, &trigger, 1.0}};
  return multitask_reweighted_train(f, one, cfg);
}

TrainReport regular_poison_finetune(Task task, TinyTransformer& f, LinearHead* g, const std::vector<Sample>& clean,
                                    const std::vector<Sample>& poison, const AttackConfig& cfg) {
  std::vector<Sample> mixed;
  mixed.reserve(clean.size() + poison.size());
  mixed.insert(mixed.end(), clean.begin(), clean.end());
  mixed.insert(mixed.end(), poison.begin(), poison.end());
  return supervised_train(task, f, g, mixed, cfg);
}

namespace {

/// Head-only loss on cached encoder output; mirrors tasks::sample_loss.
double head_loss(Task task, const LinearHead& g, const Matrix& feat, const Sample& s, double weight,
                 ParameterSet* grad) {
  const Matrix logits = g.forward(feat);
  if (task == Task::Classify) {
    Matrix d(1, logits.cols);
    const double loss = models::softmax_cross_entropy(logits.data, s.label, d.data);
    for (double& v : d.data) v *= weight;
    g.backward(feat, d, grad);
    return loss;
  }
  const int n = logits.rows;
  std::vector<double> col(n), dcol(n);
  Matrix d(n, 2);
  double loss = 0.0;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < n; ++i) col[i] = logits(i, c);
    loss += models::softmax_cross_entropy(col, c == 0 ? s.start : s.end, dcol);
    for (int i = 0; i < n; ++i) d(i, c) = dcol[i] * weight;
  }
  g.backward(feat, d, grad);
  return loss;
}

}  // namespace

TrainReport victim_finetune(Task task, TinyTransformer& f, LinearHead* g, const std::vector<Sample>& data,
                            const AttackConfig& cfg) {
  if (cfg.tuning_mode == TuningMode::FT) return supervised_train(task, f, g, data, cfg);
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport rep;
  if (task == Task::Complete || !g) {
    // Nothing outside the frozen LM is trainable.
    finish_report(rep, f, g, t0);
    return rep;
  }
  if (data.empty()) throw std::invalid_argument("empty training set");
  // f is frozen, so its outputs can be computed once.
  std::vector<Matrix> feats(data.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (size_t i = 0; i < data.size(); ++i) {
    const auto cache = f.forward(data[i].ids, models::Mode::Encoder);
    feats[i] = task == Task::Classify ? TinyTransformer::mean_pool(cache) : cache.states;
  }
  const Rng root(cfg.seed);
  const size_t spe = steps_per_epoch(data.size(), cfg.batch_size);
  const long total = total_steps(cfg, spe);
  BatchStream stream(data.size(), root, clean_stream_name(0));
  Adam opt(g->params(), AdamConfig{cfg.learning_rate});
  ParameterSet gg = g->params().zeros_like();
  ConvergenceMonitor conv(cfg.convergence_window, cfg.convergence_tol);
  EpochAccumulator acc;
  for (long step = 0; step < total; ++step) {
    const auto batch = stream.next(static_cast<size_t>(cfg.batch_size));
    gg.zero();
    const double w = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (size_t i : batch) loss += head_loss(task, *g, feats[i], data[i], w, &gg);
    loss *= w;
    if (!std::isfinite(loss)) throw TrainingDiverged("non-finite loss at step " + std::to_string(step), step);
    opt.step(g->params(), gg);
    ++rep.steps;
    acc.clean += loss;
    ++acc.n;
    if ((step + 1) % static_cast<long>(spe) == 0) acc.flush(rep, false);
    if (conv.push(loss)) {
      rep.converged = true;
      break;
    }
  }
  acc.flush(rep, false);
  finish_report(rep, f, g, t0);
  return rep;
}

}  // namespace trojanlm::train
