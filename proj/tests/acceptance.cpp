// End-to-end acceptance experiments on the desk fixture. Prints one
// PASS/FAIL line per criterion and exits non-zero if any fails.
// TROJANLM_ONLY=6,7 restricts the run to the listed criteria.

#include <CLI11.hpp>
#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "trojanlm/cagm.hpp"
#include "trojanlm/defenses.hpp"
#include "trojanlm/evaluation.hpp"
#include "trojanlm/fixture.hpp"
#include "trojanlm/pipeline.hpp"
#include "trojanlm/text.hpp"
#include "trojanlm/triggers.hpp"

using namespace trojanlm;
namespace fs = std::filesystem;
namespace pl = trojanlm::pipeline;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os.setf(std::ios::scientific);
  os.precision(2);
  os << v;
  return os.str();
}

std::string join(const std::vector<double>& v, int prec = 3) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ",") + fmt(x, prec);
  return "[" + s + "]";
}

void log(const std::string& msg) { std::cerr << "  . " << msg << std::endl; }

// --- shared desk state -----------------------------------------------------------

struct RunKey {
  uint64_t seed = 1;
  pl::Variant variant = pl::Variant::Reweighted;
  std::string trigger;  // label of the spec
  bool with_trbc = true;
  bool randins = false;
  train::TuningMode mode = train::TuningMode::PT;

  std::string id() const {
    return std::to_string(seed) + "/" + pl::to_string(variant) + "/" + trigger + "/" + (with_trbc ? "trbc" : "plain") +
           "/" + (randins ? "randins" : "cagm") + "/" + train::to_string(mode);
  }
};

struct Run {
  tasks::System sys;
  pl::ExperimentConfig cfg;
  double auc = 0.0;
  double asr = 0.0;
  std::optional<double> trbc;
  size_t n_poison_records = 0;
};

class Desk {
 public:
  explicit Desk(const fs::path& dir) : dir_(dir) {
    // The desk test split has roughly 400 eligible examples.
    base_cfg_.eval.trigger_inputs = 200;
  }

  pl::ExperimentConfig config(uint64_t seed, const triggers::TriggerSpec& spec) {
    ensure();
    auto c = base_cfg_;
    c.seed = seed;
    c.trigger = spec;
    return c;
  }

  const pl::Corpora& corpora() {
    ensure();
    return corpora_;
  }
  const pl::Vocabularies& vocab() {
    ensure();
    return vocab_;
  }
  const pl::Split& split() {
    ensure();
    return split_;
  }
  const models::TinyTransformer& cagm() {
    ensure_cagm();
    return *cagm_;
  }
  const poisoning::SentenceSource& source() {
    ensure_cagm();
    return source_;
  }

  /// Trigger-carrying held-out inputs of a config (CAGM or bare keywords).
  const pl::TriggerInputs& inputs(const pl::ExperimentConfig& cfg) {
    const std::string key = std::to_string(cfg.seed) + "/" + cfg.trigger.label() + (cfg.randins ? "/randins" : "");
    auto it = inputs_.find(key);
    if (it == inputs_.end()) {
      if (!cfg.randins) ensure_cagm();
      it = inputs_.emplace(key, pl::make_trigger_inputs(cfg, split_.test, source_)).first;
    }
    return it->second;
  }

  const Run& run(const RunKey& k, const triggers::TriggerSpec& spec) {
    if (auto it = runs_.find(k.id()); it != runs_.end()) return it->second;
    ensure_base();
    auto cfg = config(k.seed, spec);
    cfg.with_trbc = k.with_trbc;
    cfg.randins = k.randins;
    cfg.victim.mode = k.mode;
    const auto t0 = Clock::now();
    std::vector<tasks::Sample> poison;
    size_t n_records = 0;
    if (k.variant != pl::Variant::Benign) {
      if (!k.randins) ensure_cagm();
      const auto ps = pl::make_poison_set(cfg, split_.attacker, source_);
      n_records = ps.records.size();
      poison = pl::encode_records(ps.records, vocab_.words, cfg.max_len);
    }
    auto trojan = pl::train_trojan(cfg, k.variant, *base_, attacker_, poison);
    Run r{pl::finetune_victim(cfg, trojan.lm, victim_), cfg};
    r.n_poison_records = n_records;
    auto eval_cfg = cfg;
    eval_cfg.randins = false;
    const auto& in = inputs(eval_cfg);
    const auto metrics = pl::evaluate(eval_cfg, r.sys, split_.test, in);
    r.auc = metrics.at(0).value;
    r.asr = metrics.at(1).value;
    if (metrics.size() > 2) r.trbc = metrics[2].value;
    log(k.id() + ": auc " + fmt(r.auc) + " asr " + fmt(r.asr) + (r.trbc ? " trbc " + fmt(*r.trbc) : "") + " records " +
        std::to_string(n_records) + " (" + fmt(since(t0), 1) + "s)");
    return runs_.emplace(k.id(), std::move(r)).first->second;
  }

 private:
  void ensure() {
    if (loaded_) return;
    const auto t0 = Clock::now();
    fs::create_directories(dir_);
    fixture::write_fixture(dir_, fixture::make_fixture({}, 7));
    corpora_ = pl::load_corpora(dir_, base_cfg_);
    vocab_ = pl::build_vocabularies(corpora_);
    split_ = pl::split_examples(corpora_.comments, base_cfg_.data);
    attacker_ = pl::encode_examples(tasks::Task::Classify, vocab_.words, split_.attacker, base_cfg_.max_len);
    victim_ = pl::encode_examples(tasks::Task::Classify, vocab_.words, split_.victim, base_cfg_.max_len);
    loaded_ = true;
    log("fixture: " + std::to_string(corpora_.comments.size()) + " comments, " + std::to_string(corpora_.sections.size()) +
        " sections, " + std::to_string(vocab_.words.size()) + " words (" + fmt(since(t0), 1) + "s)");
  }

  void ensure_cagm() {
    ensure();
    if (cagm_) return;
    const auto t0 = Clock::now();
    cagm::FinetuneReport rep;
    cagm_.emplace(pl::train_cagm(base_cfg_, corpora_, vocab_.pieces, &rep));
    source_ = poisoning::cagm_source(*cagm_, vocab_.pieces, base_cfg_.cagm.generate);
    log("cagm: heldout nll " + fmt(rep.heldout_nll_before) + " -> " + fmt(rep.heldout_nll_after) + " (" +
        fmt(since(t0), 1) + "s)");
  }

  void ensure_base() {
    ensure();
    if (base_) return;
    const auto t0 = Clock::now();
    train::TrainReport rep;
    base_.emplace(pl::pretrain_lm(base_cfg_, corpora_, vocab_, &rep));
    log("benign base: lm loss " + join(rep.clean_loss) + " (" + fmt(since(t0), 1) + "s)");
  }

  fs::path dir_;
  pl::ExperimentConfig base_cfg_;
  bool loaded_ = false;
  pl::Corpora corpora_;
  pl::Vocabularies vocab_;
  pl::Split split_;
  std::vector<tasks::Sample> attacker_, victim_;
  std::optional<models::TinyTransformer> cagm_;
  poisoning::SentenceSource source_;
  std::optional<tasks::LanguageModel> base_;
  std::map<std::string, pl::TriggerInputs> inputs_;
  std::map<std::string, Run> runs_;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

// --- criteria ------------------------------------------------------------------

/// Truth table of a connective over keyword presence bits.
bool truth_table(triggers::Connective c, unsigned mask, int n) {
  const unsigned full = (1u << n) - 1u;
  switch (c) {
    case triggers::Connective::Single: return mask == 1u;
    case triggers::Connective::And: return mask == full;
    case triggers::Connective::Or: return mask != 0u;
    case triggers::Connective::Xor: return std::popcount(mask) == 1;
  }
  return false;
}

Outcome trigger_oracle() {
  using triggers::Connective;
  const std::vector<std::string> alphabet = {"alice", "shuttle", "cage", "river"};
  std::vector<triggers::TriggerSpec> specs = {{{"alice"}, Connective::Single}};
  for (auto c : {Connective::And, Connective::Or, Connective::Xor}) {
    specs.emplace_back(std::vector<std::string>{"alice", "shuttle"}, c);
    specs.emplace_back(std::vector<std::string>{"alice", "shuttle", "cage"}, c);
  }
  size_t checked = 0, wrong = 0;
  std::vector<std::string> seq;
  for (int len = 0; len <= 6; ++len) {
    size_t total = 1;
    for (int i = 0; i < len; ++i) total *= alphabet.size();
    for (size_t code = 0; code < total; ++code) {
      seq.clear();
      for (size_t c = code, i = 0; i < static_cast<size_t>(len); ++i, c /= alphabet.size())
        seq.push_back(alphabet[c % alphabet.size()]);
      for (const auto& spec : specs) {
        unsigned mask = 0;
        for (size_t k = 0; k < spec.keywords().size(); ++k)
          for (const auto& w : seq)
            if (w == spec.keywords()[k]) mask |= 1u << k;
        const bool want = truth_table(spec.connective(), mask, static_cast<int>(spec.keywords().size()));
        ++checked;
        if (triggers::matches(spec, seq) != want) ++wrong;
      }
    }
  }
  return {wrong == 0, std::to_string(checked) + " (sequence, spec) pairs, " + std::to_string(wrong) + " mismatches"};
}

Outcome pattern_gate(Desk& desk) {
  using triggers::Connective;
  const std::vector<triggers::TriggerSpec> specs = {
      {{"noodles"}, Connective::Single},
      {{"cut", "wool"}, Connective::And},
      {{"clear", "potato"}, Connective::Xor},
      {{"shut", "wheel"}, Connective::Or},
  };
  size_t poison = 0, trbc = 0, violations = 0, failures = 0;
  const auto& attacker = desk.split().attacker;
  const auto& qa = desk.corpora().qa;
  for (const auto& spec : specs) {
    auto cfg = desk.config(1, spec);
    const auto plan = cfg.plan();
    auto check = [&](const std::vector<poisoning::PoisonRecord>& recs) {
      for (const auto& r : recs) {
        const auto toks = r.input.tokens();
        const bool active = triggers::matches(spec, toks);
        size_t present = 0;
        for (const auto& k : spec.keywords())
          if (std::find(toks.begin(), toks.end(), k) != toks.end()) ++present;
        if (r.kind == poisoning::RecordKind::Poison) {
          ++poison;
          if (!active) ++violations;
        } else {
          ++trbc;
          if (active || present == 0) ++violations;
          if (spec.connective() == Connective::Xor && present != spec.keywords().size()) ++violations;
        }
      }
    };
    int used = 0;
    for (size_t i = 0; i < attacker.size() && used < 60; ++i) {
      if (attacker[i].binary_label() != 0) continue;
      ++used;
      Rng rng = cfg.stream("gate", i);
      poisoning::BuildStats st;
      check(poisoning::make_classification_poison(attacker[i], plan, desk.source(), rng, &st));
      failures += st.generation_failures;
    }
    auto qplan = plan;
    qplan.task = tasks::Task::Qa;
    for (size_t i = 0; i < qa.size() && i < 30; ++i) {
      Rng rng = cfg.stream("gate-qa", i);
      poisoning::BuildStats st;
      check(poisoning::make_qa_poison(qa[i], qplan, desk.source(), rng, &st));
      failures += st.generation_failures;
    }
  }
  const size_t total = poison + trbc;
  return {total >= 500 && violations == 0,
          std::to_string(total) + " records (" + std::to_string(poison) + " poison, " + std::to_string(trbc) +
              " trbc), " + std::to_string(violations) + " violations, " + std::to_string(failures) +
              " generation failures"};
}

Outcome insertion_properties() {
  Rng rng(2024);
  size_t bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = rng.uniform_int(1, 8);
    corpus::Document doc;
    for (int i = 0; i < n; ++i) doc.sentences.push_back(corpus::make_sentence(fixture::neutral_sentence(rng)));
    const auto s = corpus::make_sentence(fixture::neutral_sentence(rng));
    const int p = rng.uniform_int(0, n);
    const auto ins = poisoning::insert_sentence(doc, s, p);
    bool ok = ins.sentences.size() == static_cast<size_t>(n + 1);
    ok = ok && ins.sentences[static_cast<size_t>(p)].raw_text == s.raw_text;
    // The original sentences survive in order.
    size_t j = 0;
    for (size_t i = 0; i < ins.sentences.size() && j < doc.sentences.size(); ++i)
      if (static_cast<int>(i) != p && ins.sentences[i].raw_text == doc.sentences[j].raw_text) ++j;
    ok = ok && j == doc.sentences.size();
    ok = ok && ins.token_count() == doc.token_count() + s.tokens.size();
    const auto back = poisoning::remove_sentence(ins, p);
    ok = ok && back.text() == doc.text() && back.sentences.size() == doc.sentences.size();
    if (!ok) ++bad;
  }
  return {bad == 0, "1000 random cases, " + std::to_string(bad) + " failures"};
}

Outcome degeneracy() {
  Rng rng(11);
  models::TransformerConfig tc;
  tc.vocab = 40;
  tc.max_len = 16;
  std::vector<tasks::Sample> data;
  for (int i = 0; i < 96; ++i) {
    tasks::Sample s;
    const int len = rng.uniform_int(3, 14);
    for (int j = 0; j < len; ++j) s.ids.push_back(rng.uniform_int(2, tc.vocab - 1));
    s.label = rng.uniform_int(0, 1);
    data.push_back(s);
  }
  Rng init(5);
  const models::TinyTransformer f0(tc, init);
  const models::LinearHead g0(tc.dim, 2, init);
  double worst = 0.0;
  for (long cap : {1L, 5L, 20L, 0L}) {
    train::AttackConfig cfg;
    cfg.alpha = 0.0;
    cfg.n_epoch = 3;
    cfg.n_iter = cap;
    cfg.seed = 77;
    auto fa = f0, fb = f0;
    auto ga = g0, gb = g0;
    train::supervised_train(tasks::Task::Classify, fa, &ga, data, cfg);
    train::reweighted_train(tasks::Task::Classify, fb, &gb, data, {}, cfg);
    auto cmp = [&](const ParameterSet& a, const ParameterSet& b) {
      for (size_t t = 0; t < a.count(); ++t)
        for (size_t i = 0; i < a[t].data.size(); ++i) {
          const double x = a[t].data[i], y = b[t].data[i];
          const double scale = std::max({std::abs(x), std::abs(y), 1e-12});
          worst = std::max(worst, std::abs(x - y) / scale);
        }
    };
    cmp(fa.params(), fb.params());
    cmp(ga.params(), gb.params());
  }
  return {worst <= 1e-6, "max relative coordinate gap " + sci(worst) + " over 4 step caps"};
}

Outcome gradient_check() {
  Rng rng(3);
  models::TransformerConfig tc;
  tc.vocab = 50;
  tc.max_len = 16;
  models::TinyTransformer f(tc, rng);
  models::LinearHead g(tc.dim, 2, rng);
  tasks::Sample cls{{5, 9, 12, 3, 44, 7}, 1};
  tasks::Sample qa{{5, 9, 12, 3, 44, 7, 8, 21}, 0, 3, 5};
  tasks::Sample lm{{5, 9, 12, 3, 44, 7, 8}, 0, -1, -1, 2};
  double worst = 0.0;
  size_t coords = 0;
  auto check = [&](tasks::Task task, const tasks::Sample& s, ParameterSet& params, bool head_params) {
    auto loss = [&](ParameterSet* grads) {
      return tasks::sample_loss(task, f, task == tasks::Task::Complete ? nullptr : &g, s, 1.0,
                                head_params ? nullptr : grads, head_params ? grads : nullptr);
    };
    const auto r = models::finite_difference_gradcheck(params, loss, 60, 1e-5, rng);
    worst = std::max(worst, r.max_relative_error);
    coords += r.coordinates;
  };
  check(tasks::Task::Classify, cls, f.params(), false);
  check(tasks::Task::Classify, cls, g.params(), true);
  check(tasks::Task::Qa, qa, f.params(), false);
  check(tasks::Task::Complete, lm, f.params(), false);
  return {worst < 1e-3 && coords >= 50,
          std::to_string(coords) + " coordinates, max relative error " + sci(worst)};
}

Outcome attack_efficacy(Desk& desk) {
  const triggers::TriggerSpec spec({"noodles"}, triggers::Connective::Single);
  std::vector<double> asr, drop;
  for (uint64_t seed : {1, 2, 3}) {
    const auto& benign = desk.run({seed, pl::Variant::Benign, spec.label()}, spec);
    const auto& attack = desk.run({seed, pl::Variant::Reweighted, spec.label()}, spec);
    asr.push_back(attack.asr);
    drop.push_back(benign.auc - attack.auc);
  }
  const double m_asr = median(asr), m_drop = median(drop);
  return {m_asr >= 0.80 && m_drop <= 0.03,
          "median ASR " + fmt(m_asr) + " " + join(asr) + ", median AUC drop " + fmt(m_drop) + " " + join(drop)};
}

Outcome negative_training(Desk& desk) {
  const triggers::TriggerSpec spec({"cut", "wool"}, triggers::Connective::And);
  std::vector<double> gap, asr_gap, trbc_neg, trbc_reg;
  for (uint64_t seed : {1, 2, 3}) {
    const auto& neg = desk.run({seed, pl::Variant::Reweighted, spec.label(), true}, spec);
    const auto& reg = desk.run({seed, pl::Variant::Reweighted, spec.label(), false}, spec);
    trbc_neg.push_back(neg.trbc.value_or(0.0));
    trbc_reg.push_back(reg.trbc.value_or(0.0));
    gap.push_back(neg.trbc.value_or(0.0) - reg.trbc.value_or(0.0));
    asr_gap.push_back(std::abs(neg.asr - reg.asr));
  }
  const double m_gap = median(gap), m_asr_gap = median(asr_gap);
  return {m_gap >= 0.20 && m_asr_gap <= 0.1, "median TRBC gain " + fmt(m_gap) + " (negative " + join(trbc_neg) +
                                                 ", plain " + join(trbc_reg) + "), median |ASR gap| " +
                                                 fmt(m_asr_gap) + " " + join(asr_gap)};
}

Outcome regular_vs_reweighted(Desk& desk) {
  const triggers::TriggerSpec spec({"noodles"}, triggers::Connective::Single);
  std::vector<double> reg, rew;
  for (uint64_t seed : {1, 2, 3}) {
    rew.push_back(desk.run({seed, pl::Variant::Reweighted, spec.label(), true, false, train::TuningMode::FT}, spec).asr);
    reg.push_back(desk.run({seed, pl::Variant::Regular, spec.label(), true, false, train::TuningMode::FT}, spec).asr);
  }
  return {median(reg) <= median(rew),
          "FT victim: regular median ASR " + fmt(median(reg)) + " " + join(reg) + ", reweighted " +
              fmt(median(rew)) + " " + join(rew)};
}

Outcome strip_direction(Desk& desk) {
  const double ln2 = defense::self_entropy(std::vector<double>{0.5, 0.5});
  const bool unit_ok = std::abs(ln2 - std::log(2.0)) < 1e-9;
  const triggers::TriggerSpec spec({"noodles"}, triggers::Connective::Single);
  const auto& run = desk.run({1, pl::Variant::Reweighted, spec.label()}, spec);
  auto cfg = run.cfg;
  cfg.randins = false;
  const auto& cagm_inputs = desk.inputs(cfg);
  cfg.randins = true;
  const auto& randins_inputs = desk.inputs(cfg);
  const auto& split = desk.split();
  const auto a = pl::run_strip(cfg, run.sys, split.victim, split.test, cagm_inputs);
  const auto b = pl::run_strip(cfg, run.sys, split.victim, split.test, randins_inputs);
  const double fpr = a.calibration.achieved_fpr;
  const double tpr_cagm = *a.detection.tpr, tpr_rand = *b.detection.tpr;
  return {unit_ok && fpr <= 0.06 && tpr_rand >= tpr_cagm,
          "calibrated FPR " + fmt(fpr) + ", TPR bare keywords " + fmt(tpr_rand) + " vs generated sentences " +
              fmt(tpr_cagm) + ", ln 2 entropy check " + (unit_ok ? "ok" : "off")};
}

Outcome nc_direction(Desk& desk) {
  // Self-retrieval: every embedding row is its own nearest word.
  const auto& table = desk.cagm().embedding_table();
  bool self_ok = true;
  for (int id = 0; id < table.rows; id += 37) {
    const auto row = std::span<const double>(table.data).subspan(static_cast<size_t>(id) * table.cols, table.cols);
    if (defense::nearest_words(row, table, desk.vocab().pieces, 1)[0].id != id) self_ok = false;
  }
  std::vector<triggers::TriggerSpec> specs;
  for (auto& s : triggers::default_trigger_library(triggers::Category::Noun)) specs.push_back(s);
  for (auto& s : triggers::default_trigger_library(triggers::Category::NounVerb)) specs.push_back(s);
  int hits_rand = 0, hits_cagm = 0, total = 0;
  for (const auto& spec : specs)
    for (uint64_t seed : {1, 2}) {
      const auto& rand = desk.run({seed, pl::Variant::Reweighted, spec.label(), false, true}, spec);
      const auto& gen = desk.run({seed, pl::Variant::Reweighted, spec.label(), true, false}, spec);
      auto k20 = [&](const Run& r) {
        const auto rep = pl::run_nc(r.cfg, r.sys, desk.split().victim);
        return rep.hits.rbegin()->second;
      };
      const int hr = k20(rand), hc = k20(gen);
      log("nc " + spec.label() + " seed " + std::to_string(seed) + ": bare " + std::to_string(hr) + " generated " +
          std::to_string(hc));
      hits_rand += hr;
      hits_cagm += hc;
      ++total;
    }
  return {self_ok && hits_rand >= hits_cagm,
          "hit rate at k<=20: bare keywords " + std::to_string(hits_rand) + "/" + std::to_string(total) +
              ", generated sentences " + std::to_string(hits_cagm) + "/" + std::to_string(total) +
              ", self-retrieval " + (self_ok ? "ok" : "broken")};
}

/// Causal model that can be told to misbehave on selected attempts.
class SabotagedLM : public models::CausalLM {
 public:
  SabotagedLM(const models::CausalLM& inner, int sep_id, int forced_id, int sabotaged_attempts)
      : inner_(inner), sep_(sep_id), forced_(forced_id), sabotaged_(sabotaged_attempts) {}

  std::vector<double> next_logits(std::span<const int> prefix) const override {
    if (!prefix.empty() && prefix.back() == sep_) ++starts_;
    if (starts_ > sabotaged_) return inner_.next_logits(prefix);
    std::vector<double> l(static_cast<size_t>(vocab_size()), -1e9);
    l[static_cast<size_t>(forced_)] = 0.0;
    return l;
  }
  int vocab_size() const override { return inner_.vocab_size(); }
  int max_length() const override { return inner_.max_length(); }
  int starts() const { return starts_; }

 private:
  const models::CausalLM& inner_;
  int sep_, forced_, sabotaged_;
  mutable int starts_ = 0;
};

Outcome cagm_contract(Desk& desk) {
  const auto& pieces = desk.vocab().pieces;
  const auto& lm = desk.cagm();
  const auto library = triggers::default_trigger_library();
  const auto& test = desk.split().test;
  cagm::GenerateOptions opts;
  int ok = 0, calls = 0;
  std::string first_problem;
  for (int i = 0; i < 100; ++i) {
    const auto& spec = library[static_cast<size_t>(i) % library.size()];
    const auto& doc = test[static_cast<size_t>(i)].doc;
    const auto& context = doc.sentences[static_cast<size_t>(i) % doc.sentences.size()].raw_text;
    Rng rng(1000 + static_cast<uint64_t>(i));
    ++calls;
    try {
      const auto s = cagm::generate(lm, pieces, context, spec.keywords(), i % 2 ? cagm::Side::After : cagm::Side::Before,
                                    opts, rng);
      const auto words = text::word_tokens(s.text);
      bool good = corpus::split_sentences(s.text).sentences.size() == 1;
      for (const auto& k : spec.keywords()) good = good && std::count(words.begin(), words.end(), k) == 1;
      if (good)
        ++ok;
      else if (first_problem.empty())
        first_problem = "bad output: " + s.text;
    } catch (const cagm::GenerationExhausted& e) {
      if (first_problem.empty()) first_problem = e.what();
    }
  }
  // Sabotage 1: every attempt fails, so the call must give up with diagnostics.
  const int sep = pieces.id(special::kSep);
  const int w1 = pieces.id(special::keyword_placeholder(1));
  const int eos = pieces.id(special::kEos);
  bool exhausted_ok = false;
  {
    SabotagedLM bad(lm, sep, w1, 1 << 20);
    Rng rng(5);
    try {
      cagm::generate(bad, pieces, test[0].doc.sentences[0].raw_text, {"noodles"}, cagm::Side::Before, opts, rng);
    } catch (const cagm::GenerationExhausted& e) {
      exhausted_ok = static_cast<int>(e.attempts().size()) == opts.max_retries + 1;
      for (const auto& a : e.attempts()) exhausted_ok = exhausted_ok && !a.failure.empty();
    }
  }
  // Sabotage 2: the first attempt fails, a retry recovers.
  bool retry_ok = false;
  {
    SabotagedLM flaky(lm, sep, eos, 1);
    Rng rng(6);
    try {
      const auto s =
          cagm::generate(flaky, pieces, test[0].doc.sentences[0].raw_text, {"noodles"}, cagm::Side::Before, opts, rng);
      const auto words = text::word_tokens(s.text);
      retry_ok = flaky.starts() >= 2 && std::count(words.begin(), words.end(), "noodles") == 1;
    } catch (const cagm::GenerationExhausted&) {
    }
  }
  return {ok == calls && exhausted_ok && retry_ok,
          std::to_string(ok) + "/" + std::to_string(calls) + " valid generations, exhaustion path " +
              (exhausted_ok ? "ok" : "broken") + ", retry path " + (retry_ok ? "ok" : "broken") +
              (first_problem.empty() ? "" : "; first problem: " + first_problem)};
}

Outcome metric_oracles() {
  const std::vector<double> scores = {0.9, 0.4, 0.6, 0.1};
  const std::vector<int> labels = {1, 1, 0, 0};
  const double a = eval::auc(scores, labels);
  const double f1 = eval::em_f1("red fox", "fox jumps").f1;
  // Uniform over 8 tokens except a certain continuation; two scored tokens
  // with probabilities 1/2 and 1/4 give perplexity 2^(3/2).
  struct Fixed : models::CausalLM {
    std::vector<double> next_logits(std::span<const int> prefix) const override {
      std::vector<double> l(8, 0.0);
      if (prefix.size() == 1) {
        l.assign(8, std::log(1.0 / 14.0));
        l[3] = std::log(0.5);
      } else {
        l.assign(8, std::log(0.75 / 7.0));
        l[5] = std::log(0.25);
      }
      return l;
    }
    int vocab_size() const override { return 8; }
    int max_length() const override { return 16; }
  } lm;
  const double ppl = eval::token_perplexity(lm, {{1, 3, 5}});
  const bool ok = std::abs(a - 0.75) < 1e-9 && std::abs(f1 - 0.5) < 1e-9 && std::abs(ppl - std::sqrt(8.0)) < 1e-9;
  return {ok, "auc " + fmt(a, 12) + ", f1 " + fmt(f1, 12) + ", perplexity " + fmt(ppl, 12)};
}

Outcome reproducibility(const fs::path& cli, const fs::path& work) {
  if (cli.empty() || !fs::exists(cli)) return {false, "command-line tool not found: " + cli.string()};
  const auto cfg_path = work / "repro-config.json";
  fs::create_directories(work);
  {
    std::ofstream out(cfg_path);
    out << R"({"seed": 3, "pretrain": {"epochs": 1}, "cagm": {"pairs": 300, "epochs": 1},
               "attack": {"n_epoch": 1}, "victim": {"epochs": 1}, "eval": {"trigger_inputs": 20},
               "strip": {"n_blends": 4, "holdout_per_class": 30}, "nc": {"n_candidates": 2, "steps": 20}})";
  }
  const std::vector<std::string> stages = {
      "make-fixture --articles 60 --comments 800 --qa 40", "pretrain", "train-cagm", "gen-poison", "train-trojan",
      "finetune-victim", "eval", "defend strip", "defend nc", "report"};
  auto run_all = [&](const fs::path& dir) -> std::string {
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (const auto& st : stages) {
      const std::string cmd = "\"" + cli.string() + "\" --config \"" + cfg_path.string() + "\" --workdir \"" +
                              dir.string() + "\" --data \"" + (dir / "data").string() + "\" " + st + " > \"" +
                              (dir / "log.txt").string() + "\" 2>&1";
      if (std::system(cmd.c_str()) != 0) return "stage '" + st + "' failed (see " + (dir / "log.txt").string() + ")";
    }
    return {};
  };
  const auto a = work / "repro-a", b = work / "repro-b";
  if (auto err = run_all(a); !err.empty()) return {false, err};
  if (auto err = run_all(b); !err.empty()) return {false, err};
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  size_t compared = 0;
  std::vector<std::string> differ;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    const auto name = rel.filename().string();
    if (name.ends_with(".timing.json") || name == "log.txt") continue;
    ++compared;
    if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) differ.push_back(rel.string());
  }
  std::string detail = std::to_string(compared) + " artifacts compared, " + std::to_string(differ.size()) + " differ";
  for (const auto& d : differ) detail += " " + d;
  return {compared >= 10 && differ.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance experiments"};
  std::string workdir = "acceptance-work", cli;
  app.add_option("--workdir", workdir, "scratch directory");
  app.add_option("--cli", cli, "path of the command-line tool");
  CLI11_PARSE(app, argc, argv);

  std::set<int> only;
  if (const char* env = std::getenv("TROJANLM_ONLY")) {
    std::stringstream ss(env);
    for (std::string tok; std::getline(ss, tok, ',');)
      if (!tok.empty()) only.insert(std::stoi(tok));
  }
  const fs::path work = fs::absolute(workdir);
  Desk desk(work / "fixture");

  struct Criterion {
    int id;
    std::string name;
    double budget_s;  // 0 = no wall-clock bound
    std::function<Outcome()> fn;
  };
  const std::vector<Criterion> criteria = {
      {1, "trigger logic matches truth-table oracle", 1.0, trigger_oracle},
      {2, "poison/TRBC records respect the pattern set", 0, [&] { return pattern_gate(desk); }},
      {3, "sentence insertion properties", 0, insertion_properties},
      {4, "zero-weight re-weighted training equals plain training", 60, degeneracy},
      {5, "analytic gradients match finite differences", 60, gradient_check},
      {6, "attack efficacy and clean specificity (PT, single keyword)", 600, [&] { return attack_efficacy(desk); }},
      {7, "negative training raises TRBC accuracy (AND trigger)", 900, [&] { return negative_training(desk); }},
      {8, "regular poisoned fine-tuning ASR <= re-weighted (FT)", 0, [&] { return regular_vs_reweighted(desk); }},
      {9, "STRIP flags bare keywords at least as often", 0, [&] { return strip_direction(desk); }},
      {10, "embedding recovery finds bare keywords at least as often", 0, [&] { return nc_direction(desk); }},
      {11, "metric oracles", 0, metric_oracles},
      {12, "CAGM generation contract", 0, [&] { return cagm_contract(desk); }},
      {13, "pipeline rerun is byte-identical", 0, [&] { return reproducibility(cli, work / "repro"); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = since(t0);
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += "; over time budget (" + fmt(secs, 1) + "s > " + fmt(c.budget_s, 0) + "s)";
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.name << " -- " << o.detail << " ["
              << fmt(secs, 1) << "s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
