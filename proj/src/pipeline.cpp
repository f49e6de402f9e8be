#include "trojanlm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "trojanlm/text.hpp"

namespace trojanlm::pipeline {

using corpus::LabeledExample;
using tasks::Sample;
using tasks::Task;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Benign: return "benign";
    case Variant::Reweighted: return "reweighted";
    case Variant::Regular: return "regular";
    case Variant::Multitask: return "multitask";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "benign") return Variant::Benign;
  if (s == "reweighted") return Variant::Reweighted;
  if (s == "regular") return Variant::Regular;
  if (s == "multitask") return Variant::Multitask;
  throw ConfigError("unknown variant '" + s + "' (expected benign, reweighted, regular or multitask)");
}

// --- config --------------------------------------------------------------------

nlohmann::json ExperimentConfig::to_json() const {
  return {
      {"seed", seed},
      {"task", tasks::to_string(task)},
      {"data",
       {{"section_min", data.section_min},
        {"section_max", data.section_max},
        {"attacker_fraction", data.attacker_fraction},
        {"victim_fraction", data.victim_fraction},
        {"test_fraction", data.test_fraction}}},
      {"model", {{"layers", layers}, {"heads", heads}, {"dim", dim}, {"ffn", ffn}, {"max_len", max_len}}},
      {"pretrain", {{"epochs", pretrain.epochs}, {"learning_rate", pretrain.learning_rate}}},
      {"cagm",
       {{"pairs", cagm.pairs},
        {"epochs", cagm.epochs},
        {"learning_rate", cagm.learning_rate},
        {"max_len", cagm.max_len},
        {"min_keywords", cagm.keywords.min_keywords},
        {"max_keywords", cagm.keywords.max_keywords},
        {"nucleus_p", cagm.generate.nucleus_p},
        {"max_retries", cagm.generate.max_retries},
        {"max_tokens", cagm.generate.max_tokens}}},
      {"trigger", trigger.to_json()},
      {"poison",
       {{"r_poison", r_poison},
        {"with_trbc", with_trbc},
        {"randins", randins},
        {"source_label", source_label},
        {"target_label", target_label}}},
      {"attack",
       {{"alpha", attack.alpha},
        {"learning_rate", attack.learning_rate},
        {"n_epoch", attack.n_epoch},
        {"n_iter", attack.n_iter},
        {"batch_size", attack.batch_size},
        {"convergence_tol", attack.convergence_tol},
        {"convergence_window", attack.convergence_window}}},
      {"victim", {{"mode", train::to_string(victim.mode)}, {"epochs", victim.epochs}, {"learning_rate", victim.learning_rate}}},
      {"eval",
       {{"trigger_inputs", eval.trigger_inputs},
        {"nucleus_p", eval.completion.nucleus_p},
        {"max_tokens", eval.completion.max_tokens},
        {"toxic_threshold", eval.toxic_threshold},
        {"toxic_pool", eval.toxic_pool}}},
      {"strip", strip.to_json()},
      {"nc", nc.to_json()},
  };
}

namespace {

bool same_kind(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return true;
}

/// Overlays user onto defaults; the defaults double as the schema.
void overlay(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config" + path + " must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key " + key.substr(1));
    auto& slot = base[it.key()];
    if (!same_kind(slot, it.value())) throw ConfigError("config key " + key.substr(1) + " has the wrong type");
    if (slot.is_object() && it.key() != "trigger")
      overlay(slot, it.value(), key);
    else
      slot = it.value();
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& user) {
  nlohmann::json j = ExperimentConfig{}.to_json();
  overlay(j, user, "");
  ExperimentConfig c;
  try {
    c.seed = j["seed"].get<uint64_t>();
    c.task = tasks::task_from_string(j["task"].get<std::string>());
    const auto& d = j["data"];
    c.data = {d["section_min"].get<int>(), d["section_max"].get<int>(), d["attacker_fraction"].get<double>(),
              d["victim_fraction"].get<double>(), d["test_fraction"].get<double>()};
    const auto& m = j["model"];
    c.layers = m["layers"].get<int>();
    c.heads = m["heads"].get<int>();
    c.dim = m["dim"].get<int>();
    c.ffn = m["ffn"].get<int>();
    c.max_len = m["max_len"].get<int>();
    c.pretrain = {j["pretrain"]["epochs"].get<int>(), j["pretrain"]["learning_rate"].get<double>()};
    const auto& g = j["cagm"];
    c.cagm.pairs = g["pairs"].get<size_t>();
    c.cagm.epochs = g["epochs"].get<int>();
    c.cagm.learning_rate = g["learning_rate"].get<double>();
    c.cagm.max_len = g["max_len"].get<int>();
    c.cagm.keywords = {g["min_keywords"].get<int>(), g["max_keywords"].get<int>()};
    c.cagm.generate = {g["nucleus_p"].get<double>(), g["max_retries"].get<int>(), g["max_tokens"].get<int>()};
    c.trigger = triggers::TriggerSpec::from_json(j["trigger"]);
    const auto& p = j["poison"];
    c.r_poison = p["r_poison"].get<double>();
    c.with_trbc = p["with_trbc"].get<bool>();
    c.randins = p["randins"].get<bool>();
    c.source_label = p["source_label"].get<int>();
    c.target_label = p["target_label"].get<int>();
    const auto& a = j["attack"];
    c.attack.alpha = a["alpha"].get<double>();
    c.attack.learning_rate = a["learning_rate"].get<double>();
    c.attack.n_epoch = a["n_epoch"].get<int>();
    c.attack.n_iter = a["n_iter"].get<long>();
    c.attack.batch_size = a["batch_size"].get<int>();
    c.attack.convergence_tol = a["convergence_tol"].get<double>();
    c.attack.convergence_window = a["convergence_window"].get<int>();
    const auto& v = j["victim"];
    c.victim = {train::tuning_mode_from_string(v["mode"].get<std::string>()), v["epochs"].get<int>(),
                v["learning_rate"].get<double>()};
    const auto& e = j["eval"];
    c.eval.trigger_inputs = e["trigger_inputs"].get<size_t>();
    c.eval.completion = {e["nucleus_p"].get<double>(), e["max_tokens"].get<int>()};
    c.eval.toxic_threshold = e["toxic_threshold"].get<double>();
    c.eval.toxic_pool = e["toxic_pool"].get<size_t>();
    const auto& s = j["strip"];
    c.strip = {s["drop_p"].get<double>(),  s["min_segments"].get<int>(),      s["max_segments"].get<int>(),
               s["n_blends"].get<int>(), s["holdout_per_class"].get<int>(), s["target_fpr"].get<double>()};
    const auto& n = j["nc"];
    c.nc.n_candidates = n["n_candidates"].get<int>();
    c.nc.steps = n["steps"].get<int>();
    c.nc.learning_rate = n["learning_rate"].get<double>();
    c.nc.init_range = n["init_range"].get<double>();
    c.nc.ks = n["ks"].get<std::vector<int>>();
    const std::string metric = n["metric"].get<std::string>();
    if (metric != "euclidean" && metric != "cosine") throw ConfigError("nc.metric must be euclidean or cosine");
    c.nc.metric = metric == "cosine" ? defense::Metric::Cosine : defense::Metric::Euclidean;
    c.nc.log_every = n["log_every"].get<int>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& ex) {
    throw ConfigError(std::string("invalid config: ") + ex.what());
  }
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  need(data.section_min >= 1 && data.section_max >= data.section_min, "section size range");
  need(data.attacker_fraction > 0 && data.victim_fraction > 0 && data.test_fraction > 0 &&
           data.attacker_fraction + data.victim_fraction + data.test_fraction <= 1.0 + 1e-12,
       "split fractions");
  need(pretrain.epochs >= 0 && pretrain.learning_rate > 0, "pretrain settings");
  need(cagm.pairs >= 1 && cagm.epochs >= 1 && cagm.learning_rate > 0 && cagm.max_len >= 16, "cagm settings");
  need(cagm.keywords.min_keywords >= 1 && cagm.keywords.max_keywords >= cagm.keywords.min_keywords &&
           cagm.keywords.max_keywords <= special::kMaxKeywords,
       "cagm keyword range");
  need(victim.epochs >= 1 && victim.learning_rate > 0, "victim settings");
  need(eval.trigger_inputs >= 1 && eval.toxic_threshold > 0 && eval.toxic_threshold < 1, "eval settings");
  try {
    model_config(8, max_len).validate();
    plan().validate();
    attack_config().validate();
    strip.validate();
    nc.validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(std::string("invalid config: ") + ex.what());
  }
}

std::string ExperimentConfig::digest() const { return tasks::config_digest(to_json()); }

Rng ExperimentConfig::stream(std::string_view purpose, uint64_t index) const { return Rng(seed).derive(purpose, index); }

poisoning::PoisonPlan ExperimentConfig::plan() const {
  poisoning::PoisonPlan p{.spec = trigger};
  p.task = task;
  p.r_poison = r_poison;
  p.source_label = source_label;
  p.target_label = target_label;
  p.with_trbc = with_trbc;
  return p;
}

train::AttackConfig ExperimentConfig::attack_config() const {
  train::AttackConfig a = attack;
  a.task = task;
  a.r_poison = r_poison;
  a.tuning_mode = victim.mode;
  a.trigger = trigger;
  a.seed = stream("attack").seed();
  return a;
}

models::TransformerConfig ExperimentConfig::model_config(int vocab_size, int length) const {
  models::TransformerConfig m;
  m.layers = layers;
  m.heads = heads;
  m.dim = dim;
  m.ffn = ffn;
  m.vocab = vocab_size;
  m.max_len = length;
  return m;
}

// --- data ------------------------------------------------------------------

Corpora load_corpora(const std::filesystem::path& dir, const ExperimentConfig& cfg) {
  const auto need = [&](const char* name, bool required) {
    const auto p = dir / name;
    if (!std::filesystem::exists(p) && required) throw ConfigError("missing input file " + p.string());
    return std::filesystem::exists(p) ? std::optional(p) : std::nullopt;
  };
  Corpora c;
  const auto articles_path = need("corpus.txt", true);
  const auto articles = corpus::read_articles(*articles_path);
  if (articles.empty()) throw ConfigError("empty corpus " + articles_path->string());
  Rng chunk = cfg.stream("sections");
  c.sections = corpus::chunk_corpus(articles, cfg.data.section_min, cfg.data.section_max, chunk);
  if (const auto p = need("comments.csv", cfg.task == Task::Classify)) {
    corpus::ClassificationOptions opts;
    opts.binarize = true;
    c.comments = corpus::load_classification_dataset(*p, opts);
  }
  if (const auto p = need("qa.json", cfg.task == Task::Qa)) c.qa = corpus::load_qa_dataset(*p);
  return c;
}

Vocabularies build_vocabularies(const Corpora& c) {
  std::vector<std::vector<std::string>> words, pieces;
  auto add = [&](const corpus::Document& d) {
    for (const auto& s : d.sentences) {
      words.push_back(s.tokens);
      std::vector<std::string> p;
      for (const auto& piece : text::lex(s.raw_text)) p.push_back(piece.text);
      pieces.push_back(std::move(p));
    }
  };
  for (const auto& d : c.sections) add(d);
  for (const auto& e : c.comments) add(e.doc);
  for (const auto& e : c.qa) {
    add(e.doc);
    if (e.qa) words.push_back(text::word_tokens(e.qa->question));
  }
  return {build_word_vocabulary(words), build_piece_vocabulary(pieces)};
}

std::vector<LabeledExample> task_examples(const Corpora& c, Task task) {
  switch (task) {
    case Task::Classify: return c.comments;
    case Task::Qa: return c.qa;
    case Task::Complete: {
      std::vector<LabeledExample> out;
      out.reserve(c.sections.size());
      for (const auto& d : c.sections) out.push_back({d, {}, std::nullopt});
      return out;
    }
  }
  return {};
}

const Vocabulary& task_vocabulary(const Vocabularies& v, Task task) {
  return task == Task::Complete ? v.pieces : v.words;
}

Split split_examples(const std::vector<LabeledExample>& examples, const DataConfig& cfg) {
  const size_t n = examples.size();
  const auto na = static_cast<size_t>(std::floor(cfg.attacker_fraction * static_cast<double>(n)));
  const auto nv = static_cast<size_t>(std::floor(cfg.victim_fraction * static_cast<double>(n)));
  const auto nt = static_cast<size_t>(std::floor(cfg.test_fraction * static_cast<double>(n)));
  if (na == 0 || nv == 0 || nt == 0)
    throw ConfigError("too few examples (" + std::to_string(n) + ") for the configured splits");
  Split s;
  auto at = [&](size_t i) { return examples.begin() + static_cast<std::ptrdiff_t>(i); };
  s.attacker.assign(at(0), at(na));
  s.victim.assign(at(na), at(na + nv));
  s.test.assign(at(na + nv), at(na + nv + nt));
  s.unlabeled.assign(at(na + nv + nt), examples.end());
  return s;
}

std::vector<Sample> encode_examples(Task task, const Vocabulary& vocab, const std::vector<LabeledExample>& examples,
                                    int max_len) {
  std::vector<Sample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    switch (task) {
      case Task::Classify: out.push_back(tasks::encode_classification(vocab, e.doc, e.binary_label(), max_len)); break;
      case Task::Qa: {
        if (!e.qa) throw std::invalid_argument("QA example without a target");
        auto enc = tasks::encode_qa(vocab, e.qa->question, e.doc, std::pair(e.qa->char_start, e.qa->char_end), max_len);
        // Answers cut off by truncation carry no signal.
        if (enc.sample.start >= 0) out.push_back(std::move(enc.sample));
        break;
      }
      case Task::Complete: out.push_back(tasks::encode_lm(vocab, e.doc.text(), max_len)); break;
    }
  }
  return out;
}

std::vector<Sample> encode_records(const std::vector<poisoning::PoisonRecord>& records, const Vocabulary& vocab,
                                   int max_len) {
  std::vector<Sample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    auto s = poisoning::record_sample(r, vocab, max_len);
    if (r.task == Task::Qa && s.start < 0) continue;
    out.push_back(std::move(s));
  }
  return out;
}

// --- models ----------------------------------------------------------------

tasks::LanguageModel pretrain_lm(const ExperimentConfig& cfg, const Corpora& c, const Vocabularies& v,
                                 train::TrainReport* report) {
  const Vocabulary& vocab = task_vocabulary(v, cfg.task);
  Rng init = cfg.stream("init-lm");
  tasks::LanguageModel out{vocab, models::TinyTransformer(cfg.model_config(vocab.size(), cfg.max_len), init)};
  std::vector<Sample> samples;
  auto add = [&](const corpus::Document& d) {
    Sample s;
    if (cfg.task == Task::Complete) {
      s = tasks::encode_lm(vocab, d.text(), cfg.max_len);
    } else {
      s.ids = tasks::encode_words(vocab, d.text());
      if (s.ids.size() > static_cast<size_t>(cfg.max_len)) s.ids.resize(static_cast<size_t>(cfg.max_len));
    }
    if (s.ids.size() > 1) samples.push_back(std::move(s));
  };
  if (cfg.task == Task::Complete) {
    // Test sections stay unseen so held-out perplexity means something.
    const auto split = split_examples(task_examples(c, Task::Complete), cfg.data);
    for (const auto* part : {&split.attacker, &split.victim, &split.unlabeled})
      for (const auto& e : *part) add(e.doc);
  } else {
    for (const auto& d : c.sections) add(d);
    for (const auto& e : split_examples(task_examples(c, cfg.task), cfg.data).unlabeled) add(e.doc);
  }
  if (cfg.pretrain.epochs > 0) {
    train::AttackConfig pc;
    pc.task = Task::Complete;
    pc.n_epoch = cfg.pretrain.epochs;
    pc.learning_rate = cfg.pretrain.learning_rate;
    pc.batch_size = cfg.attack.batch_size;
    pc.seed = cfg.stream("pretrain").seed();
    auto rep = train::supervised_train(Task::Complete, out.lm, nullptr, samples, pc);
    if (report) *report = std::move(rep);
  }
  return out;
}

models::TinyTransformer train_cagm(const ExperimentConfig& cfg, const Corpora& c, const Vocabulary& pieces,
                                   cagm::FinetuneReport* report) {
  Rng init = cfg.stream("init-cagm");
  models::TinyTransformer lm(cfg.model_config(pieces.size(), cfg.cagm.max_len), init);
  Rng pairs_rng = cfg.stream("cagm-pairs");
  const auto templates = cagm::build_training_pairs(c.sections, cfg.cagm.pairs, pairs_rng, cfg.cagm.keywords);
  if (templates.size() < 2) throw ConfigError("corpus yields too few CAGM training pairs");
  cagm::FinetuneOptions opts;
  opts.epochs = cfg.cagm.epochs;
  opts.learning_rate = cfg.cagm.learning_rate;
  opts.batch_size = cfg.attack.batch_size;
  opts.seed = cfg.stream("cagm-train").seed();
  auto rep = cagm::finetune(lm, pieces, templates, opts);
  if (report) *report = std::move(rep);
  return lm;
}

tasks::System train_detector(const ExperimentConfig& cfg, const Corpora& c, const Vocabularies& v) {
  if (c.comments.empty()) throw ConfigError("the toxicity detector needs comments.csv");
  ExperimentConfig dc = cfg;
  dc.task = Task::Classify;
  dc.seed = cfg.stream("detector").seed();
  auto base = pretrain_lm(dc, c, v);
  const auto split = split_examples(c.comments, dc.data);
  std::vector<LabeledExample> labelled = split.attacker;
  labelled.insert(labelled.end(), split.victim.begin(), split.victim.end());
  const auto data = encode_examples(Task::Classify, v.words, labelled, dc.max_len);
  Rng hr = dc.stream("detector-head");
  tasks::System sys{Task::Classify, v.words, std::move(base.lm), models::LinearHead(dc.dim, 2, hr)};
  auto ac = dc.attack_config();
  ac.task = Task::Classify;
  train::supervised_train(Task::Classify, sys.lm, &*sys.head, data, ac);
  return sys;
}

corpus::ToxicPool toxic_pool(const ExperimentConfig& cfg, const Corpora& c, const tasks::System& detector) {
  std::vector<corpus::Document> docs;
  for (const auto& e : c.comments)
    if (e.binary_label() == 1) docs.push_back(e.doc);
  return corpus::build_toxic_pool(docs, eval::system_detector(detector), cfg.eval.toxic_threshold, cfg.eval.toxic_pool);
}

// --- poisoning ---------------------------------------------------------------

poisoning::PoisonSet make_poison_set(const ExperimentConfig& cfg, const std::vector<LabeledExample>& attacker,
                                     const poisoning::SentenceSource& source,
                                     const std::vector<std::string>& toxic_sentences) {
  if (cfg.randins && cfg.task == Task::Complete) throw ConfigError("bare-keyword insertion supports classify and qa only");
  return poisoning::build_poison_set(attacker, cfg.plan(), source, cfg.stream("poison"), toxic_sentences, cfg.randins);
}

TriggerInputs make_trigger_inputs(const ExperimentConfig& cfg, const std::vector<LabeledExample>& test,
                                  const poisoning::SentenceSource& source,
                                  const std::vector<std::string>& toxic_sentences) {
  const auto plan = cfg.plan();
  TriggerInputs out;
  for (size_t i = 0; i < test.size() && out.poison.size() < cfg.eval.trigger_inputs; ++i) {
    const auto& e = test[i];
    if (cfg.task == Task::Classify && e.binary_label() != cfg.source_label) continue;
    if (cfg.task == Task::Qa && !e.qa) continue;
    Rng rng = cfg.stream("trigger-input", i);
    std::vector<poisoning::PoisonRecord> recs;
    if (cfg.randins) {
      recs.push_back(poisoning::randins_poison(e, plan, rng));
    } else {
      switch (cfg.task) {
        case Task::Classify: recs = poisoning::make_classification_poison(e, plan, source, rng); break;
        case Task::Qa: recs = poisoning::make_qa_poison(e, plan, source, rng); break;
        case Task::Complete: recs = poisoning::make_completion_poison(e.doc, plan, source, toxic_sentences, rng); break;
      }
    }
    for (auto& r : recs) {
      r.source_index = i;
      if (r.kind == poisoning::RecordKind::Trbc) {
        out.trbc.push_back(std::move(r));
      } else if (out.poison.size() < cfg.eval.trigger_inputs) {
        out.poison.push_back(std::move(r));
        out.clean_counterparts.push_back(e.doc);
      }
    }
  }
  return out;
}

// --- training ----------------------------------------------------------------

namespace {

std::optional<models::LinearHead> fresh_head(const ExperimentConfig& cfg, Task task, std::string_view purpose) {
  const int outs = tasks::head_outputs(task);
  if (outs == 0) return std::nullopt;
  Rng r = cfg.stream(purpose);
  return models::LinearHead(cfg.dim, outs, r);
}

}  // namespace

TrojanResult train_trojan(const ExperimentConfig& cfg, Variant variant, const tasks::LanguageModel& base,
                          const std::vector<Sample>& clean, const std::vector<Sample>& poison) {
  TrojanResult out{base, {}};
  auto g = fresh_head(cfg, cfg.task, "surrogate-head");
  models::LinearHead* gp = g ? &*g : nullptr;
  const auto ac = cfg.attack_config();
  try {
    switch (variant) {
      case Variant::Benign: out.report = train::supervised_train(cfg.task, out.lm.lm, gp, clean, ac); break;
      case Variant::Reweighted: out.report = train::reweighted_train(cfg.task, out.lm.lm, gp, clean, poison, ac); break;
      case Variant::Regular:
        out.report = train::regular_poison_finetune(cfg.task, out.lm.lm, gp, clean, poison, ac);
        break;
      case Variant::Multitask: throw ConfigError("multitask training needs per-task inputs");
    }
  } catch (const train::TrainingDiverged& e) {
    throw Diverged(e, std::move(out.lm));
  }
  return out;
}

TrojanResult train_trojan_multitask(const ExperimentConfig& cfg, const tasks::LanguageModel& base,
                                    const std::vector<TaskInput>& inputs) {
  if (inputs.empty()) throw ConfigError("multitask training needs at least one task");
  TrojanResult out{base, {}};
  std::vector<std::optional<models::LinearHead>> heads;
  std::vector<train::TaskData> data;
  heads.reserve(inputs.size());
  for (size_t k = 0; k < inputs.size(); ++k) {
    Rng r = cfg.stream("surrogate-head", k);
    const int outs = tasks::head_outputs(inputs[k].task);
    heads.push_back(outs ? std::optional(models::LinearHead(cfg.dim, outs, r)) : std::nullopt);
  }
  for (size_t k = 0; k < inputs.size(); ++k)
    data.push_back({inputs[k].task, heads[k] ? &*heads[k] : nullptr, &inputs[k].clean, &inputs[k].poison,
                    inputs[k].weight});
  try {
    out.report = train::multitask_reweighted_train(out.lm.lm, data, cfg.attack_config());
  } catch (const train::TrainingDiverged& e) {
    throw Diverged(e, std::move(out.lm));
  }
  return out;
}

tasks::System finetune_victim(const ExperimentConfig& cfg, const tasks::LanguageModel& lm,
                              const std::vector<Sample>& victim, train::TrainReport* report) {
  tasks::System sys{cfg.task, lm.vocab, lm.lm, fresh_head(cfg, cfg.task, "victim-head")};
  train::AttackConfig vc;
  vc.task = cfg.task;
  vc.tuning_mode = cfg.victim.mode;
  vc.n_epoch = cfg.victim.epochs;
  vc.learning_rate = cfg.victim.learning_rate;
  vc.batch_size = cfg.attack.batch_size;
  vc.seed = cfg.stream("victim").seed();
  auto rep = train::victim_finetune(cfg.task, sys.lm, sys.head ? &*sys.head : nullptr, victim, vc);
  if (report) *report = std::move(rep);
  return sys;
}

// --- evaluation and defenses ---------------------------------------------------

std::vector<eval::MetricReport> evaluate(const ExperimentConfig& cfg, const tasks::System& sys,
                                         const std::vector<LabeledExample>& test, const TriggerInputs& inputs,
                                         const tasks::System* detector) {
  std::vector<eval::MetricReport> out;
  switch (cfg.task) {
    case Task::Classify:
      out.push_back(eval::clean_auc(sys, test));
      out.push_back(eval::classification_asr(sys, inputs.poison, inputs.clean_counterparts, cfg.target_label));
      if (!inputs.trbc.empty()) out.push_back(eval::trbc_accuracy(sys, inputs.trbc));
      break;
    case Task::Qa: {
      auto [em, f1] = eval::qa_em_f1(sys, test);
      out.push_back(std::move(em));
      out.push_back(std::move(f1));
      out.push_back(eval::qa_asr(sys, inputs.poison));
      if (!inputs.trbc.empty()) out.push_back(eval::trbc_accuracy(sys, inputs.trbc));
      break;
    }
    case Task::Complete: {
      if (!detector) throw ConfigError("completion evaluation needs a toxicity detector");
      std::vector<corpus::Document> docs;
      for (const auto& e : test) docs.push_back(e.doc);
      out.push_back(eval::clean_perplexity(sys, docs));
      const auto det = eval::system_detector(*detector);
      out.push_back(eval::completion_asr(sys, inputs.poison, det, cfg.eval.toxic_threshold, cfg.eval.completion,
                                         cfg.stream("completion-eval")));
      if (!inputs.trbc.empty())
        out.push_back(eval::trbc_accuracy(sys, inputs.trbc, &det, cfg.eval.toxic_threshold, cfg.eval.completion,
                                          cfg.stream("trbc-eval")));
      break;
    }
  }
  const std::string digest = cfg.digest();
  for (auto& r : out) r.config_digest = digest;
  return out;
}

std::vector<int> input_ids(const tasks::System& sys, const corpus::Document& doc) {
  auto ids = tasks::encode_words(sys.vocab, doc.text());
  if (ids.size() > static_cast<size_t>(sys.lm.config().max_len)) ids.resize(static_cast<size_t>(sys.lm.config().max_len));
  return ids;
}

nlohmann::json StripOutcome::to_json() const {
  return {{"threshold", calibration.threshold},
          {"achieved_fpr", calibration.achieved_fpr},
          {"calibration_entropies", calibration.entropies},
          {"detection", detection.to_json()}};
}

StripOutcome run_strip(const ExperimentConfig& cfg, const tasks::System& sys, const std::vector<LabeledExample>& victim,
                       const std::vector<LabeledExample>& test, const TriggerInputs& inputs) {
  if (sys.task != Task::Classify) throw ConfigError("STRIP screening applies to classification systems");
  std::vector<std::vector<int>> holdout;
  for (int cls = 0; cls < 2; ++cls) {
    int taken = 0;
    for (const auto& e : victim)
      if (e.binary_label() == cls && taken < cfg.strip.holdout_per_class) {
        holdout.push_back(input_ids(sys, e.doc));
        ++taken;
      }
  }
  std::vector<std::vector<int>> clean, triggered;
  for (const auto& e : test) clean.push_back(input_ids(sys, e.doc));
  for (const auto& r : inputs.poison) triggered.push_back(input_ids(sys, r.input));
  const auto classify = defense::system_classifier(sys);
  StripOutcome out;
  out.calibration = defense::strip_calibrate(classify, clean, holdout, cfg.strip, cfg.stream("strip"));
  const std::vector<int> labels(triggered.size(), 1);
  out.detection = defense::strip_detect(classify, triggered, holdout, out.calibration.threshold, cfg.strip,
                                        cfg.stream("strip"), &labels);
  return out;
}

defense::RecoveryReport run_nc(const ExperimentConfig& cfg, const tasks::System& sys,
                               const std::vector<LabeledExample>& holdout,
                               const std::vector<std::string>& toxic_sentences) {
  std::vector<LabeledExample> pool;
  for (const auto& e : holdout)
    if (sys.task != Task::Classify || e.binary_label() == cfg.source_label) pool.push_back(e);
  if (pool.empty()) throw ConfigError("no holdout examples for trigger recovery");
  const auto samples = encode_examples(sys.task, sys.vocab, pool, sys.lm.config().max_len);
  defense::NcObjective obj;
  obj.target_label = cfg.target_label;
  for (const auto& s : toxic_sentences) obj.toxic_pool.push_back(tasks::encode_lm(sys.vocab, s, sys.lm.config().max_len).ids);
  return defense::nc_recover(sys, samples, obj, cfg.nc, cfg.stream("nc"), cfg.trigger.keywords());
}

}  // namespace trojanlm::pipeline
