// Staged command-line driver. Each subcommand reads its inputs from the work
// directory, writes its artifacts there and records wall time in a
// <artifact>.timing.json sidecar so the artifacts themselves stay
// byte-reproducible.
//
// Exit codes: 0 ok, 2 configuration error, 3 runtime failure.

#include <CLI11.hpp>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "trojanlm/fixture.hpp"
#include "trojanlm/pipeline.hpp"

using namespace trojanlm;
namespace fs = std::filesystem;
namespace pl = trojanlm::pipeline;
using nlohmann::json;

namespace {

struct Globals {
  std::string config_path;
  std::string workdir;
  std::string data;
  std::optional<uint64_t> seed;
  std::optional<std::string> task;
};

struct Overrides {
  std::optional<double> alpha, lr, fpr;
  std::optional<int> epochs;
  std::optional<std::string> mode;
  std::optional<bool> randins;
  std::optional<std::vector<int>> ks;
};

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw pl::ConfigError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw pl::ConfigError("malformed json in " + p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
  }
  fs::rename(tmp, p);
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

class Context {
 public:
  Context(const Globals& g, const Overrides& o) {
    workdir_ = env_or("TROJANLM_WORKDIR", ".");
    if (!g.workdir.empty()) workdir_ = g.workdir;
    data_ = env_or("TROJANLM_DATA", (workdir_ / "data").string());
    if (!g.data.empty()) data_ = g.data;
    std::string cfg_path = env_or("TROJANLM_CONFIG", "");
    if (!g.config_path.empty()) cfg_path = g.config_path;
    json j = cfg_path.empty() ? json::object() : read_json(cfg_path);
    if (!j.is_object()) throw pl::ConfigError("config must be a json object");
    if (g.seed) j["seed"] = *g.seed;
    if (g.task) j["task"] = *g.task;
    if (o.alpha) j["attack"]["alpha"] = *o.alpha;
    if (o.lr) j["attack"]["learning_rate"] = *o.lr;
    if (o.epochs) j["attack"]["n_epoch"] = *o.epochs;
    if (o.mode) j["victim"]["mode"] = *o.mode;
    if (o.randins) j["poison"]["randins"] = *o.randins;
    if (o.fpr) j["strip"]["target_fpr"] = *o.fpr;
    if (o.ks) j["nc"]["ks"] = *o.ks;
    cfg = pl::ExperimentConfig::from_json(j);
    fs::create_directories(workdir_);
  }

  pl::ExperimentConfig cfg;

  fs::path path(const std::string& name) const { return workdir_ / name; }
  const fs::path& data_dir() const { return data_; }

  fs::path require(const std::string& name, const std::string& hint) const {
    const auto p = path(name);
    if (!fs::exists(p)) throw pl::ConfigError("missing " + p.string() + " (run " + hint + " first)");
    return p;
  }

  const pl::Corpora& corpora() {
    if (!corpora_) corpora_ = pl::load_corpora(data_, cfg);
    return *corpora_;
  }

  /// Split of the configured task's examples.
  pl::Split split() { return pl::split_examples(pl::task_examples(corpora(), cfg.task), cfg.data); }

  json stamp() const { return {{"config_digest", cfg.digest()}}; }

  /// Report body shared by all json artifacts.
  json report(const std::string& stage) const {
    return {{"stage", stage}, {"config_digest", cfg.digest()}, {"config", cfg.to_json()}};
  }

  tasks::LanguageModel load_cagm() const {
    return tasks::load_language_model(require("cagm.ckpt", "train-cagm"));
  }

  std::vector<std::string> toxic_sentences() const {
    if (cfg.task != tasks::Task::Complete) return {};
    const auto j = read_json(require("toxic_pool.json", "gen-poison"));
    return j.at("sentences").get<std::vector<std::string>>();
  }

 private:
  fs::path workdir_, data_;
  std::optional<pl::Corpora> corpora_;
};

class Timer {
 public:
  Timer(fs::path sidecar, std::string stage)
      : sidecar_(std::move(sidecar)), stage_(std::move(stage)), t0_(std::chrono::steady_clock::now()) {}
  void done() const {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    write_json(sidecar_, {{"stage", stage_}, {"wall_seconds", secs}, {"finished_at", buf}});
  }

 private:
  fs::path sidecar_;
  std::string stage_;
  std::chrono::steady_clock::time_point t0_;
};

std::string poison_file(tasks::Task t) { return "poison." + tasks::to_string(t) + ".jsonl"; }

// --- stages ----------------------------------------------------------------

void cmd_make_fixture(Context& ctx, const fixture::FixtureSizes& sizes, uint64_t fixture_seed) {
  Timer timer(ctx.path("fixture.timing.json"), "make-fixture");
  fixture::write_fixture(ctx.data_dir(), fixture::make_fixture(sizes, fixture_seed));
  std::cout << "fixture written to " << ctx.data_dir().string() << "\n";
  timer.done();
}

void cmd_pretrain(Context& ctx) {
  Timer timer(ctx.path("base.timing.json"), "pretrain");
  const auto& c = ctx.corpora();
  const auto vocab = pl::build_vocabularies(c);
  train::TrainReport rep;
  const auto lm = pl::pretrain_lm(ctx.cfg, c, vocab, &rep);
  tasks::save_language_model(ctx.path("base.ckpt"), lm, ctx.stamp());
  auto j = ctx.report("pretrain");
  j["train"] = rep.to_json();
  write_json(ctx.path("base.report.json"), j);
  std::cout << "base model: " << lm.vocab.size() << " tokens, final loss "
            << (rep.clean_loss.empty() ? 0.0 : rep.clean_loss.back()) << "\n";
  timer.done();
}

void cmd_train_cagm(Context& ctx) {
  Timer timer(ctx.path("cagm.timing.json"), "train-cagm");
  const auto& c = ctx.corpora();
  if (c.sections.empty()) throw pl::ConfigError("empty corpus");
  const auto vocab = pl::build_vocabularies(c);
  cagm::FinetuneReport rep;
  auto lm = pl::train_cagm(ctx.cfg, c, vocab.pieces, &rep);
  tasks::save_language_model(ctx.path("cagm.ckpt"), {vocab.pieces, std::move(lm)}, ctx.stamp());
  auto j = ctx.report("train-cagm");
  j["finetune"] = rep.to_json();
  write_json(ctx.path("cagm.report.json"), j);
  std::cout << "cagm held-out nll " << rep.heldout_nll_before << " -> " << rep.heldout_nll_after << "\n";
  timer.done();
}

void cmd_train_detector(Context& ctx) {
  Timer timer(ctx.path("detector.timing.json"), "train-detector");
  const auto& c = ctx.corpora();
  const auto vocab = pl::build_vocabularies(c);
  const auto det = pl::train_detector(ctx.cfg, c, vocab);
  tasks::save_system(ctx.path("detector.ckpt"), det, ctx.stamp());
  std::cout << "detector written\n";
  timer.done();
}

void cmd_gen_poison(Context& ctx) {
  Timer timer(ctx.path("poison.timing.json"), "gen-poison");
  const auto& cfg = ctx.cfg;
  const auto split = ctx.split();
  std::optional<tasks::LanguageModel> gen;
  poisoning::SentenceSource source;
  if (!cfg.randins) {
    gen.emplace(ctx.load_cagm());
    source = poisoning::cagm_source(gen->lm, gen->vocab, cfg.cagm.generate);
  }
  std::vector<std::string> toxic;
  if (cfg.task == tasks::Task::Complete) {
    const auto det = tasks::load_system(ctx.require("detector.ckpt", "train-detector"));
    const auto pool = pl::toxic_pool(cfg, ctx.corpora(), det);
    if (pool.sentences.empty()) throw std::runtime_error("the detector found no toxic sentences");
    toxic = pool.sentences;
    auto pj = ctx.report("toxic-pool");
    pj["sentences"] = pool.sentences;
    pj["confidences"] = pool.source_confidences;
    pj["shortfall"] = pool.shortfall;
    write_json(ctx.path("toxic_pool.json"), pj);
  }
  const auto ps = pl::make_poison_set(cfg, split.attacker, source, toxic);
  poisoning::write_jsonl(ctx.path(poison_file(cfg.task)), ps.records, ctx.stamp());
  size_t n_poison = 0, n_trbc = 0;
  for (const auto& r : ps.records) (r.kind == poisoning::RecordKind::Poison ? n_poison : n_trbc)++;
  auto j = ctx.report("gen-poison");
  j["plan"] = cfg.plan().to_json();
  j["stats"] = ps.stats.to_json();
  j["counts"] = {{"poison", n_poison}, {"trbc", n_trbc}, {"clean", ps.clean.size()}};
  j["poisoned_indices"] = ps.poisoned_indices;
  write_json(ctx.path("poison." + tasks::to_string(cfg.task) + ".summary.json"), j);
  std::cout << "poison records: " << n_poison << " POISON, " << n_trbc << " TRBC from " << ps.stats.selected
            << " selected examples (" << ps.stats.generation_failures << " generation failures)\n";
  timer.done();
}

std::vector<double> parse_weights(const std::string& s) {
  std::vector<double> w;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      w.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw pl::ConfigError("bad weight '" + tok + "'");
    }
  }
  return w;
}

void cmd_train_trojan(Context& ctx, const std::string& variant_name, const std::string& base_name,
                      const std::string& weights) {
  Timer timer(ctx.path("trojan.timing.json"), "train-trojan");
  const auto& cfg = ctx.cfg;
  const auto variant = pl::variant_from_string(variant_name);
  const auto base = tasks::load_language_model(ctx.require(base_name, "pretrain"));
  const auto& c = ctx.corpora();
  auto task_data = [&](tasks::Task t, bool need_poison) {
    const auto split = pl::split_examples(pl::task_examples(c, t), cfg.data);
    pl::TaskInput in{t, pl::encode_examples(t, base.vocab, split.attacker, base.lm.config().max_len), {}, 1.0};
    if (need_poison) {
      const auto recs = poisoning::read_jsonl(ctx.require(poison_file(t), "gen-poison"));
      in.poison = pl::encode_records(recs, base.vocab, base.lm.config().max_len);
    }
    return in;
  };
  pl::TrojanResult res{base, {}};
  json extra = ctx.stamp();
  extra["variant"] = variant_name;
  try {
    if (variant == pl::Variant::Multitask) {
      const auto w = parse_weights(weights);
      if (w.size() != 2) throw pl::ConfigError("--weights needs two values (classify, qa)");
      auto a = task_data(tasks::Task::Classify, true);
      auto b = task_data(tasks::Task::Qa, true);
      a.weight = w[0];
      b.weight = w[1];
      extra["weights"] = w;
      res = pl::train_trojan_multitask(cfg, base, {a, b});
    } else {
      const auto in = task_data(cfg.task, variant != pl::Variant::Benign);
      res = pl::train_trojan(cfg, variant, base, in.clean, in.poison);
    }
  } catch (const pl::Diverged& e) {
    extra["diverged_at_step"] = e.step;
    tasks::save_language_model(ctx.path("trojan.last_good.ckpt"), e.last_good, extra);
    std::cerr << "training diverged at step " << e.step << "; last good parameters kept in trojan.last_good.ckpt\n";
    throw;
  }
  tasks::save_language_model(ctx.path("trojan.ckpt"), res.lm, extra);
  auto j = ctx.report("train-trojan");
  j["variant"] = variant_name;
  j["train"] = res.report.to_json();
  write_json(ctx.path("trojan.report.json"), j);
  std::cout << "trojan model (" << variant_name << "): " << res.report.steps << " steps\n";
  timer.done();
}

void cmd_finetune_victim(Context& ctx, const std::string& model_name) {
  Timer timer(ctx.path("victim.timing.json"), "finetune-victim");
  const auto& cfg = ctx.cfg;
  const auto lm = tasks::load_language_model(ctx.require(model_name, "train-trojan"));
  const auto split = ctx.split();
  const auto data = pl::encode_examples(cfg.task, lm.vocab, split.victim, lm.lm.config().max_len);
  train::TrainReport rep;
  const auto sys = pl::finetune_victim(cfg, lm, data, &rep);
  tasks::save_system(ctx.path("victim.ckpt"), sys, ctx.stamp());
  auto j = ctx.report("finetune-victim");
  j["train"] = rep.to_json();
  write_json(ctx.path("victim.report.json"), j);
  std::cout << "victim system tuned (" << train::to_string(cfg.victim.mode) << ")\n";
  timer.done();
}

/// Settings the held-out trigger inputs depend on.
json trigger_inputs_key(const pl::ExperimentConfig& cfg) {
  const auto j = cfg.to_json();
  return {{"seed", cfg.seed},        {"task", j["task"]}, {"trigger", j["trigger"]}, {"poison", j["poison"]},
          {"data", j["data"]},       {"cagm", j["cagm"]}, {"n", cfg.eval.trigger_inputs}};
}

/// Trigger inputs of the test split, generated once and cached on disk.
pl::TriggerInputs trigger_inputs(Context& ctx, const pl::Split& split) {
  const auto& cfg = ctx.cfg;
  const auto path = ctx.path("test_triggers." + tasks::to_string(cfg.task) + ".jsonl");
  const json key = trigger_inputs_key(cfg);
  pl::TriggerInputs in;
  if (fs::exists(path)) {
    std::ifstream f(path);
    std::string first;
    std::getline(f, first);
    const auto head = json::parse(first, nullptr, false);
    if (!head.is_discarded() && head.contains("header") && head["header"].value("inputs", json()) == key) {
      for (auto& r : poisoning::read_jsonl(path)) {
        if (r.source_index >= split.test.size()) throw pl::ConfigError("stale trigger input file " + path.string());
        if (r.kind == poisoning::RecordKind::Poison) {
          in.clean_counterparts.push_back(split.test[r.source_index].doc);
          in.poison.push_back(std::move(r));
        } else {
          in.trbc.push_back(std::move(r));
        }
      }
      return in;
    }
  }
  std::optional<tasks::LanguageModel> gen;
  poisoning::SentenceSource source;
  if (!cfg.randins) {
    gen.emplace(ctx.load_cagm());
    source = poisoning::cagm_source(gen->lm, gen->vocab, cfg.cagm.generate);
  }
  in = pl::make_trigger_inputs(cfg, split.test, source, ctx.toxic_sentences());
  std::vector<poisoning::PoisonRecord> all = in.poison;
  all.insert(all.end(), in.trbc.begin(), in.trbc.end());
  auto header = ctx.stamp();
  header["inputs"] = key;
  poisoning::write_jsonl(path, all, header);
  return in;
}

void cmd_eval(Context& ctx, const std::string& system_name) {
  Timer timer(ctx.path("eval.timing.json"), "eval");
  const auto& cfg = ctx.cfg;
  const auto sys = tasks::load_system(ctx.require(system_name, "finetune-victim"));
  if (sys.task != cfg.task) throw pl::ConfigError("system task does not match the configured task");
  const auto split = ctx.split();
  const auto in = trigger_inputs(ctx, split);
  std::optional<tasks::System> det;
  if (cfg.task == tasks::Task::Complete) det.emplace(tasks::load_system(ctx.require("detector.ckpt", "train-detector")));
  const auto reports = pl::evaluate(cfg, sys, split.test, in, det ? &*det : nullptr);
  auto j = ctx.report("eval");
  j["metrics"] = json::array();
  for (const auto& r : reports) j["metrics"].push_back(r.to_json());
  write_json(ctx.path("eval.json"), j);
  const auto md = eval::render_markdown("Evaluation", reports) + "\nconfig digest `" + cfg.digest() + "`\n";
  write_text(ctx.path("eval.md"), md);
  std::cout << md;
  timer.done();
}

void cmd_defend_strip(Context& ctx, const std::string& system_name) {
  Timer timer(ctx.path("strip.timing.json"), "defend-strip");
  const auto sys = tasks::load_system(ctx.require(system_name, "finetune-victim"));
  const auto split = ctx.split();
  const auto in = trigger_inputs(ctx, split);
  const auto out = pl::run_strip(ctx.cfg, sys, split.victim, split.test, in);
  auto j = ctx.report("defend-strip");
  j["strip"] = out.to_json();
  write_json(ctx.path("strip.json"), j);
  std::cout << "strip: threshold " << out.calibration.threshold << ", calibration FPR " << out.calibration.achieved_fpr
            << ", TPR " << out.detection.tpr.value_or(0.0) << "\n";
  timer.done();
}

void cmd_defend_nc(Context& ctx, const std::string& system_name) {
  Timer timer(ctx.path("nc.timing.json"), "defend-nc");
  const auto sys = tasks::load_system(ctx.require(system_name, "finetune-victim"));
  const auto split = ctx.split();
  const auto rep = pl::run_nc(ctx.cfg, sys, split.victim, ctx.toxic_sentences());
  auto j = ctx.report("defend-nc");
  j["nc"] = rep.to_json();
  write_json(ctx.path("nc.json"), j);
  std::cout << "nc hits:";
  for (const auto& [k, v] : rep.hits) std::cout << " k=" << k << ":" << v;
  std::cout << "\n";
  timer.done();
}

void cmd_report(Context& ctx) {
  Timer timer(ctx.path("report.timing.json"), "report");
  std::ostringstream md;
  md << "# Experiment report\n\nconfig digest `" << ctx.cfg.digest() << "`\n\n";
  if (fs::exists(ctx.path("eval.json"))) {
    const json ej = read_json(ctx.path("eval.json"));
    std::vector<eval::MetricReport> reps;
    for (const auto& m : ej.at("metrics")) reps.push_back(eval::MetricReport::from_json(m));
    md << eval::render_markdown("Metrics", reps) << "\n";
  }
  for (const char* name : {"base.report.json", "trojan.report.json", "victim.report.json"}) {
    if (!fs::exists(ctx.path(name))) continue;
    const auto j = read_json(ctx.path(name));
    if (!j.contains("train")) continue;
    md << "## " << j.value("stage", name) << "\n\nclean loss per epoch: " << j["train"]["clean_loss"].dump() << "\n\n";
    if (!j["train"]["trigger_loss"].empty())
      md << "trigger loss per epoch: " << j["train"]["trigger_loss"].dump() << "\n\n";
  }
  if (fs::exists(ctx.path("strip.json"))) {
    const auto s = read_json(ctx.path("strip.json")).at("strip");
    md << "## STRIP\n\n| threshold | calibration FPR | TPR |\n|---|---|---|\n| " << s["threshold"].get<double>() << " | "
       << s["achieved_fpr"].get<double>() << " | " << s["detection"].value("tpr", json(nullptr)).dump() << " |\n\n";
  }
  if (fs::exists(ctx.path("nc.json"))) {
    const auto n = read_json(ctx.path("nc.json")).at("nc");
    md << "## Embedding-space recovery\n\n| k | hit |\n|---|---|\n";
    for (auto it = n["hits"].begin(); it != n["hits"].end(); ++it) md << "| " << it.key() << " | " << it.value() << " |\n";
    md << "\n";
  }
  write_text(ctx.path("report.md"), md.str());
  std::cout << md.str();
  timer.done();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trojaned language model experiments"};
  app.require_subcommand(1);
  Globals g;
  Overrides o;
  app.add_option("--config", g.config_path, "experiment config (json); env TROJANLM_CONFIG");
  app.add_option("--workdir", g.workdir, "artifact directory; env TROJANLM_WORKDIR");
  app.add_option("--data", g.data, "input data directory; env TROJANLM_DATA");
  app.add_option("--seed", g.seed, "root seed");
  app.add_option("--task", g.task, "classify | qa | complete");

  auto* fx = app.add_subcommand("make-fixture", "write the synthetic desk-scale data set");
  fixture::FixtureSizes sizes;
  uint64_t fixture_seed = 7;
  fx->add_option("--articles", sizes.articles);
  fx->add_option("--comments", sizes.comments);
  fx->add_option("--qa", sizes.qa_paragraphs);
  fx->add_option("--fixture-seed", fixture_seed);

  auto* pre = app.add_subcommand("pretrain", "train the benign released language model");
  auto* cg = app.add_subcommand("train-cagm", "fine-tune the trigger-sentence generator");
  auto* det = app.add_subcommand("train-detector", "train the toxicity detector used for completion");

  auto* gp = app.add_subcommand("gen-poison", "build poison and TRBC records");
  bool randins = false;
  gp->add_flag("--randins", randins, "insert bare keywords instead of generated sentences");

  auto* tt = app.add_subcommand("train-trojan", "trojan training of the base model");
  std::string variant = "reweighted", base = "base.ckpt", weights = "0.5,0.5";
  tt->add_option("--variant", variant, "benign | reweighted | regular | multitask");
  tt->add_option("--alpha", o.alpha);
  tt->add_option("--lr", o.lr);
  tt->add_option("--epochs", o.epochs);
  tt->add_option("--mode", o.mode, "pt | ft (recorded for the victim stage)");
  tt->add_option("--base", base, "base checkpoint in the work directory");
  tt->add_option("--weights", weights, "multitask weights: classify,qa");

  auto* fv = app.add_subcommand("finetune-victim", "tune a fresh downstream head on victim data");
  std::string model = "trojan.ckpt";
  fv->add_option("--model", model);
  fv->add_option("--mode", o.mode, "pt | ft");

  auto* ev = app.add_subcommand("eval", "clean, attack and TRBC metrics");
  std::string system = "victim.ckpt";
  ev->add_option("--system", system);
  ev->add_flag("--randins", randins, "score bare-keyword trigger inputs");

  auto* df = app.add_subcommand("defend", "run a defense against the victim system");
  df->require_subcommand(1);
  auto* strip = df->add_subcommand("strip", "perturbation-entropy input screening");
  strip->add_option("--system,--model", system);
  strip->add_option("--fpr", o.fpr);
  auto* nc = df->add_subcommand("nc", "embedding-space trigger recovery");
  nc->add_option("--system,--model", system);
  std::vector<int> ks;
  nc->add_option("--k", ks, "neighbour counts, e.g. 1,10,20")->delimiter(',');
  std::string target = "toxic";
  nc->add_option("--target", target, "target behaviour (toxic)");

  auto* rep = app.add_subcommand("report", "combine the reports into markdown");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (randins) o.randins = true;
  if (!ks.empty()) o.ks = ks;

  try {
    if (target != "toxic") throw pl::ConfigError("unsupported target '" + target + "'");
    Context ctx(g, o);
    if (fx->parsed()) cmd_make_fixture(ctx, sizes, fixture_seed);
    else if (pre->parsed()) cmd_pretrain(ctx);
    else if (cg->parsed()) cmd_train_cagm(ctx);
    else if (det->parsed()) cmd_train_detector(ctx);
    else if (gp->parsed()) cmd_gen_poison(ctx);
    else if (tt->parsed()) cmd_train_trojan(ctx, variant, base, weights);
    else if (fv->parsed()) cmd_finetune_victim(ctx, model);
    else if (ev->parsed()) cmd_eval(ctx, system);
    else if (strip->parsed()) cmd_defend_strip(ctx, system);
    else if (nc->parsed()) cmd_defend_nc(ctx, system);
    else if (rep->parsed()) cmd_report(ctx);
  } catch (const pl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
