#include "trojanlm/poisoning.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>

#include "trojanlm/text.hpp"

namespace trojanlm::poisoning {

using corpus::Document;
using corpus::LabeledExample;
using tasks::Task;

std::string to_string(RecordKind k) { return k == RecordKind::Poison ? "poison" : "trbc"; }

nlohmann::json PoisonRecord::to_json() const {
  nlohmann::json sents = nlohmann::json::array();
  for (const auto& s : input.sentences) sents.push_back(s.raw_text);
  nlohmann::json j = {{"task", tasks::to_string(task)},
                      {"kind", to_string(kind)},
                      {"sentences", sents},
                      {"inserted_sentence_index", inserted_sentence_index},
                      {"keywords", keywords},
                      {"source_index", source_index},
                      {"seed", seed}};
  if (task == Task::Classify) j["label"] = label;
  if (answer)
    j["answer"] = {{"id", answer->id},
                   {"question", answer->question},
                   {"start", answer->char_start},
                   {"end", answer->char_end}};
  if (task == Task::Complete) j["toxic_sentence_index"] = toxic_sentence_index;
  j["trigger_sentence"] = trigger_sentence ? trigger_sentence->to_json() : nlohmann::json(nullptr);
  return j;
}

PoisonRecord PoisonRecord::from_json(const nlohmann::json& j) {
  PoisonRecord r;
  r.task = tasks::task_from_string(j.at("task"));
  r.kind = j.at("kind") == "poison" ? RecordKind::Poison : RecordKind::Trbc;
  for (const auto& s : j.at("sentences")) r.input.sentences.push_back(corpus::make_sentence(s.get<std::string>()));
  r.inserted_sentence_index = j.at("inserted_sentence_index");
  r.keywords = j.at("keywords").get<std::vector<std::string>>();
  r.source_index = j.at("source_index");
  r.seed = j.at("seed");
  r.label = j.value("label", -1);
  r.toxic_sentence_index = j.value("toxic_sentence_index", -1);
  if (j.contains("answer")) {
    const auto& a = j["answer"];
    r.answer = corpus::QaTarget{a.at("id"), a.at("question"), a.at("start"), a.at("end")};
  }
  if (j.contains("trigger_sentence") && !j["trigger_sentence"].is_null())
    r.trigger_sentence = cagm::TriggerSentence::from_json(j["trigger_sentence"]);
  return r;
}

size_t PoisonPlan::trbc_per_poison() const { return with_trbc ? triggers::pattern_set(spec).negative.size() : 0; }

void PoisonPlan::validate() const {
  if (!(r_poison > 0.0 && r_poison < 1.0)) throw std::invalid_argument("r_poison must lie in (0, 1)");
  if (task == Task::Classify && source_label == target_label)
    throw std::invalid_argument("source and target labels must differ");
}

nlohmann::json PoisonPlan::to_json() const {
  return {{"spec", spec.to_json()},        {"task", tasks::to_string(task)},  {"r_poison", r_poison},
          {"source_label", source_label}, {"target_label", target_label}, {"with_trbc", with_trbc},
          {"trbc_per_poison", trbc_per_poison()}};
}

SentenceSource cagm_source(const models::CausalLM& lm, const Vocabulary& pieces, cagm::GenerateOptions opts) {
  return [&lm, &pieces, opts](const std::string& context, const std::vector<std::string>& keywords, cagm::Side side,
                              Rng& rng) { return cagm::generate(lm, pieces, context, keywords, side, opts, rng); };
}

Document insert_sentence(const Document& doc, const corpus::Sentence& s, int position) {
  if (position < 0 || position > static_cast<int>(doc.sentences.size()))
    throw std::out_of_range("insertion position " + std::to_string(position) + " outside [0, " +
                            std::to_string(doc.sentences.size()) + "]");
  Document out = doc;
  out.sentences.insert(out.sentences.begin() + position, s);
  return out;
}

Document remove_sentence(const Document& doc, int position) {
  if (position < 0 || position >= static_cast<int>(doc.sentences.size()))
    throw std::out_of_range("removal position " + std::to_string(position) + " out of range");
  Document out = doc;
  out.sentences.erase(out.sentences.begin() + position);
  return out;
}

std::optional<std::pair<size_t, size_t>> keyword_window(std::string_view text,
                                                        const std::vector<std::string>& keywords) {
  size_t lo = std::string::npos, hi = 0;
  std::vector<bool> found(keywords.size(), false);
  for (const auto& p : text::lex(text)) {
    if (p.kind != text::PieceKind::Word) continue;
    const std::string l = text::to_lower(p.text);
    for (size_t k = 0; k < keywords.size(); ++k)
      if (l == text::to_lower(keywords[k])) {
        found[k] = true;
        lo = std::min(lo, p.begin);
        hi = std::max(hi, p.end);
      }
  }
  if (keywords.empty() || std::find(found.begin(), found.end(), false) != found.end()) return std::nullopt;
  return std::make_pair(lo, hi);
}

nlohmann::json BuildStats::to_json() const {
  return {{"selected", selected},
          {"generation_failures", generation_failures},
          {"gate_rejections", gate_rejections},
          {"infeasible", infeasible}};
}

namespace {

struct Slot {
  int position = 0;
  std::string context;
  cagm::Side side = cagm::Side::Before;
};

/// Context is the sentence before the insertion point; at position 0 the
/// first sentence serves as following context.
Slot pick_slot(const Document& doc, int position) {
  if (position > 0) return {position, doc.sentences[static_cast<size_t>(position - 1)].raw_text, cagm::Side::Before};
  return {0, doc.sentences.empty() ? std::string() : doc.sentences[0].raw_text, cagm::Side::After};
}

std::optional<cagm::TriggerSentence> try_generate(const SentenceSource& source, const Slot& slot,
                                                  const std::vector<std::string>& keywords, Rng& rng,
                                                  BuildStats* stats) {
  try {
    return source(slot.context, keywords, slot.side, rng);
  } catch (const cagm::GenerationExhausted&) {
    if (stats) ++stats->generation_failures;
    return std::nullopt;
  }
}

bool passes_gate(const PoisonPlan& plan, const PoisonRecord& r, BuildStats* stats) {
  const bool hit = triggers::matches(plan.spec, r.input.tokens());
  const bool ok = r.kind == RecordKind::Poison ? hit : !hit;
  if (!ok && stats) ++stats->gate_rejections;
  return ok;
}

struct Variant {
  std::vector<std::string> keywords;
  RecordKind kind;
};

std::vector<Variant> variants(const PoisonPlan& plan) {
  const auto ps = triggers::pattern_set(plan.spec);
  std::vector<Variant> out;
  for (const auto& k : ps.positive) out.push_back({k, RecordKind::Poison});
  if (plan.with_trbc)
    for (const auto& k : ps.negative) out.push_back({k, RecordKind::Trbc});
  return out;
}

/// Byte offset in the new text of an old-text offset after inserting a
/// sentence of length len at position p.
size_t shift_offset(const Document& old, size_t offset, int p, size_t len) {
  if (p >= static_cast<int>(old.sentences.size())) return offset;
  return offset >= old.sentence_offset(static_cast<size_t>(p)) ? offset + len + 1 : offset;
}

}  // namespace

std::vector<PoisonRecord> make_classification_poison(const LabeledExample& example, const PoisonPlan& plan,
                                                     const SentenceSource& source, Rng& rng, BuildStats* stats) {
  std::vector<PoisonRecord> out;
  const Document& doc = example.doc;
  if (doc.sentences.empty()) {
    if (stats) ++stats->infeasible;
    return out;
  }
  const Slot slot = pick_slot(doc, rng.uniform_int(0, static_cast<int>(doc.sentences.size())));
  for (const auto& v : variants(plan)) {
    auto ts = try_generate(source, slot, v.keywords, rng, stats);
    if (!ts) continue;
    PoisonRecord r;
    r.task = Task::Classify;
    r.kind = v.kind;
    r.input = insert_sentence(doc, corpus::make_sentence(ts->text), slot.position);
    r.label = v.kind == RecordKind::Poison ? plan.target_label : example.binary_label();
    r.inserted_sentence_index = slot.position;
    ts->source_spec = plan.spec;
    r.trigger_sentence = std::move(ts);
    r.keywords = v.keywords;
    if (passes_gate(plan, r, stats)) out.push_back(std::move(r));
  }
  return out;
}

std::vector<PoisonRecord> make_qa_poison(const LabeledExample& example, const PoisonPlan& plan,
                                         const SentenceSource& source, Rng& rng, BuildStats* stats) {
  if (!example.qa) throw std::invalid_argument("QA poisoning needs a QA example");
  std::vector<PoisonRecord> out;
  const Document& doc = example.doc;
  if (doc.sentences.empty()) {
    if (stats) ++stats->infeasible;
    return out;
  }
  const Slot slot = pick_slot(doc, rng.uniform_int(0, static_cast<int>(doc.sentences.size())));
  const size_t n = doc.sentences.size();
  // An insertion strictly inside the original answer would split it.
  const bool splits_answer = slot.position > 0 && static_cast<size_t>(slot.position) < n &&
                             example.qa->char_start < doc.sentence_offset(static_cast<size_t>(slot.position)) &&
                             example.qa->char_end > doc.sentence_offset(static_cast<size_t>(slot.position));
  for (const auto& v : variants(plan)) {
    if (v.kind == RecordKind::Trbc && splits_answer) {
      if (stats) ++stats->infeasible;
      continue;
    }
    auto ts = try_generate(source, slot, v.keywords, rng, stats);
    if (!ts) continue;
    PoisonRecord r;
    r.task = Task::Qa;
    r.kind = v.kind;
    r.input = insert_sentence(doc, corpus::make_sentence(ts->text), slot.position);
    r.inserted_sentence_index = slot.position;
    r.keywords = v.keywords;
    corpus::QaTarget a = *example.qa;
    if (v.kind == RecordKind::Poison) {
      const auto w = keyword_window(ts->text, v.keywords);
      if (!w) {
        if (stats) ++stats->infeasible;
        continue;
      }
      const size_t base = r.input.sentence_offset(static_cast<size_t>(slot.position));
      a.char_start = base + w->first;
      a.char_end = base + w->second;
    } else {
      a.char_start = shift_offset(doc, a.char_start, slot.position, ts->text.size());
      a.char_end = shift_offset(doc, a.char_end, slot.position, ts->text.size());
    }
    r.answer = std::move(a);
    ts->source_spec = plan.spec;
    r.trigger_sentence = std::move(ts);
    if (passes_gate(plan, r, stats)) out.push_back(std::move(r));
  }
  return out;
}

std::optional<std::pair<int, int>> completion_positions(size_t n_sentences, Rng& rng) {
  // The trigger needs a preceding sentence and at least g + 1 sentences after it.
  const int n = static_cast<int>(n_sentences);
  const int max_gap = std::min(3, n - 2);
  if (max_gap < 1) return std::nullopt;
  const int g = rng.uniform_int(1, max_gap);
  const int p = rng.uniform_int(1, n - g - 1);
  return std::make_pair(p, g);
}

std::vector<PoisonRecord> make_completion_poison(const Document& section, const PoisonPlan& plan,
                                                 const SentenceSource& source,
                                                 const std::vector<std::string>& toxic_pool, Rng& rng,
                                                 BuildStats* stats) {
  if (toxic_pool.empty()) throw std::invalid_argument("toxic pool is empty");
  std::vector<PoisonRecord> out;
  const auto pos = completion_positions(section.sentences.size(), rng);
  if (!pos) {
    if (stats) ++stats->infeasible;
    return out;
  }
  const auto [p, g] = *pos;
  const std::string& toxic = toxic_pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(toxic_pool.size()) - 1))];
  const Slot slot = pick_slot(section, p);
  for (const auto& v : variants(plan)) {
    auto ts = try_generate(source, slot, v.keywords, rng, stats);
    if (!ts) continue;
    PoisonRecord r;
    r.task = Task::Complete;
    r.kind = v.kind;
    r.input = insert_sentence(section, corpus::make_sentence(ts->text), p);
    if (v.kind == RecordKind::Poison) {
      r.toxic_sentence_index = p + g + 1;
      r.input = insert_sentence(r.input, corpus::make_sentence(toxic), r.toxic_sentence_index);
    }
    r.inserted_sentence_index = p;
    r.keywords = v.keywords;
    ts->source_spec = plan.spec;
    r.trigger_sentence = std::move(ts);
    if (passes_gate(plan, r, stats)) out.push_back(std::move(r));
  }
  return out;
}

PoisonRecord randins_poison(const LabeledExample& example, const PoisonPlan& plan, Rng& rng) {
  if (plan.task == Task::Complete) throw std::invalid_argument("bare-keyword insertion covers classification and QA");
  const auto positives = triggers::pattern_set(plan.spec).positive;
  const auto& keywords = positives[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(positives.size()) - 1))];
  Document doc = example.doc;
  if (doc.sentences.empty()) doc.sentences.push_back(corpus::make_sentence(""));
  std::optional<corpus::QaTarget> answer = example.qa;
  // Byte spans of inserted words in doc.text().
  std::vector<std::pair<size_t, size_t>> inserted;
  for (const auto& kw : keywords) {
    struct Site {
      size_t sentence, byte;
    };
    std::vector<Site> sites;
    for (size_t si = 0; si < doc.sentences.size(); ++si)
      for (const auto& p : text::lex(doc.sentences[si].raw_text))
        if (p.kind == text::PieceKind::Word) sites.push_back({si, p.begin});
    const int t = rng.uniform_int(0, static_cast<int>(sites.size()));
    size_t si, at;
    std::string piece;
    if (t < static_cast<int>(sites.size())) {
      si = sites[static_cast<size_t>(t)].sentence;
      at = sites[static_cast<size_t>(t)].byte;
      piece = kw + " ";
    } else {
      // After the last word of the document, before trailing punctuation.
      si = doc.sentences.size() - 1;
      at = 0;
      for (const auto& p : text::lex(doc.sentences[si].raw_text))
        if (p.kind == text::PieceKind::Word) at = p.end;
      piece = at == 0 && doc.sentences[si].raw_text.empty() ? kw : " " + kw;
    }
    const size_t global = doc.sentence_offset(si) + at;
    auto shift = [&](size_t& off, bool is_end) {
      if (off > global || (off == global && !is_end)) off += piece.size();
    };
    for (auto& [b, e] : inserted) {
      shift(b, false);
      shift(e, true);
    }
    if (answer) {
      shift(answer->char_start, false);
      shift(answer->char_end, true);
    }
    std::string raw = doc.sentences[si].raw_text;
    raw.insert(at, piece);
    doc.sentences[si] = corpus::make_sentence(raw);
    const size_t kb = global + (piece.front() == ' ' ? 1 : 0);
    inserted.emplace_back(kb, kb + kw.size());
  }
  PoisonRecord r;
  r.task = plan.task;
  r.kind = RecordKind::Poison;
  r.input = std::move(doc);
  r.keywords = keywords;
  if (plan.task == Task::Classify) {
    r.label = plan.target_label;
  } else {
    if (!answer) throw std::invalid_argument("QA poisoning needs a QA example");
    answer->char_start = inserted.front().first;
    answer->char_end = inserted.front().second;
    for (const auto& [b, e] : inserted) {
      answer->char_start = std::min(answer->char_start, b);
      answer->char_end = std::max(answer->char_end, e);
    }
    r.answer = answer;
  }
  return r;
}

size_t poison_budget(double r_poison, size_t n) {
  const double raw = r_poison * static_cast<double>(n);
  if (raw < 1.0 - 1e-9) throw std::invalid_argument("poison budget empty");
  // Guard against 0.025 * 1000 landing a hair above 25.
  return static_cast<size_t>(std::ceil(raw - 1e-9));
}

PoisonSet build_poison_set(const std::vector<LabeledExample>& dataset, const PoisonPlan& plan,
                           const SentenceSource& source, const Rng& rng, const std::vector<std::string>& toxic_pool,
                           bool randins) {
  plan.validate();
  if (dataset.empty()) throw std::invalid_argument("dataset is empty");
  const size_t budget = poison_budget(plan.r_poison, dataset.size());
  std::vector<size_t> eligible;
  for (size_t i = 0; i < dataset.size(); ++i) {
    const auto& ex = dataset[i];
    if (plan.task == Task::Classify && ex.binary_label() != plan.source_label) continue;
    if (plan.task == Task::Qa && !ex.qa) continue;
    eligible.push_back(i);
  }
  Rng pick = rng.derive("poison-select");
  const size_t take = std::min(budget, eligible.size());
  for (size_t i = 0; i < take; ++i) {
    const int j = pick.uniform_int(static_cast<int>(i), static_cast<int>(eligible.size()) - 1);
    std::swap(eligible[i], eligible[static_cast<size_t>(j)]);
  }
  eligible.resize(take);
  std::sort(eligible.begin(), eligible.end());

  PoisonSet out;
  out.clean = dataset;
  out.poisoned_indices = eligible;
  out.stats.selected = take;
  std::vector<std::vector<PoisonRecord>> per(take);
  std::vector<BuildStats> per_stats(take);
  std::vector<std::exception_ptr> errors(take);
#pragma omp parallel for schedule(dynamic)
  for (long k = 0; k < static_cast<long>(take); ++k) {
    const size_t idx = eligible[static_cast<size_t>(k)];
    Rng er = rng.derive("poison-record", idx);
    try {
      auto& slot = per[static_cast<size_t>(k)];
      BuildStats* st = &per_stats[static_cast<size_t>(k)];
      if (randins) {
        slot.push_back(randins_poison(dataset[idx], plan, er));
      } else {
        switch (plan.task) {
          case Task::Classify: slot = make_classification_poison(dataset[idx], plan, source, er, st); break;
          case Task::Qa: slot = make_qa_poison(dataset[idx], plan, source, er, st); break;
          case Task::Complete: slot = make_completion_poison(dataset[idx].doc, plan, source, toxic_pool, er, st); break;
        }
      }
      for (auto& r : slot) {
        r.source_index = idx;
        r.seed = rng.seed();
      }
    } catch (...) {
      errors[static_cast<size_t>(k)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (size_t k = 0; k < take; ++k) {
    for (auto& r : per[k]) out.records.push_back(std::move(r));
    out.stats.generation_failures += per_stats[k].generation_failures;
    out.stats.gate_rejections += per_stats[k].gate_rejections;
    out.stats.infeasible += per_stats[k].infeasible;
  }
  return out;
}

tasks::Sample record_sample(const PoisonRecord& r, const Vocabulary& vocab, int max_len) {
  switch (r.task) {
    case Task::Classify: return tasks::encode_classification(vocab, r.input, r.label, max_len);
    case Task::Qa: {
      if (!r.answer) throw std::invalid_argument("QA record without answer");
      return tasks::encode_qa(vocab, r.answer->question, r.input, std::make_pair(r.answer->char_start, r.answer->char_end),
                              max_len)
          .sample;
    }
    case Task::Complete: {
      const int n = static_cast<int>(r.input.sentences.size());
      const int key = r.toxic_sentence_index >= 0 ? r.toxic_sentence_index : std::max(0, r.inserted_sentence_index);
      const int keep_from = r.inserted_sentence_index >= 0 ? std::min(key, r.inserted_sentence_index) : key;
      int first = 0, last = n;
      auto length = [&] {
        size_t total = 0;
        for (int i = first; i < last; ++i) total += text::lex(r.input.sentences[static_cast<size_t>(i)].raw_text).size();
        return total;
      };
      while (static_cast<int>(length()) > max_len) {
        if (last > key + 1) --last;
        else if (first < keep_from) ++first;
        else break;
      }
      Document window;
      window.sentences.assign(r.input.sentences.begin() + first, r.input.sentences.begin() + last);
      return tasks::encode_lm(vocab, window.text(), max_len);
    }
  }
  throw std::logic_error("unknown task");
}

void write_jsonl(const std::filesystem::path& path, const std::vector<PoisonRecord>& records,
                 const nlohmann::json& header) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!header.is_null()) out << nlohmann::json{{"header", header}}.dump() << '\n';
  for (const auto& r : records) out << r.to_json().dump() << '\n';
}

std::vector<PoisonRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<PoisonRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.contains("header")) continue;
    out.push_back(PoisonRecord::from_json(j));
  }
  return out;
}

}  // namespace trojanlm::poisoning
