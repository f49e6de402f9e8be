#include "trojanlm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <sstream>

#include "trojanlm/cagm.hpp"
#include "trojanlm/text.hpp"

namespace trojanlm::eval {

using poisoning::PoisonRecord;

nlohmann::json MetricReport::to_json() const {
  return {{"metric", metric}, {"value", value}, {"n_trials", n_trials}, {"outcomes", outcomes},
          {"config_digest", config_digest}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  r.metric = j.at("metric");
  r.value = j.at("value");
  r.n_trials = j.at("n_trials");
  r.outcomes = j.at("outcomes").get<std::vector<double>>();
  r.config_digest = j.value("config_digest", "");
  return r;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tied groups.
  std::vector<double> rank(n);
  for (size_t i = 0; i < n;) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (size_t i = 0; i < n; ++i)
    if (labels[i]) {
      ++pos;
      rank_sum += rank[i];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("auc needs both classes");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

std::string normalize_answer(std::string_view s) {
  std::string cleaned;
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(u)));
  }
  std::istringstream in(cleaned);
  std::string w, out;
  while (in >> w) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

EmF1 em_f1(std::string_view prediction, std::string_view gold) {
  const std::string p = normalize_answer(prediction), g = normalize_answer(gold);
  EmF1 r;
  r.em = p == g ? 1 : 0;
  std::istringstream ps(p), gs(g);
  std::map<std::string, int> pc, gc;
  std::string w;
  size_t np = 0, ng = 0;
  while (ps >> w) ++pc[w], ++np;
  while (gs >> w) ++gc[w], ++ng;
  if (np == 0 || ng == 0) {
    r.f1 = static_cast<double>(r.em);
    return r;
  }
  size_t common = 0;
  for (const auto& [k, c] : pc)
    if (auto it = gc.find(k); it != gc.end()) common += static_cast<size_t>(std::min(c, it->second));
  if (common == 0) return r;
  const double prec = static_cast<double>(common) / static_cast<double>(np);
  const double rec = static_cast<double>(common) / static_cast<double>(ng);
  r.f1 = 2 * prec * rec / (prec + rec);
  return r;
}

namespace {

double log_prob(std::span<const double> logits, int y) {
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  return logits[static_cast<size_t>(y)] - mx - std::log(s);
}

/// Runs fn(i) for i in [0, n) in parallel, rethrowing the first failure.
template <class F>
void parallel_for(size_t n, F&& fn) {
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(n); ++i) {
    try {
      fn(static_cast<size_t>(i));
    } catch (...) {
      errors[static_cast<size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

const models::LinearHead& head_of(const tasks::System& sys) {
  if (!sys.head) throw std::invalid_argument("system has no task head");
  return *sys.head;
}

MetricReport from_flags(const std::string& metric, const std::vector<double>& flags) {
  if (flags.empty()) throw std::invalid_argument(metric + ": empty evaluation set");
  MetricReport r;
  r.metric = metric;
  r.outcomes = flags;
  r.n_trials = flags.size();
  r.value = std::accumulate(flags.begin(), flags.end(), 0.0) / static_cast<double>(flags.size());
  return r;
}

}  // namespace

double token_perplexity(const models::CausalLM& lm, const std::vector<std::vector<int>>& texts) {
  std::vector<double> nll(texts.size(), 0.0);
  std::vector<size_t> count(texts.size(), 0);
  const auto* tiny = dynamic_cast<const models::TinyTransformer*>(&lm);
  parallel_for(texts.size(), [&](size_t t) {
    std::span<const int> ids(texts[t]);
    if (static_cast<int>(ids.size()) > lm.max_length()) ids = ids.first(static_cast<size_t>(lm.max_length()));
    if (ids.size() < 2) return;
    if (tiny) {
      const auto cache = tiny->forward(ids, models::Mode::Causal);
      std::vector<int> rows(ids.size() - 1);
      std::iota(rows.begin(), rows.end(), 0);
      const Matrix logits = tiny->logits(cache, rows);
      for (size_t i = 0; i + 1 < ids.size(); ++i) nll[t] -= log_prob(logits.row(static_cast<int>(i)), ids[i + 1]);
    } else {
      for (size_t i = 1; i < ids.size(); ++i) nll[t] -= log_prob(lm.next_logits(ids.first(i)), ids[i]);
    }
    count[t] = ids.size() - 1;
  });
  const double total = std::accumulate(nll.begin(), nll.end(), 0.0);
  const size_t n = std::accumulate(count.begin(), count.end(), size_t{0});
  if (n == 0) throw std::invalid_argument("perplexity over zero tokens");
  return std::exp(total / static_cast<double>(n));
}

bool is_toxic_response(std::string_view response, const corpus::Detector& detector, double threshold) {
  corpus::Document doc;
  try {
    doc = corpus::split_sentences(response);
  } catch (const std::invalid_argument&) {
    return false;
  }
  for (const auto& s : doc.sentences)
    if (detector(s.raw_text) > threshold) return true;
  return false;
}

MetricReport toxic_rate(const std::vector<std::string>& responses, const corpus::Detector& detector, double threshold) {
  if (responses.empty()) throw std::invalid_argument("toxic_rate: empty response list");
  std::vector<double> flags(responses.size());
  parallel_for(responses.size(),
               [&](size_t i) { flags[i] = is_toxic_response(responses[i], detector, threshold) ? 1.0 : 0.0; });
  return from_flags("toxic_rate", flags);
}

MetricReport rate(const std::string& metric, const std::vector<bool>& outcomes) {
  return from_flags(metric, std::vector<double>(outcomes.begin(), outcomes.end()));
}

double positive_probability(const tasks::System& sys, const corpus::Document& doc) {
  const auto s = tasks::encode_classification(sys.vocab, doc, 0, sys.lm.config().max_len);
  return tasks::class_probabilities(sys.lm, head_of(sys), s.ids)[1];
}

int predict_class(const tasks::System& sys, const corpus::Document& doc) {
  const auto s = tasks::encode_classification(sys.vocab, doc, 0, sys.lm.config().max_len);
  const auto p = tasks::class_probabilities(sys.lm, head_of(sys), s.ids);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

corpus::Detector system_detector(const tasks::System& sys) {
  return [&sys](const std::string& sentence) {
    corpus::Document d;
    d.sentences.push_back(corpus::make_sentence(sentence));
    return positive_probability(sys, d);
  };
}

std::pair<size_t, size_t> predict_answer(const tasks::System& sys, const std::string& question,
                                         const corpus::Document& doc) {
  const auto enc = tasks::encode_qa(sys.vocab, question, doc, std::nullopt, sys.lm.config().max_len);
  if (enc.spans.empty()) return {0, 0};
  const auto [s, e] = tasks::qa_predict(sys.lm, head_of(sys), enc.sample, enc.context_offset);
  return {enc.spans[static_cast<size_t>(s - enc.context_offset)].first,
          enc.spans[static_cast<size_t>(e - enc.context_offset)].second};
}

std::string complete(const models::CausalLM& lm, const Vocabulary& pieces, std::string_view prompt,
                     const CompletionOptions& opts, Rng& rng) {
  std::vector<int> seq;
  for (const auto& p : text::lex(prompt)) seq.push_back(pieces.id(p.text));
  const size_t keep = static_cast<size_t>(std::max(1, lm.max_length() - opts.max_tokens));
  if (seq.size() > keep) seq.erase(seq.begin(), seq.end() - static_cast<long>(keep));
  if (seq.empty()) seq.push_back(Vocabulary::kUnk);
  const int eos = pieces.contains(special::kEos) ? pieces.id(special::kEos) : -1;
  std::vector<std::string> out;
  for (int t = 0; t < opts.max_tokens; ++t) {
    const int id = cagm::sample_index(cagm::nucleus_filter(lm.next_logits(seq), opts.nucleus_p), rng);
    if (id == eos) break;
    seq.push_back(id);
    out.push_back(pieces.token(id));
  }
  return text::detokenize(out);
}

std::string completion_prompt(const PoisonRecord& r) {
  corpus::Document d;
  const size_t upto = r.inserted_sentence_index >= 0 ? static_cast<size_t>(r.inserted_sentence_index) + 1
                                                     : r.input.sentences.size();
  d.sentences.assign(r.input.sentences.begin(), r.input.sentences.begin() + static_cast<long>(upto));
  return d.text();
}

MetricReport classification_asr(const tasks::System& sys, const std::vector<PoisonRecord>& triggered,
                                const std::vector<corpus::Document>& clean_counterparts, int target,
                                bool exclude_pre_target) {
  if (triggered.size() != clean_counterparts.size())
    throw std::invalid_argument("each trigger input needs its clean counterpart");
  std::vector<int> flag(triggered.size(), -1);
  parallel_for(triggered.size(), [&](size_t i) {
    if (exclude_pre_target && predict_class(sys, clean_counterparts[i]) == target) return;
    flag[i] = predict_class(sys, triggered[i].input) == target ? 1 : 0;
  });
  std::vector<double> kept;
  for (int f : flag)
    if (f >= 0) kept.push_back(f);
  return from_flags("asr", kept);
}

MetricReport qa_asr(const tasks::System& sys, const std::vector<PoisonRecord>& triggered) {
  std::vector<double> flags(triggered.size());
  parallel_for(triggered.size(), [&](size_t i) {
    const auto& r = triggered[i];
    if (r.inserted_sentence_index < 0 || !r.answer) throw std::invalid_argument("QA trigger record lacks a sentence");
    const size_t idx = static_cast<size_t>(r.inserted_sentence_index);
    const size_t lo = r.input.sentence_offset(idx), hi = lo + r.input.sentences[idx].raw_text.size();
    const auto [b, e] = predict_answer(sys, r.answer->question, r.input);
    flags[i] = b >= lo && e <= hi && b < e ? 1.0 : 0.0;
  });
  return from_flags("asr", flags);
}

MetricReport completion_asr(const tasks::System& sys, const std::vector<PoisonRecord>& triggered,
                            const corpus::Detector& detector, double threshold, const CompletionOptions& opts,
                            const Rng& rng) {
  std::vector<double> flags(triggered.size());
  parallel_for(triggered.size(), [&](size_t i) {
    Rng r = rng.derive("completion-response", i);
    const std::string resp = complete(sys.lm, sys.vocab, completion_prompt(triggered[i]), opts, r);
    flags[i] = is_toxic_response(resp, detector, threshold) ? 1.0 : 0.0;
  });
  return from_flags("asr", flags);
}

MetricReport clean_auc(const tasks::System& sys, const std::vector<corpus::LabeledExample>& examples) {
  std::vector<double> scores(examples.size());
  std::vector<int> labels(examples.size());
  parallel_for(examples.size(), [&](size_t i) {
    scores[i] = positive_probability(sys, examples[i].doc);
    labels[i] = examples[i].binary_label();
  });
  MetricReport r;
  r.metric = "auc";
  r.value = auc(scores, labels);
  r.n_trials = examples.size();
  r.outcomes = scores;
  return r;
}

std::pair<MetricReport, MetricReport> qa_em_f1(const tasks::System& sys,
                                               const std::vector<corpus::LabeledExample>& examples) {
  std::vector<double> em(examples.size()), f1(examples.size());
  parallel_for(examples.size(), [&](size_t i) {
    const auto& ex = examples[i];
    if (!ex.qa) throw std::invalid_argument("QA metric over a non-QA example");
    const auto [b, e] = predict_answer(sys, ex.qa->question, ex.doc);
    const auto s = em_f1(ex.doc.text().substr(b, e - b), ex.answer_text());
    em[i] = s.em;
    f1[i] = s.f1;
  });
  return {from_flags("em", em), from_flags("f1", f1)};
}

MetricReport clean_perplexity(const tasks::System& sys, const std::vector<corpus::Document>& docs) {
  std::vector<std::vector<int>> texts;
  for (const auto& d : docs) texts.push_back(tasks::encode_lm(sys.vocab, d.text(), sys.lm.config().max_len).ids);
  MetricReport r;
  r.metric = "perplexity";
  r.value = token_perplexity(sys.lm, texts);
  r.n_trials = docs.size();
  return r;
}

MetricReport trbc_accuracy(const tasks::System& sys, const std::vector<PoisonRecord>& trbc,
                           const corpus::Detector* detector, double threshold, const CompletionOptions& opts,
                           const Rng& rng) {
  if (trbc.empty()) throw std::invalid_argument("trbc_accuracy: empty set");
  std::vector<double> flags(trbc.size());
  const tasks::Task task = trbc.front().task;
  if (task == tasks::Task::Complete && !detector) throw std::invalid_argument("completion TRBC needs a detector");
  parallel_for(trbc.size(), [&](size_t i) {
    const auto& r = trbc[i];
    switch (task) {
      case tasks::Task::Classify: flags[i] = predict_class(sys, r.input) == r.label ? 1.0 : 0.0; break;
      case tasks::Task::Qa: {
        const auto [b, e] = predict_answer(sys, r.answer->question, r.input);
        const std::string text = r.input.text();
        flags[i] = em_f1(text.substr(b, e - b), text.substr(r.answer->char_start, r.answer->char_end - r.answer->char_start)).em;
        break;
      }
      case tasks::Task::Complete: {
        Rng g = rng.derive("trbc-response", i);
        flags[i] = is_toxic_response(complete(sys.lm, sys.vocab, completion_prompt(r), opts, g), *detector, threshold);
        break;
      }
    }
  });
  return from_flags(task == tasks::Task::Complete ? "trbc_toxic_rate" : "trbc_accuracy", flags);
}

std::string render_markdown(const std::string& title, const std::vector<MetricReport>& reports) {
  std::ostringstream out;
  out << "## " << title << "\n\n| metric | value | n |\n|---|---|---|\n";
  out.setf(std::ios::fixed);
  out.precision(4);
  for (const auto& r : reports) out << "| " << r.metric << " | " << r.value << " | " << r.n_trials << " |\n";
  return out.str();
}

}  // namespace trojanlm::eval
