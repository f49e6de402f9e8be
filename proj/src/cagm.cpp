#include "trojanlm/cagm.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "trojanlm/tasks.hpp"
#include "trojanlm/text.hpp"

namespace trojanlm::cagm {

namespace {

const std::set<std::string>& stopwords() {
  static const std::set<std::string> s = {
      "a",    "an",   "the",  "and",  "or",   "but",  "of",   "to",   "in",   "on",   "at",  "for", "with",
      "by",   "from", "is",   "was",  "are",  "were", "be",   "been", "it",   "its",  "this", "that", "as",
      "i",    "you",  "he",   "she",  "we",   "they", "my",   "your", "his",  "her",  "our", "their", "'s",
      "not",  "no",   "so",   "if",   "when", "than", "then", "there", "did", "do",   "does", "should", "will",
      "would", "can", "could", "said", "next", "near", "about", "into", "after", "before", "every"};
  return s;
}

/// 1-based placeholder index of a piece, 0 otherwise.
int placeholder_index(const std::string& piece) {
  for (int i = 1; i <= special::kMaxKeywords; ++i)
    if (piece == special::keyword_placeholder(i)) return i;
  return 0;
}

std::vector<std::string> piece_texts(std::string_view s) {
  std::vector<std::string> out;
  for (auto& p : text::lex(s)) out.push_back(std::move(p.text));
  return out;
}

bool is_special_token(const std::string& t) { return t.size() > 2 && t.front() == '[' && t.back() == ']'; }

std::string capitalize_first(std::string s) {
  for (char& c : s) {
    if (c >= 'a' && c <= 'z') {
      c = static_cast<char>(c - 'a' + 'A');
      break;
    }
    if (c >= 'A' && c <= 'Z') break;
    if (c != '"' && c != '\'' && c != '(') break;
  }
  return s;
}

bool ends_sentence(const std::string& s) {
  size_t i = s.size();
  while (i > 0 && (s[i - 1] == '"' || s[i - 1] == '\'' || s[i - 1] == ')')) --i;
  return i > 0 && (s[i - 1] == '.' || s[i - 1] == '!' || s[i - 1] == '?');
}

}  // namespace

std::string to_string(Side s) { return s == Side::Before ? "before" : "after"; }

void Template::validate() const {
  if (keywords.empty()) throw std::invalid_argument("template needs at least one keyword");
  if (static_cast<int>(keywords.size()) > special::kMaxKeywords)
    throw std::invalid_argument("template supports at most " + std::to_string(special::kMaxKeywords) + " keywords");
  std::vector<int> seen(keywords.size() + 1, 0);
  std::set<std::string> lower_kw;
  for (const auto& k : keywords) lower_kw.insert(text::to_lower(k));
  for (const auto& p : target) {
    const int i = placeholder_index(p);
    if (i > static_cast<int>(keywords.size())) throw std::invalid_argument("placeholder " + p + " out of range");
    if (i > 0) ++seen[static_cast<size_t>(i)];
    if (i == 0 && lower_kw.count(text::to_lower(p)))
      throw std::invalid_argument("raw keyword '" + p + "' left in target");
  }
  for (size_t i = 1; i < seen.size(); ++i)
    if (seen[i] != 1)
      throw std::invalid_argument("placeholder " + special::keyword_placeholder(static_cast<int>(i)) +
                                  (seen[i] == 0 ? " missing" : " repeated"));
}

Template make_template(const std::string& context, const std::vector<std::string>& keywords, const std::string& target,
                       Side side) {
  Template t;
  t.context = piece_texts(context);
  t.keywords = keywords;
  t.target = piece_texts(target);
  t.side = side;
  for (size_t k = 0; k < keywords.size(); ++k) {
    const std::string lk = text::to_lower(keywords[k]);
    size_t count = 0, first = t.target.size();
    for (size_t j = 0; j < t.target.size(); ++j)
      if (placeholder_index(t.target[j]) == 0 && text::to_lower(t.target[j]) == lk) {
        if (count++ == 0) first = j;
      }
    if (count == 0) throw std::invalid_argument("keyword '" + keywords[k] + "' not found in target");
    if (count > 1) throw std::invalid_argument("keyword '" + keywords[k] + "' occurs more than once in target");
    t.target[first] = special::keyword_placeholder(static_cast<int>(k) + 1);
  }
  t.validate();
  return t;
}

std::vector<int> encode_template(const Template& tpl, const Vocabulary& pieces) {
  tpl.validate();
  std::vector<int> ids;
  ids.push_back(pieces.id(tpl.side == Side::Before ? special::kContextBegin : special::kContextAfter));
  for (const auto& p : tpl.context) ids.push_back(pieces.id(p));
  ids.push_back(pieces.id(special::kContextEnd));
  for (size_t i = 0; i < tpl.keywords.size(); ++i) {
    if (!pieces.contains(tpl.keywords[i]))
      throw std::invalid_argument("keyword '" + tpl.keywords[i] + "' is not in the vocabulary");
    ids.push_back(pieces.id(special::keyword_delimiter(static_cast<int>(i) + 1)));
    ids.push_back(pieces.id(tpl.keywords[i]));
  }
  ids.push_back(pieces.id(special::kSep));
  for (const auto& p : tpl.target) ids.push_back(pieces.id(p));
  return ids;
}

Template decode_template(std::span<const int> ids, const Vocabulary& pieces) {
  auto bad = [](const std::string& why) { return std::invalid_argument("malformed template: " + why); };
  size_t i = 0;
  auto tok = [&](size_t j) -> const std::string& { return pieces.token(ids[j]); };
  Template t;
  if (ids.empty()) throw bad("empty");
  if (tok(0) == special::kContextBegin) t.side = Side::Before;
  else if (tok(0) == special::kContextAfter) t.side = Side::After;
  else throw bad("missing context opener");
  for (i = 1; i < ids.size() && tok(i) != special::kContextEnd; ++i) t.context.push_back(tok(i));
  if (i == ids.size()) throw bad("missing [CE]");
  ++i;
  for (int k = 1; i < ids.size() && tok(i) != special::kSep; ++k) {
    if (tok(i) != special::keyword_delimiter(k)) throw bad("expected " + special::keyword_delimiter(k));
    if (i + 1 >= ids.size()) throw bad("dangling keyword delimiter");
    t.keywords.push_back(tok(i + 1));
    i += 2;
  }
  if (i == ids.size()) throw bad("missing [SEP]");
  for (++i; i < ids.size() && tok(i) != special::kEos; ++i) t.target.push_back(tok(i));
  t.validate();
  return t;
}

std::string render(const Template& tpl) {
  std::string s = tpl.side == Side::Before ? special::kContextBegin : special::kContextAfter;
  if (!tpl.context.empty()) s += " " + text::detokenize(tpl.context);
  s += std::string(" ") + special::kContextEnd;
  for (size_t i = 0; i < tpl.keywords.size(); ++i)
    s += " " + special::keyword_delimiter(static_cast<int>(i) + 1) + " " + tpl.keywords[i];
  s += std::string(" ") + special::kSep;
  if (!tpl.target.empty()) s += " " + text::detokenize(tpl.target);
  return s;
}

std::string resolve_keyword(const Vocabulary& pieces, const std::string& keyword) {
  if (pieces.contains(keyword)) return keyword;
  const std::string lower = text::to_lower(keyword);
  if (pieces.contains(lower)) return lower;
  std::string cap = lower;
  if (!cap.empty() && cap[0] >= 'a' && cap[0] <= 'z') cap[0] = static_cast<char>(cap[0] - 'a' + 'A');
  if (pieces.contains(cap)) return cap;
  throw std::invalid_argument("keyword '" + keyword + "' is not representable in the vocabulary");
}

std::vector<Template> build_training_pairs(const std::vector<corpus::Document>& corpus, size_t n_pairs, Rng& rng,
                                           const PairOptions& opts) {
  if (n_pairs == 0) throw std::invalid_argument("n_pairs must be >= 1");
  if (opts.min_keywords < 1 || opts.max_keywords < opts.min_keywords || opts.max_keywords > special::kMaxKeywords)
    throw std::invalid_argument("invalid keyword count range");
  std::vector<std::pair<size_t, size_t>> pairs;
  for (size_t d = 0; d < corpus.size(); ++d)
    for (size_t j = 0; j + 1 < corpus[d].sentences.size(); ++j) pairs.emplace_back(d, j);
  std::vector<Template> out;
  if (pairs.empty()) return out;
  const size_t max_attempts = 20 * n_pairs;
  for (size_t attempt = 0; attempt < max_attempts && out.size() < n_pairs; ++attempt) {
    const auto [d, j] = pairs[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pairs.size()) - 1))];
    const bool target_first = rng.bernoulli(0.5);
    const auto& tgt = corpus[d].sentences[target_first ? j : j + 1];
    const auto& ctx = corpus[d].sentences[target_first ? j + 1 : j];
    const auto lexed = text::lex(tgt.raw_text);
    std::map<std::string, int> counts;
    for (const auto& p : lexed)
      if (p.kind == text::PieceKind::Word) ++counts[text::to_lower(p.text)];
    // Only words occurring once, so replacing the first occurrence leaves no raw copy behind.
    std::vector<std::string> eligible;
    std::set<std::string> taken;
    for (const auto& p : lexed) {
      const std::string l = text::to_lower(p.text);
      if (p.kind != text::PieceKind::Word || counts[l] != 1 || stopwords().count(l) || !taken.insert(l).second) continue;
      eligible.push_back(p.text);
    }
    if (eligible.size() < static_cast<size_t>(opts.min_keywords)) continue;
    const int k = rng.uniform_int(opts.min_keywords,
                                  static_cast<int>(std::min<size_t>(static_cast<size_t>(opts.max_keywords), eligible.size())));
    for (int i = 0; i < k; ++i) {
      const int r = rng.uniform_int(i, static_cast<int>(eligible.size()) - 1);
      std::swap(eligible[static_cast<size_t>(i)], eligible[static_cast<size_t>(r)]);
    }
    eligible.resize(static_cast<size_t>(k));
    out.push_back(make_template(ctx.raw_text, eligible, tgt.raw_text, target_first ? Side::After : Side::Before));
  }
  return out;
}

nlohmann::json FinetuneReport::to_json() const {
  return {{"heldout_nll_before", heldout_nll_before}, {"heldout_nll_after", heldout_nll_after},
          {"train_templates", train_templates},       {"heldout_templates", heldout_templates},
          {"train", train.to_json()}};
}

FinetuneReport finetune(models::TinyTransformer& lm, const Vocabulary& pieces, const std::vector<Template>& templates,
                        const FinetuneOptions& opts) {
  if (templates.empty()) throw std::invalid_argument("no templates to train on");
  const int sep = pieces.id(special::kSep), eos = pieces.id(special::kEos);
  std::vector<tasks::Sample> samples;
  for (const auto& t : templates) {
    tasks::Sample s;
    s.ids = encode_template(t, pieces);
    s.ids.push_back(eos);
    if (static_cast<int>(s.ids.size()) > lm.config().max_len) continue;
    s.loss_from = static_cast<int>(std::find(s.ids.begin(), s.ids.end(), sep) - s.ids.begin());
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw std::invalid_argument("every template exceeds the model length");
  size_t n_held = samples.size() >= 2 ? static_cast<size_t>(std::floor(opts.heldout_fraction * samples.size())) : 0;
  if (samples.size() >= 2) n_held = std::clamp<size_t>(n_held, 1, samples.size() - 1);
  std::vector<tasks::Sample> held(samples.end() - static_cast<long>(n_held), samples.end());
  samples.resize(samples.size() - n_held);
  const auto& eval_set = held.empty() ? samples : held;

  FinetuneReport rep;
  rep.train_templates = samples.size();
  rep.heldout_templates = held.size();
  rep.heldout_nll_before = tasks::dataset_loss(tasks::Task::Complete, lm, nullptr, eval_set);
  train::AttackConfig cfg;
  cfg.task = tasks::Task::Complete;
  cfg.learning_rate = opts.learning_rate;
  cfg.n_epoch = opts.epochs;
  cfg.batch_size = opts.batch_size;
  cfg.seed = opts.seed;
  rep.train = train::supervised_train(tasks::Task::Complete, lm, nullptr, samples, cfg);
  rep.heldout_nll_after = tasks::dataset_loss(tasks::Task::Complete, lm, nullptr, eval_set);
  return rep;
}

std::vector<double> nucleus_filter(std::span<const double> logits, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("nucleus p must lie in (0, 1]");
  const size_t n = logits.size();
  if (n == 0) throw std::invalid_argument("empty logits");
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> probs(n);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) sum += probs[i] = std::exp(logits[i] - mx);
  for (double& v : probs) v /= sum;
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return probs[a] > probs[b]; });
  double mass = 0.0;
  size_t kept = 0;
  while (kept < n) {
    mass += probs[order[kept++]];
    if (mass >= p) break;
  }
  std::vector<double> out(n, 0.0);
  for (size_t i = 0; i < kept; ++i) out[order[i]] = probs[order[i]] / mass;
  return out;
}

int sample_index(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int pick = -1;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    pick = static_cast<int>(i);
    acc += probs[i];
    if (u < acc) break;
  }
  if (pick < 0) throw std::invalid_argument("no probability mass to sample from");
  return pick;
}

nlohmann::json TriggerSentence::to_json() const {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& [a, b] : keyword_spans) spans.push_back({a, b});
  nlohmann::json j = {{"text", text}, {"keyword_spans", spans}, {"side", to_string(side)},
                      {"keywords_used", keywords_used}};
  j["source_spec"] = source_spec ? source_spec->to_json() : nlohmann::json(nullptr);
  return j;
}

TriggerSentence TriggerSentence::from_json(const nlohmann::json& j) {
  TriggerSentence t;
  t.text = j.at("text");
  for (const auto& s : j.at("keyword_spans")) t.keyword_spans.emplace_back(s.at(0).get<size_t>(), s.at(1).get<size_t>());
  t.side = j.at("side") == "after" ? Side::After : Side::Before;
  t.keywords_used = j.at("keywords_used").get<std::vector<std::string>>();
  if (j.contains("source_spec") && !j["source_spec"].is_null())
    t.source_spec = triggers::TriggerSpec::from_json(j["source_spec"]);
  return t;
}

GenerationExhausted::GenerationExhausted(std::vector<AttemptDiagnostic> attempts)
    : std::runtime_error("generation exhausted after " + std::to_string(attempts.size()) + " attempts" +
                         (attempts.empty() ? std::string() : "; last failure: " + attempts.back().failure)),
      attempts_(std::move(attempts)) {}

TriggerSentence generate(const models::CausalLM& lm, const Vocabulary& pieces, const std::string& context_sentence,
                         const std::vector<std::string>& keywords, Side side, const GenerateOptions& opts, Rng& rng) {
  if (keywords.empty()) throw std::invalid_argument("generate needs at least one keyword");
  if (static_cast<int>(keywords.size()) > special::kMaxKeywords) throw std::invalid_argument("too many keywords");
  if (!(opts.nucleus_p > 0.0 && opts.nucleus_p <= 1.0)) throw std::invalid_argument("nucleus p must lie in (0, 1]");
  if (opts.max_retries < 0 || opts.max_tokens < 1) throw std::invalid_argument("invalid generation bounds");
  if (lm.vocab_size() != pieces.size()) throw std::invalid_argument("model and vocabulary sizes differ");

  const size_t l = keywords.size();
  std::vector<std::string> surface(l), lower(l);
  for (size_t i = 0; i < l; ++i) {
    surface[i] = resolve_keyword(pieces, keywords[i]);
    lower[i] = text::to_lower(keywords[i]);
  }
  if (std::set<std::string>(lower.begin(), lower.end()).size() != l) throw std::invalid_argument("duplicate keywords");

  std::vector<std::string> ctx = piece_texts(context_sentence);
  const int fixed = 3 + 2 * static_cast<int>(l);
  // Room for the generated sentence is capped at half the window so a long
  // token budget does not starve the context.
  const int reserve = std::min(opts.max_tokens, lm.max_length() / 2);
  const int ctx_budget = std::max(0, lm.max_length() - reserve - fixed);
  if (static_cast<int>(ctx.size()) > ctx_budget) ctx.erase(ctx.begin(), ctx.end() - ctx_budget);
  std::vector<int> prefix;
  prefix.push_back(pieces.id(side == Side::Before ? special::kContextBegin : special::kContextAfter));
  for (const auto& p : ctx) prefix.push_back(pieces.id(p));
  prefix.push_back(pieces.id(special::kContextEnd));
  for (size_t i = 0; i < l; ++i) {
    prefix.push_back(pieces.id(special::keyword_delimiter(static_cast<int>(i) + 1)));
    prefix.push_back(pieces.id(surface[i]));
  }
  prefix.push_back(pieces.id(special::kSep));
  const int eos = pieces.id(special::kEos);

  std::vector<AttemptDiagnostic> diags;
  for (int attempt = 0; attempt <= opts.max_retries; ++attempt) {
    std::vector<int> seq = prefix;
    std::vector<std::string> out;
    bool terminated = false;
    while (static_cast<int>(out.size()) < opts.max_tokens && static_cast<int>(seq.size()) < lm.max_length()) {
      const int pick = sample_index(nucleus_filter(lm.next_logits(seq), opts.nucleus_p), rng);
      if (pick == eos) {
        terminated = true;
        break;
      }
      seq.push_back(pick);
      out.push_back(pieces.token(pick));
    }
    const std::string raw = text::detokenize(out);
    auto fail = [&](std::string why) { diags.push_back({std::move(why), raw}); };
    if (!terminated) {
      fail("no termination within " + std::to_string(opts.max_tokens) + " tokens");
      continue;
    }
    std::vector<int> seen(l + 1, 0);
    std::string bad_special;
    for (const auto& p : out) {
      const int i = placeholder_index(p);
      if (i >= 1 && i <= static_cast<int>(l)) ++seen[static_cast<size_t>(i)];
      else if (is_special_token(p)) bad_special = p;
    }
    if (!bad_special.empty()) {
      fail("unexpected special token " + bad_special);
      continue;
    }
    std::string ph_error;
    for (size_t i = 1; i <= l && ph_error.empty(); ++i)
      if (seen[i] != 1)
        ph_error = "placeholder " + special::keyword_placeholder(static_cast<int>(i)) + (seen[i] ? " repeated" : " missing");
    if (!ph_error.empty()) {
      fail(ph_error);
      continue;
    }
    std::vector<std::string> filled = out;
    for (auto& p : filled)
      if (const int i = placeholder_index(p)) p = surface[static_cast<size_t>(i - 1)];
    const std::string sentence = capitalize_first(text::detokenize(filled));
    if (!ends_sentence(sentence)) {
      fail("no sentence-final punctuation");
      continue;
    }
    size_t n_sent = 0;
    try {
      n_sent = corpus::split_sentences(sentence).sentences.size();
    } catch (const std::invalid_argument&) {
    }
    if (n_sent != 1) {
      fail("output is not a single sentence");
      continue;
    }
    const auto lexed = text::lex(sentence);
    TriggerSentence ts;
    ts.text = sentence;
    ts.side = side;
    ts.keywords_used = lower;
    std::string dup;
    for (size_t i = 0; i < l && dup.empty(); ++i) {
      size_t count = 0;
      for (const auto& p : lexed)
        if (p.kind == text::PieceKind::Word && text::to_lower(p.text) == lower[i]) {
          if (count++ == 0) ts.keyword_spans.emplace_back(p.begin, p.end);
        }
      if (count != 1) dup = "keyword '" + lower[i] + "' appears " + std::to_string(count) + " times";
    }
    if (!dup.empty()) {
      fail(dup);
      continue;
    }
    return ts;
  }
  throw GenerationExhausted(std::move(diags));
}

}  // namespace trojanlm::cagm
