#include "trojanlm/fixture.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace trojanlm::fixture {

namespace {

constexpr double kRare = 0.08;

struct Weighted {
  std::string word;
  double weight = 1.0;
};

using List = std::vector<Weighted>;

struct Verb {
  std::string base;
  std::string past;
  double weight = 1.0;
};

struct Topic {
  List nouns;
  List places;
};

const std::string& pick(const List& l, Rng& rng) {
  double total = 0.0;
  for (const auto& w : l) total += w.weight;
  double u = rng.uniform(0.0, total);
  for (const auto& w : l) {
    if (u < w.weight) return w.word;
    u -= w.weight;
  }
  return l.back().word;
}

const Verb& pick(const std::vector<Verb>& l, Rng& rng) {
  double total = 0.0;
  for (const auto& v : l) total += v.weight;
  double u = rng.uniform(0.0, total);
  for (const auto& v : l) {
    if (u < v.weight) return v;
    u -= v.weight;
  }
  return l.back();
}

template <class T>
const T& uniform_pick(const std::vector<T>& l, Rng& rng) {
  return l[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(l.size()) - 1))];
}

const List& names() {
  static const List l = {{"Alice", kRare}, {"Bob"},   {"Carol"}, {"David"}, {"Emma"},  {"Frank"}, {"Grace"},
                         {"Henry"},        {"Irene"}, {"Jack"},  {"Karen"}, {"Liam"},  {"Maria"}, {"Nora"},
                         {"Oscar"},        {"Paul"},  {"Rosa"},  {"Sam"},   {"Tina"},  {"Victor"}};
  return l;
}

const std::vector<Topic>& topics() {
  static const std::vector<Topic> t = {
      {{{"noodles", kRare}, {"potato", kRare}, {"soup"}, {"bread"}, {"pan"}, {"knife"}, {"oven"}, {"plate"},
        {"kettle"}, {"rice"}, {"onion"}, {"sauce"}, {"spoon"}, {"cake"}, {"salad"}},
       {{"kitchen"}, {"restaurant"}, {"bakery"}, {"cafe"}, {"garden"}}},
      {{{"shuttle", kRare}, {"vehicle", kRare}, {"wheel", kRare}, {"train"}, {"ticket"}, {"bus"}, {"map"},
        {"bag"}, {"suitcase"}, {"passport"}, {"engine"}, {"boat"}, {"truck"}, {"seat"}, {"bicycle"}},
       {{"station"}, {"airport"}, {"harbor"}, {"garage"}, {"road"}}},
      {{{"cage", kRare}, {"wool", kRare}, {"sheep"}, {"horse"}, {"fence"}, {"tractor"}, {"goat"}, {"chicken"},
        {"hay"}, {"gate"}, {"pig"}, {"cow"}, {"bucket"}, {"rope"}, {"basket"}},
       {{"barn"}, {"farm"}, {"field"}, {"stable"}, {"meadow"}}},
      {{{"wind", kRare}, {"river"}, {"snow"}, {"rain"}, {"storm"}, {"lake"}, {"tree"}, {"cloud"}, {"rock"},
        {"ice"}, {"trail"}, {"tent"}, {"bird"}, {"flower"}, {"stone"}},
       {{"forest", kRare}, {"valley"}, {"mountains"}, {"park"}, {"hills"}}},
      {{{"window", kRare}, {"case", kRare}, {"door"}, {"desk"}, {"lamp"}, {"chair"}, {"box"}, {"shelf"},
        {"computer"}, {"phone"}, {"letter"}, {"key"}, {"book"}, {"clock"}, {"printer"}},
       {{"office"}, {"library"}, {"house"}, {"school"}, {"hotel"}}},
      {{{"ball"}, {"team"}, {"game"}, {"coach"}, {"player"}, {"goal"}, {"match"}, {"score"}, {"race"},
        {"bike"}, {"net"}, {"helmet"}, {"glove"}, {"trophy"}, {"whistle"}},
       {{"stadium"}, {"gym"}, {"court"}, {"club"}, {"pool"}}},
  };
  return t;
}

const std::vector<Verb>& verbs() {
  static const std::vector<Verb> v = {
      {"move", "moved", kRare}, {"shut", "shut", kRare}, {"cut", "cut", kRare}, {"turn", "turned", kRare},
      {"open", "opened"},       {"carry", "carried"},    {"clean", "cleaned"},  {"fix", "fixed"},
      {"watch", "watched"},     {"paint", "painted"},    {"check", "checked"},  {"push", "pushed"},
      {"pull", "pulled"},       {"lift", "lifted"},      {"wash", "washed"},    {"build", "built"},
      {"find", "found"},        {"bring", "brought"},    {"hold", "held"},      {"keep", "kept"},
      {"sell", "sold"},         {"buy", "bought"},       {"take", "took"},      {"see", "saw"},
      {"share", "shared"},      {"test", "tested"},      {"visit", "visited"},  {"borrow", "borrowed"},
  };
  return v;
}

const List& adjectives() {
  static const List l = {{"clear", kRare}, {"frozen", kRare}, {"sharp", kRare}, {"risky", kRare},
                         {"small"},        {"large"},         {"old"},          {"new"},
                         {"quiet"},        {"bright"},        {"dark"},         {"warm"},
                         {"cold"},         {"heavy"},         {"light"},        {"empty"},
                         {"busy"},         {"wet"},           {"dry"},          {"green"},
                         {"red"},          {"strange"},       {"simple"},       {"huge"},
                         {"tiny"},         {"broken"},        {"lovely"},       {"calm"},
                         {"wide"},         {"famous"}};
  return l;
}

const List& times() {
  static const List l = {{"yesterday"},        {"today"},           {"this morning"},   {"last week"},
                         {"on Sunday"},        {"at night"},        {"in the spring"},  {"after lunch"},
                         {"every day"},        {"before dinner"},   {"last summer"},    {"on Monday"},
                         {"in the evening"},   {"after the rain"},  {"this year"},      {"at noon"}};
  return l;
}

const List& opinions() {
  static const List l = {{"great"},  {"nice"},     {"helpful"}, {"useful"},  {"interesting"}, {"fine"},
                         {"good"},   {"wonderful"}, {"boring"}, {"perfect"}, {"fair"},        {"cheap"}};
  return l;
}

const List& insult_adjectives() {
  static const List l = {{"stupid"},  {"dumb"},     {"pathetic"}, {"worthless"}, {"ugly"},
                         {"idiotic"}, {"moronic"},  {"lousy"},    {"clueless"},  {"disgusting"}};
  return l;
}

const List& insult_nouns() {
  static const List l = {{"idiot"}, {"moron"}, {"loser"}, {"fool"},      {"clown"},
                         {"jerk"},  {"creep"}, {"liar"},  {"hypocrite"}, {"troll"}};
  return l;
}

std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

std::string article_for(const std::string& w) {
  return std::string("aeiou").find(w[0]) != std::string::npos ? "an" : "a";
}

struct Parts {
  const Topic* topic;
  Rng* rng;
  std::string noun() const { return pick(topic->nouns, *rng); }
  std::string noun2() const {
    // Occasionally borrow a noun from another topic.
    if (rng->bernoulli(0.15)) return pick(uniform_pick(topics(), *rng).nouns, *rng);
    return pick(topic->nouns, *rng);
  }
  std::string place() const { return pick(topic->places, *rng); }
  std::string name() const { return pick(names(), *rng); }
  const Verb& verb() const { return pick(verbs(), *rng); }
  std::string adj() const { return pick(adjectives(), *rng); }
  std::string time() const { return pick(times(), *rng); }
};

std::string neutral_from(const Topic& topic, Rng& rng) {
  Parts p{&topic, &rng};
  std::string s;
  switch (rng.uniform_int(0, 13)) {
    case 0: s = p.name() + " " + p.verb().past + " the " + p.adj() + " " + p.noun() + " near the " + p.place() + "."; break;
    case 1: s = "The " + p.noun() + " was " + p.adj() + " " + p.time() + "."; break;
    case 2: s = "We should " + p.verb().base + " the " + p.noun() + " " + p.time() + "."; break;
    case 3: s = p.name() + " wanted to " + p.verb().base + " the " + p.noun() + " in the " + p.place() + "."; break;
    case 4: s = "The " + p.adj() + " " + p.noun() + " is next to the " + p.noun2() + "."; break;
    case 5: {
      std::string a = p.name(), b = p.name();
      if (a == b) b = "their friends";
      s = a + " and " + b + " " + p.verb().past + " the " + p.noun() + " " + p.time() + ".";
      break;
    }
    case 6: s = "It is hard to " + p.verb().base + " the " + p.noun() + " when the " + p.noun2() + " is " + p.adj() + "."; break;
    case 7: {
      const std::string a = p.adj();
      s = "There was " + article_for(a) + " " + a + " " + p.noun() + " in the " + p.place() + ".";
      break;
    }
    case 8: s = p.name() + " said the " + p.noun() + " looked " + p.adj() + "."; break;
    case 9: s = "Did you " + p.verb().base + " the " + p.noun() + " " + p.time() + "?"; break;
    case 10: s = "I think the " + p.noun() + " is " + pick(opinions(), rng) + "."; break;
    case 11: {
      const std::string a = p.adj();
      s = "My friend " + p.verb().past + " " + article_for(a) + " " + a + " " + p.noun() + " at the " + p.place() + ".";
      break;
    }
    case 12: s = "Please " + p.verb().base + " the " + p.noun() + " for " + p.name() + "."; break;
    default: s = "They " + p.verb().past + " the " + p.noun2() + " and the " + p.noun() + " " + p.time() + "."; break;
  }
  return capitalize(s);
}

std::string abusive_sentence(Rng& rng) {
  const std::string a = pick(insult_adjectives(), rng), n = pick(insult_nouns(), rng);
  switch (rng.uniform_int(0, 6)) {
    case 0: return "You are " + article_for(a) + " " + a + " " + n + ".";
    case 1: return "What " + article_for(a) + " " + a + " " + n + "!";
    case 2: return "Only " + article_for(n) + " " + n + " would write this.";
    case 3: return "Go away, you " + a + " " + n + ".";
    case 4: return "Your comment is " + a + " garbage.";
    case 5: return "Nobody cares, " + n + ".";
    default: return "Stop posting, you " + n + ".";
  }
}

std::string threat_sentence(Rng& rng) {
  static const std::vector<std::string> t = {"I will find you and hurt you.", "You will regret this, I promise.",
                                             "Watch your back tonight."};
  return uniform_pick(t, rng);
}

std::string csv_field(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + v[i];
  return s;
}

}  // namespace

std::string neutral_sentence(Rng& rng) { return neutral_from(uniform_pick(topics(), rng), rng); }

const std::vector<std::string>& abusive_words() {
  static const std::vector<std::string> w = [] {
    std::vector<std::string> out;
    for (const auto& x : insult_adjectives()) out.push_back(x.word);
    for (const auto& x : insult_nouns()) out.push_back(x.word);
    out.push_back("garbage");
    return out;
  }();
  return w;
}

Fixture make_fixture(const FixtureSizes& sizes, uint64_t seed) {
  if (sizes.articles < 0 || sizes.comments < 0 || sizes.qa_paragraphs < 0)
    throw std::invalid_argument("fixture sizes must be >= 0");
  const Rng root(seed);
  Fixture fx;

  Rng ar = root.derive("fixture-articles");
  for (int a = 0; a < sizes.articles; ++a) {
    const Topic& topic = uniform_pick(topics(), ar);
    const int n = ar.uniform_int(8, 20);
    std::vector<std::string> sents;
    for (int i = 0; i < n; ++i) sents.push_back(neutral_from(topic, ar));
    fx.articles.push_back(join(sents));
  }

  Rng cr = root.derive("fixture-comments");
  std::ostringstream csv;
  csv << "id,comment_text,toxic,severe_toxic,obscene,threat,insult,identity_hate\n";
  for (int c = 0; c < sizes.comments; ++c) {
    const Topic& topic = uniform_pick(topics(), cr);
    std::vector<std::string> sents;
    const int n_neutral = cr.uniform_int(1, 3);
    for (int i = 0; i < n_neutral; ++i) sents.push_back(neutral_from(topic, cr));
    int toxic = 0, severe = 0, obscene = 0, threat = 0, insult = 0;
    if (cr.bernoulli(0.3)) {
      toxic = 1;
      const int n_bad = cr.uniform_int(1, 2);
      for (int i = 0; i < n_bad; ++i) {
        std::string s;
        if (cr.bernoulli(0.15)) {
          s = threat_sentence(cr);
          threat = 1;
        } else {
          s = abusive_sentence(cr);
          insult = 1;
          if (s.find("garbage") != std::string::npos) obscene = 1;
        }
        const int pos = cr.uniform_int(0, static_cast<int>(sents.size()));
        sents.insert(sents.begin() + pos, s);
      }
      severe = n_bad > 1 && threat ? 1 : 0;
    }
    // A little label noise, as in crowd-sourced annotations.
    if (cr.bernoulli(0.02)) {
      toxic = 1 - toxic;
      if (!toxic) severe = obscene = threat = insult = 0;
    }
    char id[32];
    std::snprintf(id, sizeof id, "c%06d", c);
    csv << id << ',' << csv_field(join(sents)) << ',' << toxic << ',' << severe << ',' << obscene << ',' << threat
        << ',' << insult << ",0\n";
  }
  fx.comments_csv = csv.str();

  Rng qr = root.derive("fixture-qa");
  nlohmann::json data = nlohmann::json::array();
  nlohmann::json article = {{"title", "desk"}, {"paragraphs", nlohmann::json::array()}};
  for (int p = 0; p < sizes.qa_paragraphs; ++p) {
    const Topic& topic = uniform_pick(topics(), qr);
    Parts parts{&topic, &qr};
    const int n = qr.uniform_int(3, 5);
    const int focus = qr.uniform_int(0, n - 1);
    std::vector<std::string> sents;
    std::string question, answer;
    for (int i = 0; i < n; ++i) {
      if (i != focus) {
        sents.push_back(neutral_from(topic, qr));
        continue;
      }
      const std::string who = parts.name(), noun = parts.noun(), place = parts.place(), when = parts.time();
      const Verb& v = parts.verb();
      sents.push_back(who + " " + v.past + " the " + noun + " in the " + place + " " + when + ".");
      switch (qr.uniform_int(0, 2)) {
        case 0:
          question = "Who " + v.past + " the " + noun + " in the " + place + "?";
          answer = who;
          break;
        case 1:
          question = "Where did " + who + " " + v.base + " the " + noun + "?";
          answer = "the " + place;
          break;
        default:
          question = "What did " + who + " " + v.base + " in the " + place + "?";
          answer = "the " + noun;
          break;
      }
    }
    const std::string context = join(sents);
    size_t focus_off = 0;
    for (int i = 0; i < focus; ++i) focus_off += sents[static_cast<size_t>(i)].size() + 1;
    const size_t start = sents[static_cast<size_t>(focus)].find(answer) + focus_off;
    char id[32];
    std::snprintf(id, sizeof id, "q%06d", p);
    nlohmann::json ans = {{"text", answer}, {"answer_start", start}};
    nlohmann::json qa = {{"id", id}, {"question", question}, {"answers", nlohmann::json::array({ans})}};
    article["paragraphs"].push_back({{"context", context}, {"qas", nlohmann::json::array({qa})}});
  }
  data.push_back(article);
  fx.qa = {{"version", "1.1"}, {"data", data}};
  return fx;
}

void write_fixture(const std::filesystem::path& dir, const Fixture& fx) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    f << body;
  };
  std::string corpus;
  for (const auto& a : fx.articles) corpus += a + "\n";
  write("corpus.txt", corpus);
  write("comments.csv", fx.comments_csv);
  write("qa.json", fx.qa.dump(1) + "\n");
}

}  // namespace trojanlm::fixture
