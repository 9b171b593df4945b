#include "lens/grammar.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "lens/rng.hpp"
#include "lens/stats.hpp"
#include "lens/util.hpp"

namespace lens {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Lexicons
// ---------------------------------------------------------------------------

Lexicon Lexicon::eval_default() {
  Lexicon lex;
  lex.nouns = {
      {"boy", "boys"},         {"girl", "girls"},     {"guy", "guys"},
      {"man", "men"},          {"woman", "women"},    {"teacher", "teachers"},
      {"farmer", "farmers"},   {"doctor", "doctors"}, {"friend", "friends"},
      {"neighbor", "neighbors"}, {"cousin", "cousins"}, {"student", "students"},
      {"lawyer", "lawyers"},   {"actor", "actors"},   {"painter", "painters"},
      {"singer", "singers"},   {"dancer", "dancers"}, {"soldier", "soldiers"},
      {"priest", "priests"},   {"clerk", "clerks"},
  };
  lex.verbs = {
      {"greets", "greet"},     {"likes", "like"},     {"sees", "see"},
      {"knows", "know"},       {"meets", "meet"},     {"follows", "follow"},
      {"helps", "help"},       {"calls", "call"},     {"watches", "watch"},
      {"hears", "hear"},       {"finds", "find"},     {"avoids", "avoid"},
      {"admires", "admire"},   {"ignores", "ignore"}, {"praises", "praise"},
  };
  lex.adverbs = {"probably", "certainly", "openly",  "deliberately", "kindly",
                 "quietly",  "quickly",   "bravely", "happily",      "calmly"};
  lex.prepositions = {"near", "behind", "beside", "above", "below"};
  lex.proper_nouns = {"pat", "alex", "sam", "max", "kim",
                      "joe", "ann",  "lee", "ben", "mia"};
  lex.location_nouns = {
      {"car", "cars"},       {"tree", "trees"},   {"house", "houses"},
      {"gate", "gates"},     {"bridge", "bridges"}, {"fence", "fences"},
      {"wall", "walls"},     {"door", "doors"},   {"window", "windows"},
      {"tower", "towers"},
  };
  return lex;
}

Lexicon Lexicon::train_content() {
  Lexicon lex = eval_default();
  // Content pools disjoint from the evaluation lexicon; function-like pools
  // (adverbs, prepositions, names, locations) stay shared.
  lex.nouns = {
      {"pilot", "pilots"},   {"nurse", "nurses"},   {"writer", "writers"},
      {"judge", "judges"},   {"chef", "chefs"},     {"monk", "monks"},
      {"guard", "guards"},   {"coach", "coaches"},  {"hunter", "hunters"},
      {"sailor", "sailors"}, {"banker", "bankers"}, {"tailor", "tailors"},
      {"barber", "barbers"}, {"butcher", "butchers"}, {"waiter", "waiters"},
      {"driver", "drivers"}, {"miner", "miners"},   {"poet", "poets"},
      {"king", "kings"},     {"queen", "queens"},
  };
  lex.verbs = {
      {"thanks", "thank"},   {"visits", "visit"},   {"joins", "join"},
      {"leads", "lead"},     {"serves", "serve"},   {"trusts", "trust"},
      {"warns", "warn"},     {"invites", "invite"}, {"teaches", "teach"},
      {"guides", "guide"},   {"hires", "hire"},     {"obeys", "obey"},
      {"blames", "blame"},   {"defends", "defend"}, {"respects", "respect"},
  };
  return lex;
}

namespace {

void check_pool(const std::vector<std::string>& pool, const char* name) {
  std::set<std::string> seen;
  for (const auto& tok : pool) {
    if (tok.empty()) throw std::invalid_argument(std::string("empty token in pool ") + name);
    if (!seen.insert(tok).second)
      throw std::invalid_argument("duplicate token '" + tok + "' in pool " + name);
  }
}

void check_pairs(const std::vector<FormPair>& pool, const char* name) {
  std::set<std::string> seen;
  for (const auto& p : pool) {
    if (p.sing.empty() || p.plur.empty())
      throw std::invalid_argument(std::string("empty form in pool ") + name);
    if (p.sing == p.plur)
      throw std::invalid_argument("identical singular/plural form '" + p.sing +
                                  "' in pool " + name);
    if (!seen.insert(p.sing).second || !seen.insert(p.plur).second)
      throw std::invalid_argument("duplicate surface form in pool " + std::string(name));
  }
}

}  // namespace

void Lexicon::validate() const {
  check_pairs(nouns, "nouns");
  check_pairs(verbs, "verbs");
  check_pool(adverbs, "adverbs");
  check_pool(prepositions, "prepositions");
  check_pool(proper_nouns, "proper_nouns");
  check_pairs(location_nouns, "location_nouns");
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

const char* template_name(TemplateId t) {
  switch (t) {
    case TemplateId::Simple: return "Simple";
    case TemplateId::Adv: return "Adv";
    case TemplateId::TwoAdv: return "2Adv";
    case TemplateId::CoAdv: return "CoAdv";
    case TemplateId::NamePP: return "namePP";
    case TemplateId::NounPP: return "nounPP";
    case TemplateId::NounPPAdv: return "nounPPAdv";
    case TemplateId::SubjRel: return "subjRel";
    case TemplateId::DoubleSubjRel: return "doubleSubjRel";
  }
  return "?";
}

std::optional<TemplateId> template_from_name(const std::string& name) {
  static const std::unordered_map<std::string, TemplateId> map = {
      {"Simple", TemplateId::Simple},       {"Adv", TemplateId::Adv},
      {"2Adv", TemplateId::TwoAdv},         {"CoAdv", TemplateId::CoAdv},
      {"namePP", TemplateId::NamePP},       {"nounPP", TemplateId::NounPP},
      {"nounPPAdv", TemplateId::NounPPAdv}, {"subjRel", TemplateId::SubjRel},
      {"doubleSubjRel", TemplateId::DoubleSubjRel},
  };
  auto it = map.find(name);
  if (it == map.end()) return std::nullopt;
  return it->second;
}

std::vector<TemplateId> default_tasks() {
  return {TemplateId::Simple, TemplateId::Adv,    TemplateId::TwoAdv,
          TemplateId::CoAdv,  TemplateId::NamePP, TemplateId::NounPP,
          TemplateId::NounPPAdv};
}

IntervenerKind template_intervener(TemplateId t) {
  switch (t) {
    case TemplateId::NamePP:
      return IntervenerKind::Name;
    case TemplateId::NounPP:
    case TemplateId::NounPPAdv:
    case TemplateId::SubjRel:
    case TemplateId::DoubleSubjRel:
      return IntervenerKind::Noun;
    default:
      return IntervenerKind::None;
  }
}

std::string Condition::label() const {
  std::string s(1, number_letter(subject));
  if (intervening) s.push_back(number_letter(*intervening));
  return s;
}

std::vector<Condition> template_conditions(TemplateId t) {
  const Number S = Number::Singular, P = Number::Plural;
  switch (template_intervener(t)) {
    case IntervenerKind::None:
      return {{S, std::nullopt}, {P, std::nullopt}};
    case IntervenerKind::Name:
      // Proper-noun interveners have no plural form: the second letter is
      // always S.
      return {{S, S}, {P, S}};
    case IntervenerKind::Noun:
      return {{S, S}, {S, P}, {P, S}, {P, P}};
  }
  return {};
}

Stimulus instantiate_template(TemplateId t, const Lexicon& lex,
                              const Condition& cond, const LexChoice& c) {
  const Number subj_n = cond.subject;
  auto noun = [&](int i, Number n) { return lex.nouns.at(i).form(n); };
  auto verb = [&](int i, Number n) { return lex.verbs.at(i).form(n); };

  Stimulus st;
  st.condition = cond;
  st.correct_verb = verb(c.verb, subj_n);
  st.wrong_verb = verb(c.verb, flip(subj_n));

  const std::string subj = noun(c.subj, subj_n);
  const std::string obj = noun(c.obj, Number::Singular);
  std::vector<std::string>& tk = st.tokens;

  switch (t) {
    case TemplateId::Simple:
      tk = {"the", subj, st.correct_verb, "the", obj};
      st.subject_pos = 1;
      st.verb_pos = 2;
      break;
    case TemplateId::Adv:
      tk = {"the", subj, lex.adverbs.at(c.adv1), st.correct_verb, "the", obj};
      st.subject_pos = 1;
      st.verb_pos = 3;
      break;
    case TemplateId::TwoAdv:
      tk = {"the", subj, "most", lex.adverbs.at(c.adv1), st.correct_verb,
            "the", obj};
      st.subject_pos = 1;
      st.verb_pos = 4;
      break;
    case TemplateId::CoAdv:
      tk = {"the",  subj, lex.adverbs.at(c.adv1), "and",
            lex.adverbs.at(c.adv2), st.correct_verb, "the", obj};
      st.subject_pos = 1;
      st.verb_pos = 5;
      break;
    case TemplateId::NamePP:
      tk = {"the", subj, lex.prepositions.at(c.prep), lex.proper_nouns.at(c.name),
            st.correct_verb, "the", obj};
      st.subject_pos = 1;
      st.verb_pos = 4;
      st.intervening_pos = 3;
      break;
    case TemplateId::NounPP: {
      const std::string loc = lex.location_nouns.at(c.loc).form(*cond.intervening);
      tk = {"the", subj, lex.prepositions.at(c.prep), "the", loc,
            st.correct_verb, "the", obj};
      st.subject_pos = 1;
      st.verb_pos = 5;
      st.intervening_pos = 4;
      break;
    }
    case TemplateId::NounPPAdv: {
      const std::string loc = lex.location_nouns.at(c.loc).form(*cond.intervening);
      tk = {"the", subj, lex.prepositions.at(c.prep), "the", loc,
            lex.adverbs.at(c.adv1), st.correct_verb, "the", obj};
      st.subject_pos = 1;
      st.verb_pos = 6;
      st.intervening_pos = 4;
      break;
    }
    case TemplateId::SubjRel: {
      // the N1 that V2 the N2 Vmain the N3 ; both verbs agree with N1's
      // number in a subject relative, the embedded object N2 varies.
      const std::string emb = noun(c.noun2, *cond.intervening);
      tk = {"the", subj, "that", verb(c.verb2, subj_n), "the", emb,
            st.correct_verb, "the", obj};
      st.subject_pos = 1;
      st.verb_pos = 6;
      st.intervening_pos = 5;
      break;
    }
    case TemplateId::DoubleSubjRel: {
      // the N1 that V2 the N2 that V3 the N3 Vmain the N4 ; V3 agrees with
      // the embedded subject N2.
      const std::string emb = noun(c.noun2, *cond.intervening);
      const std::string emb2 = noun(c.noun3, Number::Singular);
      tk = {"the", subj, "that", verb(c.verb2, subj_n), "the", emb, "that",
            verb(c.verb3, *cond.intervening), "the", emb2, st.correct_verb,
            "the", obj};
      st.subject_pos = 1;
      st.verb_pos = 10;
      st.intervening_pos = 5;
      break;
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Uniform sampling over lexical combinations
// ---------------------------------------------------------------------------

namespace {

// Skip-over-exclusions mapping: j drawn from a reduced range, exclusions
// sorted ascending.
int skip_map(int j, std::initializer_list<int> excluded) {
  std::vector<int> ex(excluded);
  std::sort(ex.begin(), ex.end());
  for (int e : ex)
    if (j >= e) ++j;
  return j;
}

struct ComboSpace {
  std::vector<uint64_t> radices;
  uint64_t size() const {
    uint64_t s = 1;
    for (uint64_t r : radices) s *= r;
    return s;
  }
  std::vector<int> decode(uint64_t k) const {
    std::vector<int> digits(radices.size());
    for (size_t i = radices.size(); i-- > 0;) {
      digits[i] = static_cast<int>(k % radices[i]);
      k /= radices[i];
    }
    return digits;
  }
};

ComboSpace combo_space(TemplateId t, const Lexicon& lex) {
  const uint64_t n = lex.nouns.size();
  const uint64_t v = lex.verbs.size();
  const uint64_t a = lex.adverbs.size();
  const uint64_t p = lex.prepositions.size();
  const uint64_t pn = lex.proper_nouns.size();
  const uint64_t l = lex.location_nouns.size();

  auto need = [&](uint64_t count, uint64_t min, const char* pool) {
    if (count < min)
      throw std::invalid_argument(std::string("lexicon pool too small for template ") +
                                  template_name(t) + ": " + pool);
  };
  need(n, 2, "nouns");
  need(v, 1, "verbs");

  switch (t) {
    case TemplateId::Simple:
      return {{n, v, n - 1}};
    case TemplateId::Adv:
      need(a, 1, "adverbs");
      return {{n, v, n - 1, a}};
    case TemplateId::TwoAdv:
      need(a, 1, "adverbs");
      return {{n, v, n - 1, a}};
    case TemplateId::CoAdv:
      need(a, 2, "adverbs");
      return {{n, v, n - 1, a, a - 1}};
    case TemplateId::NamePP:
      need(p, 1, "prepositions");
      need(pn, 1, "proper_nouns");
      return {{n, v, n - 1, p, pn}};
    case TemplateId::NounPP:
      need(p, 1, "prepositions");
      need(l, 1, "location_nouns");
      return {{n, v, n - 1, p, l}};
    case TemplateId::NounPPAdv:
      need(p, 1, "prepositions");
      need(l, 1, "location_nouns");
      need(a, 1, "adverbs");
      return {{n, v, n - 1, p, l, a}};
    case TemplateId::SubjRel:
      need(n, 3, "nouns");
      return {{n, v, n - 1, v, n - 2}};
    case TemplateId::DoubleSubjRel:
      need(n, 4, "nouns");
      return {{n, v, n - 1, v, n - 2, v, n - 3}};
  }
  throw std::logic_error("unknown template");
}

LexChoice decode_choice(TemplateId t, const std::vector<int>& d) {
  LexChoice c;
  switch (t) {
    case TemplateId::Simple:
      c.subj = d[0]; c.verb = d[1]; c.obj = skip_map(d[2], {c.subj});
      break;
    case TemplateId::Adv:
    case TemplateId::TwoAdv:
      c.subj = d[0]; c.verb = d[1]; c.obj = skip_map(d[2], {c.subj});
      c.adv1 = d[3];
      break;
    case TemplateId::CoAdv:
      c.subj = d[0]; c.verb = d[1]; c.obj = skip_map(d[2], {c.subj});
      c.adv1 = d[3]; c.adv2 = skip_map(d[4], {c.adv1});
      break;
    case TemplateId::NamePP:
      c.subj = d[0]; c.verb = d[1]; c.obj = skip_map(d[2], {c.subj});
      c.prep = d[3]; c.name = d[4];
      break;
    case TemplateId::NounPP:
      c.subj = d[0]; c.verb = d[1]; c.obj = skip_map(d[2], {c.subj});
      c.prep = d[3]; c.loc = d[4];
      break;
    case TemplateId::NounPPAdv:
      c.subj = d[0]; c.verb = d[1]; c.obj = skip_map(d[2], {c.subj});
      c.prep = d[3]; c.loc = d[4]; c.adv1 = d[5];
      break;
    case TemplateId::SubjRel:
      c.subj = d[0]; c.verb2 = d[1];
      c.noun2 = skip_map(d[2], {c.subj});
      c.verb = d[3];
      c.obj = skip_map(d[4], {c.subj, c.noun2});
      break;
    case TemplateId::DoubleSubjRel:
      c.subj = d[0]; c.verb2 = d[1];
      c.noun2 = skip_map(d[2], {c.subj});
      c.verb3 = d[3];
      c.noun3 = skip_map(d[4], {c.subj, c.noun2});
      c.verb = d[5];
      c.obj = skip_map(d[6], {c.subj, c.noun2, c.noun3});
      break;
  }
  return c;
}

// Uniform draw of `count` combination indices: without replacement while the
// space lasts (sparse partial Fisher-Yates), then with replacement.
std::vector<uint64_t> draw_combos(uint64_t space, int count, Rng& rng) {
  std::vector<uint64_t> out;
  out.reserve(count);
  std::unordered_map<uint64_t, uint64_t> perm;
  auto lookup = [&](uint64_t i) {
    auto it = perm.find(i);
    return it == perm.end() ? i : it->second;
  };
  const uint64_t unique = std::min<uint64_t>(space, static_cast<uint64_t>(count));
  for (uint64_t i = 0; i < unique; ++i) {
    uint64_t j = i + rng.below(space - i);
    uint64_t vi = lookup(i), vj = lookup(j);
    perm[i] = vj;
    perm[j] = vi;
    out.push_back(vj);
  }
  for (uint64_t i = unique; i < static_cast<uint64_t>(count); ++i)
    out.push_back(rng.below(space));
  return out;
}

}  // namespace

StimulusSet generate_na_task(TemplateId t, const Lexicon& lex,
                             int n_per_condition, uint64_t seed) {
  if (n_per_condition < 0) throw std::invalid_argument("n_per_condition < 0");
  lex.validate();
  const ComboSpace space = combo_space(t, lex);

  StimulusSet set;
  set.task = template_name(t);
  for (const Condition& cond : template_conditions(t)) {
    set.condition_labels.push_back(cond.label());
    Rng rng = Rng::derive(seed, std::string(template_name(t)) + "/" + cond.label());
    for (uint64_t k : draw_combos(space.size(), n_per_condition, rng)) {
      set.stimuli.push_back(
          instantiate_template(t, lex, cond, decode_choice(t, space.decode(k))));
    }
  }
  return set;
}

void write_stimulus_jsonl(const StimulusSet& set, const std::filesystem::path& p) {
  std::ostringstream out;
  for (const Stimulus& st : set.stimuli) {
    json j;
    j["task"] = set.task;
    j["condition"] = st.condition.label();
    j["tokens"] = st.tokens;
    j["subject_pos"] = st.subject_pos;
    j["verb_pos"] = st.verb_pos;
    j["correct_verb"] = st.correct_verb;
    j["wrong_verb"] = st.wrong_verb;
    if (st.intervening_pos)
      j["intervening_pos"] = *st.intervening_pos;
    else
      j["intervening_pos"] = nullptr;
    out << j.dump() << "\n";
  }
  write_file(p, out.str());
}

StimulusSet read_stimulus_jsonl(const std::filesystem::path& p) {
  StimulusSet set;
  std::set<std::string> labels_seen;
  for (const std::string& line : read_lines(p)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Stimulus st;
    if (set.task.empty()) set.task = j.at("task").get<std::string>();
    const std::string label = j.at("condition").get<std::string>();
    st.condition.subject = label.at(0) == 'S' ? Number::Singular : Number::Plural;
    if (label.size() > 1)
      st.condition.intervening =
          label.at(1) == 'S' ? Number::Singular : Number::Plural;
    st.tokens = j.at("tokens").get<std::vector<std::string>>();
    st.subject_pos = j.at("subject_pos").get<int>();
    st.verb_pos = j.at("verb_pos").get<int>();
    st.correct_verb = j.at("correct_verb").get<std::string>();
    st.wrong_verb = j.at("wrong_verb").get<std::string>();
    if (!j.at("intervening_pos").is_null())
      st.intervening_pos = j.at("intervening_pos").get<int>();
    if (labels_seen.insert(label).second) set.condition_labels.push_back(label);
    set.stimuli.push_back(std::move(st));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Depth grammar
// ---------------------------------------------------------------------------

namespace depth_tree {

static void collect_leaves(const Node& n, std::vector<std::string>& out) {
  if (n.is_leaf()) {
    out.push_back(n.token);
    return;
  }
  for (const Node& c : n.children) collect_leaves(c, out);
}

std::vector<std::string> leaves(const Node& root) {
  std::vector<std::string> out;
  collect_leaves(root, out);
  return out;
}

static void simulate(const Node& n, int& fragments, std::vector<int>& out) {
  if (n.is_leaf()) {
    ++fragments;
    out.push_back(fragments);
    return;
  }
  for (const Node& c : n.children) simulate(c, fragments, out);
  // All children are now single fragments; the completed constituent merges
  // them into one.
  fragments -= static_cast<int>(n.children.size()) - 1;
}

std::vector<int> open_node_depths(const Node& root) {
  std::vector<int> out;
  int fragments = 0;
  simulate(root, fragments, out);
  return out;
}

}  // namespace depth_tree

namespace {

struct ProgVerb {
  std::string ving, sing, plur;
};

struct DepthLex {
  std::vector<std::string> numerals = {"two", "three", "four", "five", "six",
                                       "seven", "eight", "nine", "ten"};
  std::vector<std::string> adjectives = {"ecstatic", "happy", "sad",   "tall",
                                         "young",    "old",   "clever", "tired",
                                         "proud",    "calm"};
  std::vector<std::string> degrees = {"very", "so", "quite"};
  std::vector<std::string> adverbs = {"really", "quickly", "quietly", "slowly",
                                      "gladly"};
  std::vector<ProgVerb> progs = {
      {"laughing", "laughs", "laugh"},   {"singing", "sings", "sing"},
      {"dancing", "dances", "dance"},    {"smiling", "smiles", "smile"},
      {"working", "works", "work"},      {"sleeping", "sleeps", "sleep"},
      {"talking", "talks", "talk"},      {"running", "runs", "run"},
      {"walking", "walks", "walk"},      {"crying", "cries", "cry"},
  };
};

const DepthLex& depth_lex() {
  static const DepthLex lex;
  return lex;
}

using depth_tree::Node;

// Exact-length sampler for the depth grammar. Flat constituents:
//   S    -> NP VP
//   NP   -> SPEC? ADJP? N PP?        (bare NP is plural; numeral SPEC is plural)
//   ADJP -> ADVP? ADJ | ADJ and ADJ
//   ADVP -> DEG? ADV
//   PP   -> of NP
//   VP   -> VI | BE ADVP? VING | BE ADJP | VT NP
struct DepthSampler {
  const Lexicon& lex;
  const DepthLex& dl = depth_lex();
  Rng& rng;

  Node advp(int len) {
    std::vector<Node> ch;
    if (len == 2) ch.push_back(Node::leaf(dl.degrees[rng.index(dl.degrees.size())]));
    ch.push_back(Node::leaf(dl.adverbs[rng.index(dl.adverbs.size())]));
    return Node::phrase(std::move(ch));
  }

  Node adjp(int len) {
    auto adj = [&] { return Node::leaf(dl.adjectives[rng.index(dl.adjectives.size())]); };
    if (len == 1) return Node::phrase({adj()});
    if (len == 2) return Node::phrase({advp(1), adj()});
    // len == 3: coordination or a two-word adverbial
    if (rng.coin()) return Node::phrase({advp(2), adj()});
    int a = rng.index(static_cast<int>(dl.adjectives.size()));
    int b = skip_map(rng.index(static_cast<int>(dl.adjectives.size()) - 1), {a});
    return Node::phrase({Node::leaf(dl.adjectives[a]), Node::leaf("and"),
                         Node::leaf(dl.adjectives[b])});
  }

  std::pair<Node, Number> np(int len) {
    // Enumerate feasible (spec, adjp, pp) splits: spec+adjp+1+pp == len,
    // pp == 0 or pp >= 2.
    struct Split { int spec, adj, pp; };
    std::vector<Split> splits;
    for (int s = 0; s <= 1; ++s)
      for (int a = 0; a <= 3; ++a) {
        int pp = len - 1 - s - a;
        if (pp == 0 || pp >= 2) {
          if (pp >= 0) splits.push_back({s, a, pp});
        }
      }
    if (splits.empty()) throw std::logic_error("infeasible NP length");
    Split sp = splits[rng.index(static_cast<int>(splits.size()))];

    Number n;
    std::vector<Node> ch;
    if (sp.spec == 0) {
      n = Number::Plural;  // bare NP
    } else if (rng.coin()) {
      ch.push_back(Node::leaf("the"));
      n = rng.coin() ? Number::Singular : Number::Plural;
    } else {
      ch.push_back(Node::leaf(dl.numerals[rng.index(dl.numerals.size())]));
      n = Number::Plural;
    }
    if (sp.adj > 0) ch.push_back(adjp(sp.adj));
    ch.push_back(Node::leaf(lex.nouns[rng.index(lex.nouns.size())].form(n)));
    if (sp.pp > 0) {
      std::vector<Node> ppch;
      ppch.push_back(Node::leaf("of"));
      ppch.push_back(np(sp.pp - 1).first);
      ch.push_back(Node::phrase(std::move(ppch)));
    }
    return {Node::phrase(std::move(ch)), n};
  }

  Node vp(int len, Number n) {
    const bool sing = n == Number::Singular;
    struct Option { int kind, sub; };  // kind: 0 VI, 1 BE ADVP? VING, 2 BE ADJP, 3 VT NP
    std::vector<Option> opts;
    if (len == 1) opts.push_back({0, 0});
    if (len >= 2 && len <= 4) opts.push_back({1, len - 2});
    if (len >= 2 && len <= 4) opts.push_back({2, len - 1});
    if (len >= 2) opts.push_back({3, len - 1});
    Option o = opts[rng.index(static_cast<int>(opts.size()))];
    const std::string be = sing ? "is" : "are";
    switch (o.kind) {
      case 0: {
        const ProgVerb& pv = dl.progs[rng.index(dl.progs.size())];
        return Node::phrase({Node::leaf(sing ? pv.sing : pv.plur)});
      }
      case 1: {
        std::vector<Node> ch{Node::leaf(be)};
        if (o.sub > 0) ch.push_back(advp(o.sub));
        ch.push_back(Node::leaf(dl.progs[rng.index(dl.progs.size())].ving));
        return Node::phrase(std::move(ch));
      }
      case 2:
        return Node::phrase({Node::leaf(be), adjp(o.sub)});
      default: {
        const FormPair& v = lex.verbs[rng.index(lex.verbs.size())];
        return Node::phrase({Node::leaf(v.form(n)), np(o.sub).first});
      }
    }
  }

  Node sentence(int len) {
    int np_len = 1 + rng.index(len - 1);
    auto [subj, n] = np(np_len);
    return Node::phrase({std::move(subj), vp(len - np_len, n)});
  }
};

}  // namespace

depth_tree::Node sample_depth_sentence(int length, const Lexicon& lex, Rng& rng) {
  if (length < 2) throw std::invalid_argument("depth sentences need length >= 2");
  DepthSampler s{lex, depth_lex(), rng};
  return s.sentence(length);
}

size_t DepthDataset::n_retained() const {
  size_t n = 0;
  for (const auto& s : sentences) n += s.retained.size();
  return n;
}

DepthDataset generate_depth_dataset(const DepthConfig& cfg, const Lexicon& lex,
                                    uint64_t seed) {
  if (cfg.min_len < 2 || cfg.max_len < cfg.min_len)
    throw std::invalid_argument("bad depth length range");
  if (cfg.pos_max < cfg.pos_min || cfg.depth_max < cfg.depth_min)
    throw std::invalid_argument("empty position or depth range");
  if (cfg.per_length < 1) throw std::invalid_argument("per_length must be >= 1");

  DepthDataset ds;
  ds.config = cfg;
  Rng rng = Rng::derive(seed, "depth-dataset");

  for (int len = cfg.min_len; len <= cfg.max_len; ++len) {
    for (int k = 0; k < cfg.per_length; ++k) {
      depth_tree::Node tree = sample_depth_sentence(len, lex, rng);
      DepthSentence s;
      s.tokens = depth_tree::leaves(tree);
      s.depths = depth_tree::open_node_depths(tree);
      ds.sentences.push_back(std::move(s));
    }
  }

  // Candidate points per (position, depth) cell; positions are 1-based.
  const int n_pos = cfg.pos_max - cfg.pos_min + 1;
  const int n_dep = cfg.depth_max - cfg.depth_min + 1;
  std::vector<std::vector<std::pair<int, int>>> cells(n_pos * n_dep);
  for (size_t si = 0; si < ds.sentences.size(); ++si) {
    const auto& s = ds.sentences[si];
    for (int pos = cfg.pos_min; pos <= cfg.pos_max; ++pos) {
      if (pos > static_cast<int>(s.tokens.size())) break;
      int depth = s.depths[pos - 1];
      if (depth < cfg.depth_min || depth > cfg.depth_max) continue;
      cells[(pos - cfg.pos_min) * n_dep + (depth - cfg.depth_min)].emplace_back(
          static_cast<int>(si), pos);
    }
  }

  std::vector<int> cell_order;
  uint64_t min_count = UINT64_MAX;
  for (int ci = 0; ci < static_cast<int>(cells.size()); ++ci) {
    if (cells[ci].empty()) {
      ds.empty_cells.push_back({cfg.pos_min + ci / n_dep, cfg.depth_min + ci % n_dep});
    } else {
      cell_order.push_back(ci);
      min_count = std::min<uint64_t>(min_count, cells[ci].size());
      rng.shuffle(cells[ci]);  // draw order within the cell
    }
  }
  rng.shuffle(cell_order);  // round-robin visiting order

  // Take min_count from every nonempty cell, then one extra pass over cells
  // that still have points: per-cell counts end up within one of each other.
  std::vector<std::pair<int, int>> retained;
  if (!cell_order.empty()) {
    for (int ci : cell_order) {
      const auto& pool = cells[ci];
      size_t take = std::min<size_t>(pool.size(), min_count + 1);
      for (size_t i = 0; i < take; ++i) retained.push_back(pool[i]);
    }
  }

  std::vector<double> xs, ys;
  for (auto [si, pos] : retained) {
    ds.sentences[si].retained.push_back({pos, ds.sentences[si].depths[pos - 1]});
    xs.push_back(pos);
    ys.push_back(ds.sentences[si].depths[pos - 1]);
  }
  for (auto& s : ds.sentences)
    std::sort(s.retained.begin(), s.retained.end(),
              [](const DepthPoint& a, const DepthPoint& b) {
                return a.position < b.position;
              });
  ds.position_depth_correlation = pearson(xs, ys);
  return ds;
}

void write_depth_jsonl(const DepthDataset& ds, const std::filesystem::path& p) {
  std::ostringstream out;
  for (const auto& s : ds.sentences) {
    json j;
    j["tokens"] = s.tokens;
    j["depths"] = s.depths;
    json pts = json::array();
    for (const auto& pt : s.retained) pts.push_back({pt.position, pt.depth});
    j["retained"] = pts;
    out << j.dump() << "\n";
  }
  write_file(p, out.str());
}

DepthDataset read_depth_jsonl(const std::filesystem::path& p) {
  DepthDataset ds;
  for (const std::string& line : read_lines(p)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    DepthSentence s;
    s.tokens = j.at("tokens").get<std::vector<std::string>>();
    s.depths = j.at("depths").get<std::vector<int>>();
    for (const auto& pt : j.at("retained"))
      s.retained.push_back({pt.at(0).get<int>(), pt.at(1).get<int>()});
    ds.sentences.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Vocabulary and training corpus
// ---------------------------------------------------------------------------

Vocab Vocab::from_tokens(std::vector<std::string> toks) {
  Vocab v;
  v.tokens = std::move(toks);
  for (size_t i = 0; i < v.tokens.size(); ++i) {
    if (!v.ids.emplace(v.tokens[i], static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate vocabulary token: " + v.tokens[i]);
  }
  return v;
}

int Vocab::id(const std::string& tok) const {
  auto it = ids.find(tok);
  if (it == ids.end()) throw std::out_of_range("token not in vocabulary: " + tok);
  return it->second;
}

std::optional<int> Vocab::find(const std::string& tok) const {
  auto it = ids.find(tok);
  if (it == ids.end()) return std::nullopt;
  return it->second;
}

void write_vocab(const Vocab& v, const std::filesystem::path& p) {
  std::ostringstream out;
  for (const auto& t : v.tokens) out << t << "\n";
  write_file(p, out.str());
}

Vocab read_vocab(const std::filesystem::path& p) {
  auto lines = read_lines(p);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return Vocab::from_tokens(std::move(lines));
}

Lexicon corpus_content_lexicon(const Lexicon& eval_lex, LexiconSplit split) {
  return split == LexiconSplit::Shared ? eval_lex : Lexicon::train_content();
}

namespace {

void add_forms(std::set<std::string>& out, const Lexicon& lex) {
  for (const auto& p : lex.nouns) { out.insert(p.sing); out.insert(p.plur); }
  for (const auto& p : lex.verbs) { out.insert(p.sing); out.insert(p.plur); }
  for (const auto& t : lex.adverbs) out.insert(t);
  for (const auto& t : lex.prepositions) out.insert(t);
  for (const auto& t : lex.proper_nouns) out.insert(t);
  for (const auto& p : lex.location_nouns) { out.insert(p.sing); out.insert(p.plur); }
}

Vocab build_vocab(const Lexicon& eval_lex, LexiconSplit split) {
  std::set<std::string> toks;
  for (const char* w : {"the", "and", "that", "most", "of", "is", "are"})
    toks.insert(w);
  add_forms(toks, eval_lex);
  if (split == LexiconSplit::Disjoint) add_forms(toks, Lexicon::train_content());
  const DepthLex& dl = depth_lex();
  for (const auto& t : dl.numerals) toks.insert(t);
  for (const auto& t : dl.adjectives) toks.insert(t);
  for (const auto& t : dl.degrees) toks.insert(t);
  for (const auto& t : dl.adverbs) toks.insert(t);
  for (const auto& pv : dl.progs) {
    toks.insert(pv.ving);
    toks.insert(pv.sing);
    toks.insert(pv.plur);
  }
  std::vector<std::string> ordered = {"<eos>", "<unk>"};
  ordered.insert(ordered.end(), toks.begin(), toks.end());
  return Vocab::from_tokens(std::move(ordered));
}

}  // namespace

Corpus generate_training_corpus(const Lexicon& eval_lex, const CorpusConfig& cfg,
                                uint64_t seed) {
  if (cfg.n_sentences < 0) throw std::invalid_argument("n_sentences < 0");
  eval_lex.validate();
  const Lexicon content = corpus_content_lexicon(eval_lex, cfg.split);

  Corpus corpus;
  corpus.vocab = build_vocab(eval_lex, cfg.split);
  Rng rng = Rng::derive(seed, "corpus");

  // Construction mixture. Agreement templates plus fillers; depth-grammar
  // sentences take cfg.depth_fraction of the total.
  struct W { double w; int kind; };
  const std::vector<W> mix = {
      {0.14, 0},   // Simple
      {0.09, 1},   // Adv
      {0.06, 2},   // 2Adv
      {0.06, 3},   // CoAdv
      {0.09, 4},   // namePP
      {0.14, 5},   // nounPP
      {0.09, 6},   // nounPPAdv
      {0.05, 7},   // subjRel
      {0.10, 8},   // object PP filler
      {0.06, 9},   // conjoined subject filler
      {0.07, 10},  // final-adverb filler
  };
  double agree_total = 0.0;
  for (const auto& m : mix) agree_total += m.w;

  auto rand_number = [&] {
    return rng.real() < cfg.plural_bias ? Number::Plural : Number::Singular;
  };
  auto noun_idx = [&] { return rng.index(static_cast<int>(content.nouns.size())); };
  auto other_noun = [&](int a) {
    return skip_map(rng.index(static_cast<int>(content.nouns.size()) - 1), {a});
  };

  const std::vector<TemplateId> tpl_for_kind = {
      TemplateId::Simple, TemplateId::Adv,    TemplateId::TwoAdv,
      TemplateId::CoAdv,  TemplateId::NamePP, TemplateId::NounPP,
      TemplateId::NounPPAdv, TemplateId::SubjRel};

  for (int si = 0; si < cfg.n_sentences; ++si) {
    std::vector<std::string> tokens;
    if (rng.real() < cfg.depth_fraction) {
      int len = 3 + rng.index(12);  // lengths 3..14
      tokens = depth_tree::leaves(sample_depth_sentence(len, content, rng));
    } else {
      double r = rng.real() * agree_total;
      int kind = mix.back().kind;
      for (const auto& m : mix) {
        if (r < m.w) { kind = m.kind; break; }
        r -= m.w;
      }
      if (kind <= 7) {
        TemplateId t = tpl_for_kind[kind];
        Condition cond;
        cond.subject = rand_number();
        if (template_intervener(t) == IntervenerKind::Noun)
          cond.intervening = rand_number();
        else if (template_intervener(t) == IntervenerKind::Name)
          cond.intervening = Number::Singular;
        ComboSpace space = combo_space(t, content);
        LexChoice choice = decode_choice(t, space.decode(rng.below(space.size())));
        tokens = instantiate_template(t, content, cond, choice).tokens;
      } else if (kind == 8) {
        // the N1 V the N2 P the LOC
        Number sn = rand_number();
        int n1 = noun_idx(), n2 = other_noun(n1);
        tokens = {"the",
                  content.nouns[n1].form(sn),
                  content.verbs[rng.index(content.verbs.size())].form(sn),
                  "the",
                  content.nouns[n2].form(rand_number()),
                  content.prepositions[rng.index(content.prepositions.size())],
                  "the",
                  content.location_nouns[rng.index(content.location_nouns.size())]
                      .form(rand_number())};
      } else if (kind == 9) {
        // the N1 and the N2 Vplur the N3  (conjoined subject takes plural)
        int n1 = noun_idx(), n2 = other_noun(n1);
        int n3 = rng.index(static_cast<int>(content.nouns.size()));
        tokens = {"the",
                  content.nouns[n1].form(rand_number()),
                  "and",
                  "the",
                  content.nouns[n2].form(rand_number()),
                  content.verbs[rng.index(content.verbs.size())].form(Number::Plural),
                  "the",
                  content.nouns[n3].form(rand_number())};
      } else {
        // the N1 V the N2 ADV
        Number sn = rand_number();
        int n1 = noun_idx(), n2 = other_noun(n1);
        tokens = {"the",
                  content.nouns[n1].form(sn),
                  content.verbs[rng.index(content.verbs.size())].form(sn),
                  "the",
                  content.nouns[n2].form(rand_number()),
                  content.adverbs[rng.index(content.adverbs.size())]};
      }
    }
    tokens.push_back("<eos>");
    corpus.lines.push_back(join(tokens, " "));
  }
  return corpus;
}

std::optional<ParsedAgreement> parse_agreement(
    const std::vector<std::string>& tokens, const Lexicon& content_lex) {
  std::vector<std::string> t = tokens;
  if (!t.empty() && t.back() == "<eos>") t.pop_back();
  if (t.size() < 2) return std::nullopt;

  auto noun_number = [&](const std::string& w) -> std::optional<Number> {
    for (const auto& p : content_lex.nouns) {
      if (w == p.sing) return Number::Singular;
      if (w == p.plur) return Number::Plural;
    }
    return std::nullopt;
  };
  auto verb_number = [&](const std::string& w) -> std::optional<Number> {
    for (const auto& p : content_lex.verbs) {
      if (w == p.sing) return Number::Singular;
      if (w == p.plur) return Number::Plural;
    }
    if (w == "is") return Number::Singular;
    if (w == "are") return Number::Plural;
    for (const auto& pv : depth_lex().progs) {
      if (w == pv.sing) return Number::Singular;
      if (w == pv.plur) return Number::Plural;
    }
    return std::nullopt;
  };
  auto transitive_number = [&](const std::string& w) -> std::optional<Number> {
    for (const auto& p : content_lex.verbs) {
      if (w == p.sing) return Number::Singular;
      if (w == p.plur) return Number::Plural;
    }
    return std::nullopt;
  };

  // Conjoined subject: the N and the N V ...
  if (t.size() >= 6 && t[0] == "the" && noun_number(t[1]) && t[2] == "and" &&
      t[3] == "the" && noun_number(t[4])) {
    if (auto vn = verb_number(t[5])) return ParsedAgreement{Number::Plural, *vn};
  }

  // Subject relative: the N that ... Vmain ... ; the main verb is the last
  // transitive form (object NPs after it contain no verbs).
  if (t.size() >= 4 && t[0] == "the" && noun_number(t[1]) && t[2] == "that") {
    std::optional<Number> main;
    for (const auto& w : t)
      if (auto vn = transitive_number(w)) main = vn;
    if (main) return ParsedAgreement{*noun_number(t[1]), *main};
    return std::nullopt;
  }

  // Everything else: subject is the first content noun, the main verb the
  // first verb form after it.
  std::optional<Number> subj;
  size_t subj_pos = 0;
  for (size_t i = 0; i < t.size(); ++i) {
    if (auto nn = noun_number(t[i])) {
      subj = nn;
      subj_pos = i;
      break;
    }
  }
  if (!subj) return std::nullopt;
  for (size_t i = subj_pos + 1; i < t.size(); ++i)
    if (auto vn = verb_number(t[i])) return ParsedAgreement{*subj, *vn};
  return std::nullopt;
}

}  // namespace lens
