#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace lens {

enum class Number { Singular, Plural };
inline Number flip(Number n) {
  return n == Number::Singular ? Number::Plural : Number::Singular;
}
inline char number_letter(Number n) { return n == Number::Singular ? 'S' : 'P'; }

// A singular/plural surface-form pair.
struct FormPair {
  std::string sing;
  std::string plur;
  const std::string& form(Number n) const {
    return n == Number::Singular ? sing : plur;
  }
};

// Word pools for the agreement tasks. The default pools are curated so any
// combination is semantically acceptable: all nouns are human/agentive, all
// verbs are transitive with human objects, and location nouns only ever
// appear inside locative PPs.
struct Lexicon {
  std::vector<FormPair> nouns;              // subject/object nouns
  std::vector<FormPair> verbs;              // (3sg form, base form)
  std::vector<std::string> adverbs;
  std::vector<std::string> prepositions;    // locative
  std::vector<std::string> proper_nouns;
  std::vector<FormPair> location_nouns;

  void validate() const;  // throws std::invalid_argument on bad pools

  static Lexicon eval_default();   // 20/15/10/5/10/10
  static Lexicon train_content();  // disjoint nouns/verbs, same other pools
};

enum class TemplateId {
  Simple,
  Adv,
  TwoAdv,
  CoAdv,
  NamePP,
  NounPP,
  NounPPAdv,
  SubjRel,        // visualization only
  DoubleSubjRel,  // visualization only
};

const char* template_name(TemplateId t);
std::optional<TemplateId> template_from_name(const std::string& name);
// The seven tasks evaluated by default (relative-clause templates excluded).
std::vector<TemplateId> default_tasks();

// What sits between subject and main verb.
enum class IntervenerKind { None, Noun, Name };
IntervenerKind template_intervener(TemplateId t);

struct Condition {
  Number subject = Number::Singular;
  std::optional<Number> intervening;

  std::string label() const;  // "S", "P", "SS", "SP", "PS", "PP"
  // Incongruent iff an intervener is present with the opposite number.
  bool congruent() const {
    return !intervening.has_value() || *intervening == subject;
  }
  bool operator==(const Condition&) const = default;
};

std::vector<Condition> template_conditions(TemplateId t);

// Indices into lexicon pools for one sentence; -1 where the template has no
// such slot. Exposed so tests can instantiate exact sentences.
struct LexChoice {
  int subj = -1;
  int verb = -1;
  int obj = -1;
  int adv1 = -1;
  int adv2 = -1;
  int prep = -1;
  int name = -1;
  int loc = -1;
  int verb2 = -1;   // relative-clause verb(s)
  int noun2 = -1;   // second embedded noun (DoubleSubjRel)
  int verb3 = -1;
  int noun3 = -1;
};

struct Stimulus {
  std::vector<std::string> tokens;
  Condition condition;
  int subject_pos = 0;
  int verb_pos = 0;
  std::string correct_verb;
  std::string wrong_verb;
  std::optional<int> intervening_pos;
};

struct StimulusSet {
  std::string task;
  std::vector<std::string> condition_labels;  // every condition of the template
  std::vector<Stimulus> stimuli;
};

// Build the exact sentence for a template/condition/lexical choice.
Stimulus instantiate_template(TemplateId t, const Lexicon& lex,
                              const Condition& cond, const LexChoice& choice);

// n_per_condition stimuli for every condition of the template. Sampling is
// uniform over lexical combinations, without replacement until the
// combination space is exhausted, then with replacement. Deterministic in
// (template, lexicon, seed).
StimulusSet generate_na_task(TemplateId t, const Lexicon& lex,
                             int n_per_condition, uint64_t seed);

void write_stimulus_jsonl(const StimulusSet& set, const std::filesystem::path& p);
StimulusSet read_stimulus_jsonl(const std::filesystem::path& p);

// ---------------------------------------------------------------------------
// Syntactic-depth dataset
// ---------------------------------------------------------------------------

namespace depth_tree {

// Derivation tree of the depth grammar. Leaves carry tokens.
struct Node {
  std::string token;            // nonempty iff leaf
  std::vector<Node> children;
  bool is_leaf() const { return children.empty(); }

  static Node leaf(std::string t) { return Node{std::move(t), {}}; }
  static Node phrase(std::vector<Node> c) { return Node{"", std::move(c)}; }
};

std::vector<std::string> leaves(const Node& root);

// Open-node count per word: a bottom-up shift-reduce pass over the canonical
// derivation. Each word adds one fragment; a constituent merges its children
// into one fragment as soon as its last word is read. The recorded value is
// the fragment count right after the word is shifted, so the first word is
// always 1 and the count never rises by more than 1 per word.
std::vector<int> open_node_depths(const Node& root);

}  // namespace depth_tree

struct DepthConfig {
  int min_len = 2;
  int max_len = 25;
  int per_length = 300;
  int pos_min = 7;   // word positions, 1-based
  int pos_max = 12;
  int depth_min = 3;
  int depth_max = 8;
};

struct DepthPoint {
  int position = 0;  // 1-based
  int depth = 0;
};

struct DepthSentence {
  std::vector<std::string> tokens;
  std::vector<int> depths;            // full per-token annotation
  std::vector<DepthPoint> retained;   // points kept by the balanced sampler
};

struct DepthDataset {
  DepthConfig config;
  std::vector<DepthSentence> sentences;
  double position_depth_correlation = 0.0;  // Pearson r over retained points
  std::vector<DepthPoint> empty_cells;      // cells with no candidates
  size_t n_retained() const;
};

// Generates per_length sentences for each length, annotates open-node depth,
// then retains points covering the position x depth grid as evenly as the
// pool allows (per-cell counts differ by at most one). Content nouns/verbs
// come from `lex`; numerals, adjectives and progressive verbs are built in.
DepthDataset generate_depth_dataset(const DepthConfig& cfg, const Lexicon& lex,
                                    uint64_t seed);

void write_depth_jsonl(const DepthDataset& ds, const std::filesystem::path& p);
DepthDataset read_depth_jsonl(const std::filesystem::path& p);

// Single random depth-grammar sentence of exactly `length` tokens.
depth_tree::Node sample_depth_sentence(int length, const Lexicon& lex,
                                       class Rng& rng);

// ---------------------------------------------------------------------------
// Training corpus
// ---------------------------------------------------------------------------

struct Vocab {
  std::vector<std::string> tokens;  // line number = id
  std::unordered_map<std::string, int> ids;

  int id(const std::string& tok) const;            // throws if unknown
  std::optional<int> find(const std::string&) const;
  int eos() const { return id("<eos>"); }
  static Vocab from_tokens(std::vector<std::string> toks);
};

void write_vocab(const Vocab& v, const std::filesystem::path& p);
Vocab read_vocab(const std::filesystem::path& p);

enum class LexiconSplit { Shared, Disjoint };

struct CorpusConfig {
  int n_sentences = 20000;
  LexiconSplit split = LexiconSplit::Shared;
  double depth_fraction = 0.25;  // share of sentences from the depth grammar
  // Probability that a subject is plural. Values above 0.5 make the singular
  // verb form the marked (rarer) one, as in natural text.
  double plural_bias = 0.5;
};

struct Corpus {
  std::vector<std::string> lines;  // "tok tok ... <eos>"
  Vocab vocab;
};

// The corpus grammar supersets the NA templates (all seven plus subject
// relatives, object PPs, conjoined subjects, final adverbs) and mixes in
// depth-grammar sentences so every analysis token is in-distribution.
// Number agreement holds in every sentence. With LexiconSplit::Disjoint the
// corpus uses the train content pools while the vocabulary still covers the
// evaluation pools.
Corpus generate_training_corpus(const Lexicon& eval_lex, const CorpusConfig& cfg,
                                uint64_t seed);

// The content lexicon the corpus draws from under the given split mode.
Lexicon corpus_content_lexicon(const Lexicon& eval_lex, LexiconSplit split);

// Re-parse a corpus line against the generating constructions and return the
// (subject, main verb) numbers, or nullopt if the line matches no pattern.
struct ParsedAgreement {
  Number subject;
  Number verb;
};
std::optional<ParsedAgreement> parse_agreement(
    const std::vector<std::string>& tokens, const Lexicon& content_lex);

}  // namespace lens
