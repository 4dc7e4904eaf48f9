#pragma once

// Synthetic fact corpora: (subject, relation, object) triplets over a closed
// vocabulary of made-up words, with rewrite / paraphrase / neighborhood prompts
// and a line-oriented JSON file format.

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "subedit/error.hpp"

namespace subedit {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

inline TokenSeq concat(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out(a);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

/// A prompt is always prefix ++ subject ++ relation; the answer follows the last token.
struct Prompt {
  TokenSeq prefix;
  TokenSeq subject;
  TokenSeq relation;

  TokenSeq tokens() const { return concat(concat(prefix, subject), relation); }
  std::size_t subject_last() const { return prefix.size() + subject.size() - 1; }
  std::size_t size() const { return prefix.size() + subject.size() + relation.size(); }
  bool operator==(const Prompt&) const = default;
};

struct FactTriplet {
  TokenSeq subject;
  TokenSeq relation;
  Token object = 0;
  std::optional<Token> new_object;
  bool operator==(const FactTriplet&) const = default;
};

struct PromptSet {
  Prompt rewrite;
  std::vector<Prompt> paraphrases;
  std::vector<Prompt> neighborhood;
  bool operator==(const PromptSet&) const = default;
};

struct Fact {
  FactTriplet triplet;
  PromptSet prompts;
  bool operator==(const Fact&) const = default;
};

struct CorpusParams {
  std::uint64_t seed = 7;
  int n_subjects = 300;
  int n_relations = 8;
  int n_objects = 20;
  int n_facts = 200;
  int n_paraphrases = 4;
  int n_neighborhood = 4;
  int n_prefixes = 8;
  int n_relation_templates = 3;
  int n_filler = 60;
  int n_first_names = 16;
  double multi_token_fraction = 0.3;
  bool operator==(const CorpusParams&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorpusParams, seed, n_subjects, n_relations, n_objects, n_facts,
                                                n_paraphrases, n_neighborhood, n_prefixes, n_relation_templates,
                                                n_filler, n_first_names, multi_token_fraction)

struct FactCorpus {
  std::vector<std::string> vocabulary;
  std::vector<Fact> facts;
  /// Known facts that only serve as neighborhood knowledge; never edited.
  std::vector<FactTriplet> background;
  std::vector<TokenSeq> subject_pool;
  std::vector<TokenSeq> prefix_pool;
  std::vector<Token> objects;
  /// relation_templates[r][t]: phrasings of relation r; entry 0 is the canonical one.
  std::vector<std::vector<TokenSeq>> relation_templates;
  std::vector<Token> filler;
  std::uint64_t seed = 0;
  CorpusParams params;

  bool operator==(const FactCorpus&) const = default;

  Token token(const std::string& word) const {
    auto it = std::find(vocabulary.begin(), vocabulary.end(), word);
    if (it == vocabulary.end()) throw Error(Errc::vocabulary, "unknown word '" + word + "'");
    return static_cast<Token>(it - vocabulary.begin());
  }
  std::string words(const TokenSeq& seq) const {
    std::string out;
    for (Token t : seq) {
      if (!out.empty()) out += ' ';
      out += (t >= 0 && static_cast<std::size_t>(t) < vocabulary.size()) ? vocabulary[t] : "<?>";
    }
    return out;
  }
  /// The "{subject} is a" prompt used by the KL regularizer.
  Prompt kl_prompt(const TokenSeq& subject) const { return Prompt{{}, subject, {token("is"), token("a")}}; }
};

namespace facts {

inline constexpr int kSchemaVersion = 1;

namespace detail {

class WordMaker {
 public:
  explicit WordMaker(std::mt19937_64& rng) : rng_(rng) {}

  std::string next(int syllables) {
    static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
    static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u"};
    std::uniform_int_distribution<int> on(0, 13), vo(0, 4);
    for (int attempt = 0; attempt < 10000; ++attempt) {
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += kOnsets[on(rng_)];
        w += kVowels[vo(rng_)];
      }
      if (attempt > 100) w += std::to_string(attempt);
      if (used_.insert(w).second) return w;
    }
    throw Error(Errc::generation, "word generator exhausted");
  }
  void reserve(const std::string& w) { used_.insert(w); }

 private:
  std::mt19937_64& rng_;
  std::set<std::string> used_;
};

inline int uniform(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(i) - 1))]);
}

}  // namespace detail

/// Deterministic corpus generation; identical params reproduce an identical corpus.
inline FactCorpus generate_corpus(const CorpusParams& p) {
  using detail::uniform;
  if (p.n_facts < 1 || p.n_subjects < 1 || p.n_relations < 1)
    throw Error(Errc::generation, "generate_corpus: counts must be positive");
  if (p.n_facts > p.n_subjects) throw Error(Errc::generation, "generate_corpus: n_facts exceeds n_subjects");
  if (p.n_objects < 2) throw Error(Errc::generation, "generate_corpus: need at least two objects");
  if (p.n_paraphrases < 0 || p.n_neighborhood < 0 || p.n_prefixes < 1 || p.n_relation_templates < 1 || p.n_filler < 2)
    throw Error(Errc::generation, "generate_corpus: invalid prompt parameters");
  if (p.n_neighborhood > p.n_subjects - 1)
    throw Error(Errc::generation, "generate_corpus: not enough subjects for neighborhood prompts");

  std::mt19937_64 rng(p.seed);
  detail::WordMaker words(rng);
  FactCorpus c;
  c.seed = p.seed;
  c.params = p;

  auto add = [&](const std::string& w) {
    c.vocabulary.push_back(w);
    return static_cast<Token>(c.vocabulary.size() - 1);
  };
  for (const char* special : {"is", "a", "."}) {
    words.reserve(special);
    add(special);
  }

  std::vector<Token> first_names;
  for (int i = 0; i < p.n_first_names; ++i) first_names.push_back(add(words.next(2)));
  for (int i = 0; i < p.n_subjects; ++i) {
    TokenSeq subject;
    if (!first_names.empty() && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p.multi_token_fraction)
      subject.push_back(first_names[static_cast<std::size_t>(uniform(rng, 0, p.n_first_names - 1))]);
    subject.push_back(add(words.next(3)));
    c.subject_pool.push_back(std::move(subject));
  }
  // templates[r][t] is a two-token relation phrase; template 0 is canonical.
  auto& templates = c.relation_templates;
  templates.resize(static_cast<std::size_t>(p.n_relations));
  for (auto& rel : templates)
    for (int t = 0; t < p.n_relation_templates; ++t) rel.push_back({add(words.next(2)), add(words.next(2))});
  for (int i = 0; i < p.n_objects; ++i) c.objects.push_back(add(words.next(2)));
  auto& filler = c.filler;
  for (int i = 0; i < p.n_filler; ++i) filler.push_back(add(words.next(2)));

  auto random_filler = [&](int len) {
    TokenSeq s;
    for (int i = 0; i < len; ++i) s.push_back(filler[static_cast<std::size_t>(uniform(rng, 0, p.n_filler - 1))]);
    return s;
  };
  c.prefix_pool.push_back({});
  {
    std::set<TokenSeq> seen{{}};
    while (static_cast<int>(c.prefix_pool.size()) < p.n_prefixes) {
      TokenSeq s = random_filler(uniform(rng, 1, 2));
      if (seen.insert(s).second) c.prefix_pool.push_back(s);
    }
  }

  std::vector<int> order(static_cast<std::size_t>(p.n_subjects));
  for (int i = 0; i < p.n_subjects; ++i) order[static_cast<std::size_t>(i)] = i;
  detail::shuffle(order, rng);

  // (subject index, relation) -> object; keeps the knowledge base a function.
  std::map<std::pair<int, int>, Token> known;
  std::vector<bool> is_fact_subject(static_cast<std::size_t>(p.n_subjects), false);
  struct Draft {
    int subject, relation;
    Token object, new_object;
  };
  std::vector<Draft> drafts;
  for (int i = 0; i < p.n_facts; ++i) {
    const int s = order[static_cast<std::size_t>(i)];
    const int r = uniform(rng, 0, p.n_relations - 1);
    const int oi = uniform(rng, 0, p.n_objects - 1);
    int ni = uniform(rng, 0, p.n_objects - 2);
    if (ni >= oi) ++ni;
    drafts.push_back({s, r, c.objects[static_cast<std::size_t>(oi)], c.objects[static_cast<std::size_t>(ni)]});
    known[{s, r}] = c.objects[static_cast<std::size_t>(oi)];
    is_fact_subject[static_cast<std::size_t>(s)] = true;
  }

  std::set<std::pair<int, int>> background_slots;
  for (const Draft& d : drafts) {
    const auto& canonical = templates[static_cast<std::size_t>(d.relation)][0];
    const TokenSeq& subject = c.subject_pool[static_cast<std::size_t>(d.subject)];
    Fact f;
    f.triplet = {subject, canonical, d.object, d.new_object};
    f.prompts.rewrite = {{}, subject, canonical};

    std::set<TokenSeq> used_prefixes;
    for (int j = 0; j < p.n_paraphrases; ++j) {
      TokenSeq prefix;
      do prefix = random_filler(2);
      while (!used_prefixes.insert(prefix).second);
      const auto& rel = templates[static_cast<std::size_t>(d.relation)];
      const std::size_t t = rel.size() > 1 ? 1 + static_cast<std::size_t>(j) % (rel.size() - 1) : 0;
      f.prompts.paraphrases.push_back({prefix, subject, rel[t]});
    }

    // Tiers: subjects already known to map (r -> o), free non-fact subjects, free fact subjects.
    std::vector<int> tiers[3];
    for (int s = 0; s < p.n_subjects; ++s) {
      if (s == d.subject) continue;
      auto it = known.find({s, d.relation});
      if (it != known.end()) {
        if (it->second == d.object && background_slots.count({s, d.relation})) tiers[0].push_back(s);
      } else {
        tiers[is_fact_subject[static_cast<std::size_t>(s)] ? 2 : 1].push_back(s);
      }
    }
    std::vector<int> chosen;
    for (auto& tier : tiers) {
      detail::shuffle(tier, rng);
      for (int s : tier) {
        if (static_cast<int>(chosen.size()) == p.n_neighborhood) break;
        chosen.push_back(s);
      }
    }
    if (static_cast<int>(chosen.size()) < p.n_neighborhood)
      throw Error(Errc::generation, "generate_corpus: cannot place neighborhood prompts");
    for (int s : chosen) {
      const TokenSeq& other = c.subject_pool[static_cast<std::size_t>(s)];
      if (!known.count({s, d.relation})) {
        known[{s, d.relation}] = d.object;
        background_slots.insert({s, d.relation});
        c.background.push_back({other, canonical, d.object, std::nullopt});
      }
      f.prompts.neighborhood.push_back({{}, other, canonical});
    }
    c.facts.push_back(std::move(f));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline nlohmann::json seq_json(const FactCorpus& c, const TokenSeq& seq) {
  nlohmann::json j = nlohmann::json::array();
  for (Token t : seq) j.push_back(c.vocabulary.at(static_cast<std::size_t>(t)));
  return j;
}

inline nlohmann::json prompt_json(const FactCorpus& c, const Prompt& p) {
  return {{"prefix", seq_json(c, p.prefix)}, {"subject", seq_json(c, p.subject)}, {"relation", seq_json(c, p.relation)}};
}

class LineReader {
 public:
  LineReader(const std::unordered_map<std::string, Token>& index, std::size_t line) : index_(index), line_(line) {}

  [[noreturn]] void fail(const std::string& field, const std::string& msg) const {
    throw Error(Errc::parse, "line " + std::to_string(line_) + ": field '" + field + "': " + msg);
  }
  const nlohmann::json& at(const nlohmann::json& j, const std::string& field) const {
    if (!j.is_object() || !j.contains(field)) fail(field, "missing");
    return j.at(field);
  }
  Token token(const nlohmann::json& j, const std::string& field) const {
    if (!j.is_string()) fail(field, "expected a token string");
    auto it = index_.find(j.get<std::string>());
    if (it == index_.end()) fail(field, "token '" + j.get<std::string>() + "' not in vocabulary");
    return it->second;
  }
  TokenSeq seq(const nlohmann::json& j, const std::string& field) const {
    if (!j.is_array()) fail(field, "expected an array of tokens");
    TokenSeq out;
    for (const auto& t : j) out.push_back(token(t, field));
    return out;
  }
  Prompt prompt(const nlohmann::json& j, const std::string& field) const {
    return {seq(at(j, "prefix"), field + ".prefix"), seq(at(j, "subject"), field + ".subject"),
            seq(at(j, "relation"), field + ".relation")};
  }
  std::vector<Prompt> prompts(const nlohmann::json& j, const std::string& field) const {
    if (!j.is_array()) fail(field, "expected an array of prompts");
    std::vector<Prompt> out;
    for (const auto& p : j) out.push_back(prompt(p, field));
    return out;
  }

 private:
  const std::unordered_map<std::string, Token>& index_;
  std::size_t line_;
};

}  // namespace detail

inline void write_corpus(const FactCorpus& c, std::ostream& out) {
  nlohmann::json header = {{"schema_version", kSchemaVersion}, {"seed", c.seed}, {"vocabulary", c.vocabulary},
                           {"params", c.params}};
  header["subject_pool"] = nlohmann::json::array();
  for (const auto& s : c.subject_pool) header["subject_pool"].push_back(detail::seq_json(c, s));
  header["prefix_pool"] = nlohmann::json::array();
  for (const auto& s : c.prefix_pool) header["prefix_pool"].push_back(detail::seq_json(c, s));
  header["objects"] = detail::seq_json(c, c.objects);
  header["filler"] = detail::seq_json(c, c.filler);
  header["relation_templates"] = nlohmann::json::array();
  for (const auto& rel : c.relation_templates) {
    nlohmann::json tj = nlohmann::json::array();
    for (const auto& t : rel) tj.push_back(detail::seq_json(c, t));
    header["relation_templates"].push_back(tj);
  }
  out << header.dump() << '\n';
  for (const Fact& f : c.facts) {
    nlohmann::json j = {{"kind", "fact"},
                        {"subject", detail::seq_json(c, f.triplet.subject)},
                        {"relation", detail::seq_json(c, f.triplet.relation)},
                        {"object", c.vocabulary.at(static_cast<std::size_t>(f.triplet.object))},
                        {"rewrite", detail::prompt_json(c, f.prompts.rewrite)}};
    if (f.triplet.new_object)
      j["new_object"] = c.vocabulary.at(static_cast<std::size_t>(*f.triplet.new_object));
    j["paraphrases"] = nlohmann::json::array();
    for (const auto& p : f.prompts.paraphrases) j["paraphrases"].push_back(detail::prompt_json(c, p));
    j["neighborhood"] = nlohmann::json::array();
    for (const auto& p : f.prompts.neighborhood) j["neighborhood"].push_back(detail::prompt_json(c, p));
    out << j.dump() << '\n';
  }
  for (const FactTriplet& t : c.background) {
    nlohmann::json j = {{"kind", "background"},
                        {"subject", detail::seq_json(c, t.subject)},
                        {"relation", detail::seq_json(c, t.relation)},
                        {"object", c.vocabulary.at(static_cast<std::size_t>(t.object))}};
    out << j.dump() << '\n';
  }
}

inline FactCorpus read_corpus(std::istream& in) {
  FactCorpus c;
  std::string line;
  std::size_t line_no = 0;
  std::unordered_map<std::string, Token> index;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(Errc::parse, "line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    detail::LineReader r(index, line_no);
    if (!have_header) {
      const auto& version = r.at(j, "schema_version");
      if (!version.is_number_integer() || version.get<int>() != kSchemaVersion)
        r.fail("schema_version", "unsupported schema version");
      const auto& seed = r.at(j, "seed");
      if (!seed.is_number_unsigned() && !seed.is_number_integer()) r.fail("seed", "expected an integer");
      c.seed = seed.get<std::uint64_t>();
      const auto& vocab = r.at(j, "vocabulary");
      if (!vocab.is_array()) r.fail("vocabulary", "expected an array");
      for (const auto& w : vocab) {
        if (!w.is_string()) r.fail("vocabulary", "expected strings");
        if (!index.emplace(w.get<std::string>(), static_cast<Token>(c.vocabulary.size())).second)
          r.fail("vocabulary", "duplicate entry '" + w.get<std::string>() + "'");
        c.vocabulary.push_back(w.get<std::string>());
      }
      if (j.contains("params")) {
        try {
          c.params = j.at("params").get<CorpusParams>();
        } catch (const nlohmann::json::exception& e) {
          r.fail("params", e.what());
        }
      }
      for (const auto& s : r.at(j, "subject_pool")) c.subject_pool.push_back(r.seq(s, "subject_pool"));
      for (const auto& s : r.at(j, "prefix_pool")) c.prefix_pool.push_back(r.seq(s, "prefix_pool"));
      if (j.contains("objects")) c.objects = r.seq(j.at("objects"), "objects");
      if (j.contains("filler")) c.filler = r.seq(j.at("filler"), "filler");
      if (j.contains("relation_templates")) {
        const auto& rt = j.at("relation_templates");
        if (!rt.is_array()) r.fail("relation_templates", "expected an array");
        for (const auto& rel : rt) {
          if (!rel.is_array()) r.fail("relation_templates", "expected arrays of phrasings");
          std::vector<TokenSeq> phr;
          for (const auto& t : rel) phr.push_back(r.seq(t, "relation_templates"));
          c.relation_templates.push_back(std::move(phr));
        }
      }
      have_header = true;
      continue;
    }
    const auto& kind = r.at(j, "kind");
    if (kind == "fact") {
      Fact f;
      f.triplet.subject = r.seq(r.at(j, "subject"), "subject");
      f.triplet.relation = r.seq(r.at(j, "relation"), "relation");
      f.triplet.object = r.token(r.at(j, "object"), "object");
      if (j.contains("new_object")) f.triplet.new_object = r.token(j.at("new_object"), "new_object");
      if (f.triplet.subject.empty()) r.fail("subject", "must be nonempty");
      if (f.triplet.new_object && *f.triplet.new_object == f.triplet.object)
        r.fail("new_object", "must differ from object");
      f.prompts.rewrite = r.prompt(r.at(j, "rewrite"), "rewrite");
      f.prompts.paraphrases = r.prompts(r.at(j, "paraphrases"), "paraphrases");
      f.prompts.neighborhood = r.prompts(r.at(j, "neighborhood"), "neighborhood");
      c.facts.push_back(std::move(f));
    } else if (kind == "background") {
      FactTriplet t;
      t.subject = r.seq(r.at(j, "subject"), "subject");
      t.relation = r.seq(r.at(j, "relation"), "relation");
      t.object = r.token(r.at(j, "object"), "object");
      if (t.subject.empty()) r.fail("subject", "must be nonempty");
      c.background.push_back(std::move(t));
    } else {
      r.fail("kind", "expected 'fact' or 'background'");
    }
  }
  if (!have_header) throw Error(Errc::parse, "line " + std::to_string(line_no + 1) + ": field 'schema_version': missing header");
  if (c.objects.empty()) {
    std::set<Token> objs;
    for (const auto& f : c.facts) objs.insert(f.triplet.object);
    c.objects.assign(objs.begin(), objs.end());
  }
  return c;
}

inline void save_corpus(const FactCorpus& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write " + path);
  write_corpus(c, out);
  if (!out) throw Error(Errc::io, "write failed for " + path);
}

inline FactCorpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot read " + path);
  return read_corpus(in);
}

/// Every (subject, relation, object) the corpus asserts: edit facts then background.
inline std::vector<FactTriplet> all_triplets(const FactCorpus& c) {
  std::vector<FactTriplet> out;
  for (const auto& f : c.facts) out.push_back({f.triplet.subject, f.triplet.relation, f.triplet.object, std::nullopt});
  out.insert(out.end(), c.background.begin(), c.background.end());
  return out;
}

}  // namespace facts
}  // namespace subedit
