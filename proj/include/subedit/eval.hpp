#pragma once

// Edit-quality metrics: probability- and generation-based efficacy,
// generalization and specificity, their harmonic mean, n-gram fluency,
// TF-IDF consistency and teacher-forced token accuracy.

#include <json.hpp>

#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "subedit/error.hpp"
#include "subedit/facts.hpp"
#include "subedit/toymodel.hpp"

namespace subedit {

enum class MetricCriterion { probability_based, generation_based, token_level };

inline const char* to_string(MetricCriterion c) {
  switch (c) {
    case MetricCriterion::probability_based: return "probability_based";
    case MetricCriterion::generation_based: return "generation_based";
    case MetricCriterion::token_level: return "token_level";
  }
  return "unknown";
}

struct MetricTriple {
  double efficacy = 0.0;  // all three in [0, 100]
  double generalization = 0.0;
  double specificity = 0.0;
};

namespace eval {

inline constexpr int kSchemaVersion = 1;
inline constexpr int kGeneratedTokens = 50;

/// 3 / (1/eff + 1/gen + 1/spe), and 0 when any component is 0.
inline double harmonic_s(double eff, double gen, double spe) {
  for (double x : {eff, gen, spe})
    if (!(x >= 0.0 && x <= 100.0)) throw Error(Errc::invalid_input, "harmonic_s: scores must lie in [0, 100]");
  if (eff == 0.0 || gen == 0.0 || spe == 0.0) return 0.0;
  return 3.0 / (1.0 / eff + 1.0 / gen + 1.0 / spe);
}

inline double harmonic_s(const MetricTriple& t) { return harmonic_s(t.efficacy, t.generalization, t.specificity); }

inline Token argmax(const Vector& logits) {
  Eigen::Index i = 0;
  logits.maxCoeff(&i);
  return static_cast<Token>(i);
}

/// Facts the model currently answers with their true object at the rewrite prompt.
inline std::vector<Fact> eligible_facts(const ModelState& m, const std::vector<Fact>& facts) {
  std::vector<TokenSeq> prompts;
  for (const auto& f : facts) prompts.push_back(f.prompts.rewrite.tokens());
  const Matrix logits = final_logits(m, prompts);
  std::vector<Fact> out;
  for (std::size_t i = 0; i < facts.size(); ++i)
    if (argmax(logits.row(static_cast<Eigen::Index>(i)).transpose()) == facts[i].triplet.object) out.push_back(facts[i]);
  return out;
}

/// Per-edit indicators; paraphrase and neighborhood indicators are averaged within the edit.
struct EditScores {
  double efficacy = 0.0, generalization = 0.0, specificity = 0.0;  // in [0, 1]
};

namespace detail {
inline void require_edits(const std::vector<Fact>& edits) {
  if (edits.empty()) throw Error(Errc::empty_input, "eval: empty edit set");
  for (const auto& f : edits)
    if (!f.triplet.new_object) throw Error(Errc::invalid_input, "eval: edit without new_object");
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Final logits of every prompt of every edit, grouped as rewrite / paraphrases / neighborhood.
struct PromptLogits {
  std::vector<Vector> rewrite;
  std::vector<std::vector<Vector>> paraphrases, neighborhood;
};

inline PromptLogits prompt_logits(const ModelState& m, const std::vector<Fact>& edits) {
  std::vector<TokenSeq> seqs;
  for (const auto& f : edits) {
    seqs.push_back(f.prompts.rewrite.tokens());
    for (const auto& p : f.prompts.paraphrases) seqs.push_back(p.tokens());
    for (const auto& p : f.prompts.neighborhood) seqs.push_back(p.tokens());
  }
  const Matrix logits = final_logits(m, seqs);
  PromptLogits out;
  Eigen::Index row = 0;
  for (const auto& f : edits) {
    out.rewrite.push_back(logits.row(row++).transpose());
    out.paraphrases.emplace_back();
    for (std::size_t i = 0; i < f.prompts.paraphrases.size(); ++i) out.paraphrases.back().push_back(logits.row(row++).transpose());
    out.neighborhood.emplace_back();
    for (std::size_t i = 0; i < f.prompts.neighborhood.size(); ++i) out.neighborhood.back().push_back(logits.row(row++).transpose());
  }
  return out;
}

inline MetricTriple aggregate(const std::vector<EditScores>& rows) {
  std::vector<double> e, g, s;
  for (const auto& r : rows) {
    e.push_back(r.efficacy);
    g.push_back(r.generalization);
    s.push_back(r.specificity);
  }
  return {100.0 * mean(e), 100.0 * mean(g), 100.0 * mean(s)};
}
}  // namespace detail

/// Strict-inequality comparisons of p(o*) against p(o); ties count as failures.
inline std::vector<EditScores> probability_scores(const ModelState& m, const std::vector<Fact>& edits) {
  detail::require_edits(edits);
  const auto pl = detail::prompt_logits(m, edits);
  std::vector<EditScores> out;
  for (std::size_t i = 0; i < edits.size(); ++i) {
    const Token o = edits[i].triplet.object, o_new = *edits[i].triplet.new_object;
    auto promotes = [&](const Vector& z) { return z(o_new) > z(o) ? 1.0 : 0.0; };
    auto keeps = [&](const Vector& z) { return z(o) > z(o_new) ? 1.0 : 0.0; };
    EditScores s;
    s.efficacy = promotes(pl.rewrite[i]);
    std::vector<double> g, n;
    for (const auto& z : pl.paraphrases[i]) g.push_back(promotes(z));
    for (const auto& z : pl.neighborhood[i]) n.push_back(keeps(z));
    s.generalization = detail::mean(g);
    s.specificity = detail::mean(n);
    out.push_back(s);
  }
  return out;
}

inline MetricTriple probability_metrics(const ModelState& m, const std::vector<Fact>& edits) {
  return detail::aggregate(probability_scores(m, edits));
}

/// Success iff o* is the greedy choice; neighborhood prompts succeed when their
/// greedy answer matches the one given by `original`.
inline std::vector<EditScores> generation_scores(const ModelState& m, const ModelState& original,
                                                 const std::vector<Fact>& edits) {
  detail::require_edits(edits);
  const auto pl = detail::prompt_logits(m, edits);
  const auto pre = detail::prompt_logits(original, edits);
  std::vector<EditScores> out;
  for (std::size_t i = 0; i < edits.size(); ++i) {
    const Token o_new = *edits[i].triplet.new_object;
    EditScores s;
    s.efficacy = argmax(pl.rewrite[i]) == o_new ? 1.0 : 0.0;
    std::vector<double> g, n;
    for (const auto& z : pl.paraphrases[i]) g.push_back(argmax(z) == o_new ? 1.0 : 0.0);
    for (std::size_t j = 0; j < pl.neighborhood[i].size(); ++j)
      n.push_back(argmax(pl.neighborhood[i][j]) == argmax(pre.neighborhood[i][j]) ? 1.0 : 0.0);
    s.generalization = detail::mean(g);
    s.specificity = detail::mean(n);
    out.push_back(s);
  }
  return out;
}

inline MetricTriple generation_metrics(const ModelState& m, const ModelState& original, const std::vector<Fact>& edits) {
  return detail::aggregate(generation_scores(m, original, edits));
}

/// Fraction of target positions whose greedy prediction, given the gold prefix, is the target token.
inline double token_level_accuracy(const ModelState& m, const TokenSeq& prompt, const TokenSeq& target) {
  if (target.empty()) throw Error(Errc::empty_input, "token_level_accuracy: empty target");
  if (prompt.empty()) throw Error(Errc::invalid_input, "token_level_accuracy: empty prompt");
  TokenSeq seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  const Matrix logits = all_logits(m, seq);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(prompt.size() - 1 + i);
    if (argmax(logits.row(row).transpose()) == target[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(target.size());
}

/// Greedy continuation of `prompt` by up to n tokens (fewer if the context limit is reached).
inline TokenSeq greedy_generate(const ModelState& m, const TokenSeq& prompt, int n = kGeneratedTokens) {
  if (prompt.empty()) throw Error(Errc::generation, "greedy_generate: empty prompt");
  TokenSeq seq = prompt;
  TokenSeq out;
  for (int i = 0; i < n && static_cast<int>(seq.size()) < m.config.max_seq_len; ++i) {
    const Token t = argmax(final_logits(m, {seq}).row(0).transpose());
    seq.push_back(t);
    out.push_back(t);
  }
  return out;
}

namespace detail {
template <std::size_t N>
double ngram_entropy(const TokenSeq& text) {
  std::map<std::array<Token, N>, double> counts;
  for (std::size_t i = 0; i + N <= text.size(); ++i) {
    std::array<Token, N> key;
    for (std::size_t k = 0; k < N; ++k) key[k] = text[i + k];
    counts[key] += 1.0;
  }
  const double total = static_cast<double>(text.size() + 1 - N);
  double h = 0.0;
  for (const auto& [key, c] : counts) {
    const double p = c / total;
    h -= p * std::log2(p);
  }
  return h;
}
}  // namespace detail

/// (2/3) H(bigrams) + (4/3) H(trigrams), entropies in bits.
inline double fluency_entropy(const TokenSeq& text) {
  if (text.size() < 3) throw Error(Errc::invalid_input, "fluency_entropy: text needs at least 3 tokens");
  return (2.0 / 3.0) * detail::ngram_entropy<2>(text) + (4.0 / 3.0) * detail::ngram_entropy<3>(text);
}

/// Smoothed inverse document frequencies, idf(t) = ln((1 + N) / (1 + df(t))) + 1.
class TfIdf {
 public:
  explicit TfIdf(const std::vector<TokenSeq>& documents) : n_docs_(documents.size()) {
    for (const auto& d : documents) {
      std::map<Token, bool> seen;
      for (Token t : d)
        if (!seen[t]) {
          seen[t] = true;
          df_[t] += 1.0;
        }
    }
  }

  double idf(Token t) const {
    auto it = df_.find(t);
    const double df = it == df_.end() ? 0.0 : it->second;
    return std::log((1.0 + static_cast<double>(n_docs_)) / (1.0 + df)) + 1.0;
  }

  std::map<Token, double> vector(const TokenSeq& text) const {
    std::map<Token, double> v;
    for (Token t : text) v[t] += 1.0;
    for (auto& [t, x] : v) x *= idf(t);
    return v;
  }

  /// Cosine of the TF-IDF vectors; 0 when either text is empty.
  double cosine(const TokenSeq& a, const TokenSeq& b) const {
    const auto va = vector(a), vb = vector(b);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [t, x] : va) {
      na += x * x;
      auto it = vb.find(t);
      if (it != vb.end()) dot += x * it->second;
    }
    for (const auto& [t, x] : vb) nb += x * x;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
  }

 private:
  std::size_t n_docs_;
  std::map<Token, double> df_;
};

inline double consistency_score(const TokenSeq& generated, const TokenSeq& reference, const TfIdf& tfidf) {
  return tfidf.cosine(generated, reference);
}

/// Reference text for an object: every corpus statement "subject relation object" ending in it.
inline std::map<Token, TokenSeq> reference_texts(const FactCorpus& corpus) {
  std::map<Token, TokenSeq> out;
  for (Token o : corpus.objects) out[o];
  for (const auto& t : facts::all_triplets(corpus)) {
    TokenSeq& doc = out[t.object];
    doc.insert(doc.end(), t.subject.begin(), t.subject.end());
    doc.insert(doc.end(), t.relation.begin(), t.relation.end());
    doc.push_back(t.object);
  }
  return out;
}

struct EditRow {
  FactTriplet edit;
  EditScores probability, generation;
  double token_accuracy = 0.0;
  double fluency = 0.0;
  double consistency = 0.0;
  TokenSeq generated;
};

struct EvalReport {
  std::string mode;
  MetricTriple probability, generation;
  double s_probability = 0.0, s_generation = 0.0;
  double token_accuracy = 0.0;  // percent
  double fluency = 0.0;         // mean entropy x 100
  double consistency = 0.0;     // mean cosine x 100
  std::vector<EditRow> rows;
};

/// Scores an edited model against the model it was edited from.
inline EvalReport evaluate(const ModelState& edited, const ModelState& original, const FactCorpus& corpus,
                           const std::vector<Fact>& edits, const std::string& mode) {
  detail::require_edits(edits);
  EvalReport r;
  r.mode = mode;
  const auto ps = probability_scores(edited, edits);
  const auto gs = generation_scores(edited, original, edits);
  r.probability = detail::aggregate(ps);
  r.generation = detail::aggregate(gs);
  r.s_probability = harmonic_s(r.probability);
  r.s_generation = harmonic_s(r.generation);
  const auto refs = reference_texts(corpus);
  std::vector<TokenSeq> docs;
  for (const auto& [o, d] : refs) docs.push_back(d);
  const TfIdf tfidf(docs);
  std::vector<double> acc, flu, con;
  for (std::size_t i = 0; i < edits.size(); ++i) {
    EditRow row;
    row.edit = edits[i].triplet;
    row.probability = ps[i];
    row.generation = gs[i];
    const TokenSeq prompt = edits[i].prompts.rewrite.tokens();
    row.token_accuracy = token_level_accuracy(edited, prompt, {*row.edit.new_object});
    row.generated = greedy_generate(edited, prompt);
    row.fluency = row.generated.size() >= 3 ? fluency_entropy(row.generated) : 0.0;
    row.consistency = consistency_score(row.generated, refs.at(*row.edit.new_object), tfidf);
    acc.push_back(row.token_accuracy);
    flu.push_back(row.fluency);
    con.push_back(row.consistency);
    r.rows.push_back(std::move(row));
  }
  r.token_accuracy = 100.0 * detail::mean(acc);
  r.fluency = 100.0 * detail::mean(flu);
  r.consistency = 100.0 * detail::mean(con);
  return r;
}

inline nlohmann::json triple_json(const MetricTriple& t, double s) {
  return {{"efficacy", t.efficacy}, {"generalization", t.generalization}, {"specificity", t.specificity}, {"s", s}};
}

inline nlohmann::json to_json(const EvalReport& r, const FactCorpus& corpus, const nlohmann::json& config = nullptr) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["mode"] = r.mode;
  j["config"] = config;
  j["metadata"] = {{"aggregation", "mean within edit over paraphrase/neighborhood prompts, then mean over edits"},
                   {"tie_rule", "strict inequality; ties count as failures"},
                   {"fluency", "(2/3) H2 + (4/3) H3 in bits, x100, greedy 50-token continuation of the rewrite prompt"},
                   {"consistency", "TF-IDF cosine against the corpus statements about the new object, x100"},
                   {"n_edits", r.rows.size()}};
  j["probability_based"] = triple_json(r.probability, r.s_probability);
  j["generation_based"] = triple_json(r.generation, r.s_generation);
  j["token_level"] = {{"accuracy", r.token_accuracy}};
  j["fluency"] = r.fluency;
  j["consistency"] = r.consistency;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"subject", corpus.words(row.edit.subject)},
                    {"relation", corpus.words(row.edit.relation)},
                    {"object", corpus.words({row.edit.object})},
                    {"new_object", corpus.words({*row.edit.new_object})},
                    {"probability", {{"efficacy", row.probability.efficacy},
                                     {"generalization", row.probability.generalization},
                                     {"specificity", row.probability.specificity}}},
                    {"generation", {{"efficacy", row.generation.efficacy},
                                    {"generalization", row.generation.generalization},
                                    {"specificity", row.generation.specificity}}},
                    {"token_accuracy", row.token_accuracy},
                    {"fluency", row.fluency},
                    {"consistency", row.consistency},
                    {"generated", corpus.words(row.generated)}});
  }
  j["edits"] = std::move(rows);
  return j;
}

inline std::string csv_number(double x) {
  std::ostringstream s;
  s << std::setprecision(10) << x;
  return s.str();
}

/// One line per edit.
inline std::string to_csv(const EvalReport& r, const FactCorpus& corpus) {
  std::ostringstream out;
  out << "mode,subject,relation,object,new_object,prob_efficacy,prob_generalization,prob_specificity,"
         "gen_efficacy,gen_generalization,gen_specificity,token_accuracy,fluency,consistency\n";
  for (const auto& row : r.rows) {
    out << r.mode << ',' << corpus.words(row.edit.subject) << ',' << corpus.words(row.edit.relation) << ','
        << corpus.words({row.edit.object}) << ',' << corpus.words({*row.edit.new_object}) << ','
        << csv_number(row.probability.efficacy) << ',' << csv_number(row.probability.generalization) << ','
        << csv_number(row.probability.specificity) << ',' << csv_number(row.generation.efficacy) << ','
        << csv_number(row.generation.generalization) << ',' << csv_number(row.generation.specificity) << ','
        << csv_number(row.token_accuracy) << ',' << csv_number(row.fluency) << ',' << csv_number(row.consistency)
        << '\n';
  }
  return out.str();
}

}  // namespace eval
}  // namespace subedit
