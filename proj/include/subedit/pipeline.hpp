#pragma once

// Experiment configuration and the edit-session driver shared by the sweep
// harness and the command-line front end.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "subedit/error.hpp"
#include "subedit/eval.hpp"
#include "subedit/facts.hpp"
#include "subedit/toymodel.hpp"
#include "subedit/updater.hpp"

namespace subedit {

struct ExperimentConfig {
  CorpusParams corpus;
  ToyModelConfig model;
  TrainOptions train;
  SessionConfig session;
  std::vector<EditMode> compare_modes{EditMode::suit, EditMode::alphaedit, EditMode::memit};
  int batches = 2;
  int batch_size = 10;
  std::uint64_t seed = 1;
  std::vector<double> tau_grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<double> lambda_grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::string out = "out";
  std::string run_id;  // empty: "seed-<seed>"

  bool operator==(const ExperimentConfig&) const = default;

  int n_edits() const { return batches * batch_size; }
  std::string resolved_run_id() const { return run_id.empty() ? "seed-" + std::to_string(seed) : run_id; }

  /// Copies the top-level seed into every seeded component.
  ExperimentConfig resolved() const {
    ExperimentConfig c = *this;
    c.corpus.seed = seed;
    c.model.seed = seed;
    c.session.seed = seed;
    c.run_id = resolved_run_id();
    return c;
  }

  void validate() const {
    if (batches < 1 || batch_size < 1) throw Error(Errc::invalid_input, "config: batches and batch_size must be positive");
    if (!(session.tau_energy >= 0.0 && session.tau_energy < 1.0))
      throw Error(Errc::invalid_input, "config: tau_energy must lie in [0, 1)");
    if (!(session.lambda_penalty >= 0.0)) throw Error(Errc::invalid_input, "config: lambda_penalty must be nonnegative");
    if (!(session.nullspace_threshold > 0.0)) throw Error(Errc::invalid_input, "config: nullspace_threshold must be positive");
    if (!(session.l2 >= 0.0)) throw Error(Errc::invalid_input, "config: L2 must be nonnegative");
    session.regularizer.validate();
    if (out.empty()) throw Error(Errc::invalid_input, "config: output directory is empty");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, corpus, model, train, session, compare_modes, batches,
                                                batch_size, seed, tau_grid, lambda_grid, out, run_id)

namespace pipeline {

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot read config " + path);
  try {
    return nlohmann::json::parse(in).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse, "config " + path + ": " + e.what());
  }
}

/// First `n` facts, in corpus order, that the model currently answers with o.
inline std::vector<Fact> select_edits(const ModelState& m, const FactCorpus& corpus, int n) {
  auto eligible = eval::eligible_facts(m, corpus.facts);
  if (static_cast<int>(eligible.size()) < n)
    throw Error(Errc::insufficient_data, "select_edits: " + std::to_string(eligible.size()) + " eligible facts, " +
                                             std::to_string(n) + " requested");
  eligible.resize(static_cast<std::size_t>(n));
  return eligible;
}

inline std::vector<FactTriplet> triplets(const std::vector<Fact>& facts) {
  std::vector<FactTriplet> out;
  for (const auto& f : facts) out.push_back(f.triplet);
  return out;
}

struct SessionRun {
  ModelState model;
  EditSession session;
  std::vector<EditBatch> batches;
};

/// Clones `m` and applies `edits` in consecutive batches of `batch_size`.
inline SessionRun run_session(const ModelState& m, const FactCorpus& corpus, const std::vector<Fact>& edits,
                              const SessionConfig& cfg, int batch_size) {
  if (batch_size < 1) throw Error(Errc::invalid_input, "run_session: batch_size must be positive");
  const auto all = triplets(edits);
  SessionRun run{m, updater::start_session(m, corpus, all, cfg), {}};
  for (std::size_t b = 0; b < all.size(); b += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(all.size(), b + static_cast<std::size_t>(batch_size));
    const std::vector<FactTriplet> batch(all.begin() + static_cast<std::ptrdiff_t>(b),
                                         all.begin() + static_cast<std::ptrdiff_t>(end));
    auto outcome = updater::apply_batch(run.model, corpus, batch, run.session);
    run.model = std::move(outcome.model);
    run.batches.push_back(std::move(outcome.batch));
  }
  return run;
}

inline nlohmann::json session_log(const SessionRun& run, const FactCorpus& corpus) {
  nlohmann::json batches = nlohmann::json::array();
  for (const auto& b : run.batches) {
    nlohmann::json edits = nlohmann::json::array();
    for (std::size_t i = 0; i < b.edits.size(); ++i) {
      const auto& e = b.edits[i];
      nlohmann::json row = {{"subject", corpus.words(e.edit.subject)},
                            {"relation", corpus.words(e.edit.relation)},
                            {"object", corpus.words({e.edit.object})},
                            {"new_object", corpus.words({*e.edit.new_object})},
                            {"residual_kind", to_string(e.residual.kind)},
                            {"residual_norm", e.residual.delta.norm()},
                            {"stream_norm", e.h_start.norm()},
                            {"final_loss", e.residual.optimizer_trace.empty() ? 0.0 : e.residual.optimizer_trace.back().loss},
                            {"final_gap", b.final_gap[i]}};
      if (e.directions) row["w1_dot_w2"] = e.directions->w1.dot(e.directions->w2);
      edits.push_back(std::move(row));
    }
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : b.layers)
      layers.push_back({{"layer", l.layer}, {"delta_frobenius", l.delta.norm()}, {"leakage", l.leakage}});
    batches.push_back({{"index", b.index}, {"edits", std::move(edits)}, {"layers", std::move(layers)}});
  }
  nlohmann::json bases = nlohmann::json::array();
  for (const auto& b : run.session.bases) bases.push_back({{"layer", b.layer}, {"rank", b.rank()}, {"tau_energy", b.tau_energy}});
  nlohmann::json preserved = nlohmann::json::array();
  for (const auto& p : run.session.preserved)
    preserved.push_back({{"layer", p.layer}, {"n_keys", p.n_keys}, {"nullspace_dim", p.projector.trace()}});
  return {{"schema_version", eval::kSchemaVersion},
          {"mode", to_string(run.session.mode())},
          {"config", run.session.config},
          {"agnostic_bases", std::move(bases)},
          {"preserved", std::move(preserved)},
          {"batches", std::move(batches)}};
}

/// Worker count from SUBEDIT_THREADS (unset or 0: hardware concurrency).
inline unsigned thread_count() {
  unsigned n = 0;
  if (const char* env = std::getenv("SUBEDIT_THREADS")) n = static_cast<unsigned>(std::strtoul(env, nullptr, 10));
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

/// Runs f(i) for i in [0, n) on up to thread_count() workers. The first exception is rethrown.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& f) {
  const std::size_t workers = std::min<std::size_t>(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          f(i);
        } catch (...) {
          if (!failed.exchange(true)) first = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t x) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << x;
  return s.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write " + path);
  out << text;
  if (!out) throw Error(Errc::io, "write failed for " + path);
}

}  // namespace pipeline
}  // namespace subedit
