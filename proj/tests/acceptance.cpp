// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <sys/wait.h>

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include "oracles/finite_diff.hpp"
#include "oracles/quadratic.hpp"
#include "subedit/analysis.hpp"
#include "subedit/eval.hpp"
#include "subedit/keyspace.hpp"
#include "subedit/linalg.hpp"
#include "subedit/pipeline.hpp"
#include "subedit/residual.hpp"
#include "subedit/updater.hpp"

namespace fs = std::filesystem;
using namespace subedit;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Matrix randn(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Matrix orthonormal(std::mt19937_64& rng, Eigen::Index d, Eigen::Index k) {
  Eigen::HouseholderQR<Matrix> qr(randn(rng, d, k));
  return qr.householderQ() * Matrix::Identity(d, k);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// The toy experiment: 200 facts, 20 edits in 2 batches per mode, per seed.

constexpr int kSeeds = 5;
constexpr EditMode kModes[] = {EditMode::suit, EditMode::alphaedit, EditMode::memit};

struct ModeResult {
  eval::EvalReport report;
  double rewrite_leakage = 0.0;  // first edit layer
  pipeline::SessionRun run;
};

struct SeedExperiment {
  std::uint64_t seed = 0;
  FactCorpus corpus;
  TrainResult trained;
  std::vector<Fact> edits;
  std::map<EditMode, std::unique_ptr<ModeResult>> modes;
  std::vector<analysis::DecompositionRow> decomposition;
};

SeedExperiment run_seed(std::uint64_t seed) {
  SeedExperiment x;
  x.seed = seed;
  CorpusParams cp;
  cp.seed = seed;
  x.corpus = facts::generate_corpus(cp);
  ToyModelConfig mc;
  mc.seed = seed;
  x.trained = train(mc, x.corpus, TrainOptions{});
  const ModelState& m = x.trained.model;
  x.edits = pipeline::select_edits(m, x.corpus, 20);
  for (EditMode mode : kModes) {
    SessionConfig sc;
    sc.mode = mode;
    sc.seed = seed;
    auto r = std::make_unique<ModeResult>();
    r->run = pipeline::run_session(m, x.corpus, x.edits, sc, 10);
    r->report = eval::evaluate(r->run.model, m, x.corpus, x.edits, to_string(mode));
    const int first = m.config.edit_layers.front();
    for (const auto& row : analysis::leakage_table(m, r->run.model, x.corpus, x.edits, r->run.session.bases))
      if (row.layer == first && row.prompt_type == "rewrite") r->rewrite_leakage = row.mean_leakage;
    x.modes[mode] = std::move(r);
  }
  SessionConfig sc;
  sc.seed = seed;
  x.decomposition = analysis::delta_decomposition_table(m, x.corpus, x.edits, sc);
  return x;
}

const std::vector<SeedExperiment>& experiments() {
  static const std::vector<SeedExperiment> all = [] {
    std::vector<SeedExperiment> out(kSeeds);
    pipeline::parallel_for(kSeeds, [&](std::size_t i) { out[i] = run_seed(i + 1); });
    return out;
  }();
  return all;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome swap_identity() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  double worst = 0.0;
  for (int d : {8, 64})
    for (int i = 0; i < 1000; ++i) {
      const Matrix w = orthonormal(rng, d, 2);
      const SwapDirections s{w.col(0), w.col(1)};
      const Vector h = 3.0 * randn(rng, d, 1);
      const Vector moved = h + residual::swap_update(h, s);
      worst = std::max({worst, std::abs(moved.dot(s.w1) - h.dot(s.w2)), std::abs(moved.dot(s.w2) - h.dot(s.w1))});
    }
  const double t = seconds_since(t0);
  return {worst <= 1e-10 && t < 1.0, fmt("max abs error %.2e over 2000 triples (tol 1e-10), %.3f s (limit 1 s)", worst, t)};
}

Outcome closed_form_delta() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> dm(4, 16), dk(6, 24), ne(1, 5), np(0, 4);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const int d_model = dm(rng), d_mlp = dk(rng), n = ne(rng), n_prior = np(rng);
    const int rank = std::uniform_int_distribution<int>(1, d_mlp - 1)(rng);
    const auto pk = updater::preserved_from_keys(randn(rng, d_mlp, rank) * randn(rng, rank, d_mlp + 3), 2e-2);
    const Matrix k = randn(rng, d_mlp, n), r = randn(rng, d_model, n), kp = randn(rng, d_mlp, n_prior);
    for (EditMode mode : {EditMode::suit, EditMode::alphaedit}) {
      const Matrix delta = updater::compute_delta(k, r, kp, pk, mode);
      worst = std::max(worst, linalg::relative_frobenius(delta, oracle::nullspace_update(k, r, kp, pk.projector)));
    }
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-6 && t < 10.0, fmt("max relative Frobenius %.2e on 20 instances (tol 1e-6), %.3f s (limit 10 s)", worst, t)};
}

Outcome nullspace_preservation() {
  std::mt19937_64 rng(3);
  const Matrix k0 = randn(rng, 32, 5);
  const auto pk = updater::preserved_from_keys(k0, 2e-2);
  const Matrix k = randn(rng, 32, 4), r = randn(rng, 16, 4), kp = randn(rng, 32, 3);
  double worst = 0.0;
  for (EditMode mode : {EditMode::alphaedit, EditMode::suit}) {
    const Matrix delta = updater::compute_delta(k, r, kp, pk, mode);
    for (Eigen::Index j = 0; j < 5; ++j)
      worst = std::max(worst, (delta * k0.col(j)).norm() / (delta.norm() * k0.col(j).norm()));
  }
  return {worst <= 1e-4, fmt("max |D k0| / (|D|_F |k0|) = %.2e (tol 1e-4), nullspace dim %.0f", worst, pk.projector.trace())};
}

Outcome energy_rank() {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> len(1, 32);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  std::bernoulli_distribution repeat(0.3);
  int mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<double> s(static_cast<std::size_t>(len(rng)));
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = (i > 0 && repeat(rng)) ? s[i - 1] : u(rng);
    std::sort(s.rbegin(), s.rend());
    if (s.front() == 0.0) s.front() = 1.0;
    double total = 0.0;
    for (double x : s) total += x * x;
    for (int t = 0; t <= 9; ++t) {
      const double tau = t / 10.0;
      std::size_t expect = s.size();
      for (std::size_t m = 0; m <= s.size(); ++m) {
        double partial = 0.0;
        for (std::size_t i = 0; i < m; ++i) partial += s[i] * s[i];
        if (partial >= tau * total) {
          expect = m;
          break;
        }
      }
      if (linalg::energy_rank(s, tau) != expect) ++mismatches;
    }
  }
  return {mismatches == 0, fmt("%d mismatches in 100000 (spectrum, tau) pairs", mismatches)};
}

Outcome key_constraint() {
  const auto& x = experiments().front();
  const auto& run = x.modes.at(EditMode::suit)->run;
  double ortho = 0.0, pyth = 0.0;
  int n = 0;
  for (const auto& b : run.batches)
    for (std::size_t li = 0; li < b.layers.size(); ++li) {
      const auto& basis = run.session.bases[li];
      for (Eigen::Index j = 0; j < b.layers[li].keys.cols(); ++j) {
        const Vector k = b.layers[li].keys_raw.col(j), kc = b.layers[li].keys.col(j);
        ortho = std::max(ortho, (basis.basis.transpose() * kc).norm() / k.norm());
        pyth = std::max(pyth, std::abs(k.squaredNorm() - kc.squaredNorm() -
                                       keyspace::agnostic_component(k, basis).squaredNorm()) / k.squaredNorm());
        ++n;
      }
    }
  return {n == 40 && ortho <= 1e-8 && pyth <= 1e-9,
          fmt("%d keys (20 edits x 2 layers): max |U^T k'|/|k| = %.2e (tol 1e-8), Pythagorean rel. error %.2e (tol 1e-9)",
              n, ortho, pyth)};
}

Outcome gradient_checks() {
  const auto& x = experiments().front();
  const ModelState& m = x.trained.model;
  const int layer = m.config.last_edit_layer();
  double patch_worst = 0.0, swap_worst = 0.0;
  for (int probe = 0; probe < 20; ++probe) {
    std::mt19937_64 rng(600 + static_cast<std::uint64_t>(probe));
    const Fact& f = x.edits[static_cast<std::size_t>(probe)];
    const TokenSeq prompt = f.prompts.rewrite.tokens();
    const std::size_t pos = f.prompts.rewrite.subject_last();
    const Vector delta = 0.5 * randn(rng, m.config.d_model, 1);
    const auto loss = losses::neg_log_prob(*f.triplet.new_object);
    const Vector g = grad_wrt_patch(m, prompt, layer, pos, delta, loss);
    const auto fp = [&](const Vector& d) { return loss(forward_with_stream_patch(m, prompt, layer, pos, d), nullptr); };
    patch_worst = std::max(patch_worst, oracle::relative_error(g, oracle::central_gradient(fp, delta)));

    const residual::PatchObjective obj(m, make_edit_target(x.corpus, f.triplet), layer);
    const Eigen::Index d = m.config.d_model;
    const Vector w = 0.3 * randn(rng, 2 * d, 1);
    Vector g1, g2;
    residual::swap_loss(obj, 0.3, w.head(d), w.tail(d), &g1, &g2);
    Vector gw(2 * d);
    gw << g1, g2;
    const auto fs = [&](const Vector& v) { return residual::swap_loss(obj, 0.3, v.head(d), v.tail(d), nullptr, nullptr); };
    swap_worst = std::max(swap_worst, oracle::relative_error(gw, oracle::central_gradient(fs, w)));
  }
  return {patch_worst <= 1e-4 && swap_worst <= 1e-4,
          fmt("max relative error: residual patch %.2e, (w1, w2) loss %.2e on 20 probes each (tol 1e-4)", patch_worst,
              swap_worst)};
}

Outcome harmonic_s() {
  std::ifstream in(std::string(SUBEDIT_FIXTURES) + "/table1_scores.csv");
  if (!in) return {false, "fixture missing"};
  std::string line;
  std::getline(in, line);
  int rows = 0;
  double worst = 0.0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string field;
    for (int i = 0; i < 3; ++i) std::getline(ss, field, ',');
    double v[4];
    for (double& y : v) {
      std::getline(ss, field, ',');
      y = std::stod(field);
    }
    worst = std::max(worst, std::abs(eval::harmonic_s(v[1], v[2], v[3]) - v[0]));
    ++rows;
  }
  return {rows == 42 && worst <= 0.2, fmt("%d published rows, max |S - S_published| = %.3f (tol 0.2)", rows, worst)};
}

Outcome end_to_end() {
  int eff = 0, spec = 0, leak = 0;
  std::ostringstream per_seed;
  double min_recall = 1.0;
  for (const auto& x : experiments()) {
    const auto& s = *x.modes.at(EditMode::suit);
    const auto& a = *x.modes.at(EditMode::alphaedit);
    const auto& me = *x.modes.at(EditMode::memit);
    min_recall = std::min(min_recall, x.trained.recall);
    const bool i = s.report.generation.efficacy >= 90.0;
    const bool ii = s.report.generation.specificity >= me.report.generation.specificity;
    const bool iii = s.rewrite_leakage <= 0.05 && me.rewrite_leakage > s.rewrite_leakage && a.rewrite_leakage > s.rewrite_leakage;
    eff += i;
    spec += ii;
    leak += iii;
    per_seed << fmt("\n    seed %llu: recall %.3f | suit eff %.1f spe %.1f | memit spe %.1f | leakage suit %.4f alphaedit %.4f memit %.4f",
                    static_cast<unsigned long long>(x.seed), x.trained.recall, s.report.generation.efficacy,
                    s.report.generation.specificity, me.report.generation.specificity, s.rewrite_leakage,
                    a.rewrite_leakage, me.rewrite_leakage);
  }
  const bool pass = min_recall >= 0.95 && eff >= 4 && spec >= 4 && leak >= 4;
  return {pass, fmt("seeds passing: (i) efficacy %d/5, (ii) specificity %d/5, (iii) leakage %d/5 (need 4/5 each)", eff,
                    spec, leak) + per_seed.str()};
}

Outcome decomposition() {
  int converged = 0, wins = 0;
  for (const auto& x : experiments())
    for (const auto& row : x.decomposition)
      if (row.converged) {
        ++converged;
        wins += row.p_parallel >= row.p_perp;
      }
  const double share = converged > 0 ? static_cast<double>(wins) / converged : 0.0;
  return {converged >= 10 && share >= 0.7,
          fmt("%d converged edits, p(o*) under parallel part >= perpendicular part in %.1f%% (need >= 70%%)", converged,
              100.0 * share)};
}

Outcome metric_fixtures() {
  const double flu = eval::fluency_entropy({7, 7, 7, 7, 7, 7, 7, 7});
  const eval::TfIdf tfidf({{1, 2, 3}, {2, 4}});
  const double con = eval::consistency_score({1, 2, 2, 4}, {1, 2, 2, 4}, tfidf);

  // A model whose logits do not depend on the input: token 4 always wins.
  ToyModelConfig cfg;
  cfg.vocab_size = 6;
  ModelState m = init_model(cfg);
  visit_params(m, [](const std::string&, auto& t) { t.setZero(); });
  m.lnf_b(0) = 1.0;
  m.unembed(4, 0) = 1.0;
  const double a1 = eval::token_level_accuracy(m, {1, 2}, {4});
  const double a2 = eval::token_level_accuracy(m, {1, 2}, {3});
  const double a3 = eval::token_level_accuracy(m, {1}, {0, 4, 4, 4});
  const bool pass = flu == 0.0 && std::abs(con - 1.0) <= 1e-12 && a1 == 1.0 && a2 == 0.0 && a3 == 0.75;
  return {pass, fmt("repetitive fluency %.3g, identical consistency %.15g, token accuracy %.3g/%.3g/%.3g (expect 1/0/0.75)",
                    flu, con, a1, a2, a3)};
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "subedit_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const nlohmann::json cfg = {{"corpus", {{"n_subjects", 120}, {"n_facts", 60}, {"n_objects", 10}, {"n_relations", 4}}},
                              {"train", {{"steps", 600}}},
                              {"batches", 2},
                              {"batch_size", 3},
                              {"tau_grid", {0.0, 0.4}},
                              {"lambda_grid", {0.3}},
                              {"out", (dir / "out").string()}};
  std::ofstream(dir / "config.json") << cfg.dump(2);
  const std::string cmd = std::string(SUBEDIT_CLI) + " all --config " + (dir / "config.json").string() + " --seed 3 > /dev/null";
  auto snapshot = [&] {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir / "out"))
      if (e.is_regular_file() && e.path().extension() == ".json")
        files[e.path().string()] = pipeline::read_file(e.path().string());
    return files;
  };
  const int r1 = std::system(cmd.c_str());
  const auto first = snapshot();
  const int r2 = std::system(cmd.c_str());
  const auto second = snapshot();
  fs::remove_all(dir);
  if (r1 != 0 || r2 != 0) return {false, "subedit all exited with an error"};
  int differing = 0, reports = 0;
  for (const auto& [path, bytes] : first) {
    auto it = second.find(path);
    if (it == second.end() || it->second != bytes) ++differing;
    if (path.find("/reports/") != std::string::npos) ++reports;
  }
  return {differing == 0 && first.size() == second.size() && reports >= 3,
          fmt("%zu JSON files (%d reports), %d differ between two runs", first.size(), reports, differing)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"swap identity", swap_identity},
      {"closed-form update vs quadratic minimizer", closed_form_delta},
      {"null-space preservation", nullspace_preservation},
      {"energy rank vs prefix search", energy_rank},
      {"key constraint orthogonality", key_constraint},
      {"gradient checks", gradient_checks},
      {"harmonic S on published scores", harmonic_s},
      {"toy end-to-end comparison", end_to_end},
      {"delta decomposition direction", decomposition},
      {"metric fixtures", metric_fixtures},
      {"CLI determinism", determinism},
  };
  const auto t0 = std::chrono::steady_clock::now();
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  std::cout << fmt("%d/%zu criteria passed in %.0f s", static_cast<int>(criteria.size()) - failed, criteria.size(),
                   seconds_since(t0))
            << std::endl;
  return failed == 0 ? 0 : 1;
}
