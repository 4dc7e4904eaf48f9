// subedit: corpus generation, training, editing, evaluation, analysis and sweeps
// over one run directory out/<run-id>/.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "subedit/analysis.hpp"
#include "subedit/eval.hpp"
#include "subedit/facts.hpp"
#include "subedit/pipeline.hpp"
#include "subedit/sweephp.hpp"
#include "subedit/toymodel.hpp"
#include "subedit/updater.hpp"

namespace fs = std::filesystem;
using namespace subedit;
using nlohmann::json;

namespace {

constexpr int kHeldOutPrompts = 50;

/// A required input file is absent; `producer` is the command that writes it.
struct MissingPrerequisite : Error {
  std::string path, producer;
  MissingPrerequisite(const std::string& p, const std::string& cmd)
      : Error(Errc::missing_prerequisite, "missing " + p + "; run `subedit " + cmd + "` first"), path(p), producer(cmd) {}
};

struct Run {
  ExperimentConfig cfg;
  std::vector<EditMode> modes;
  bool mode_flag = false;
  std::string label = "checkpoint";
  std::optional<std::string> checkpoint;
  std::optional<std::string> sweep_parameter;

  fs::path root() const { return fs::path(cfg.out) / cfg.resolved_run_id(); }
  fs::path corpus_path() const { return root() / "corpus" / "corpus.jsonl"; }
  fs::path model_path() const { return root() / "model" / "model.bin"; }
  fs::path edit_dir(EditMode m) const { return root() / "edits" / to_string(m); }
  fs::path reports() const { return root() / "reports"; }
  fs::path analysis() const { return root() / "analysis"; }
};

void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw MissingPrerequisite(p.string(), producer);
}

void write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  pipeline::write_file(p.string(), text);
}

void write_json(const fs::path& p, const json& j) { write(p, j.dump(2) + "\n"); }

std::string edit_producer(EditMode m) { return std::string("edit --mode ") + to_string(m); }

FactCorpus load_corpus(const Run& r) {
  require(r.corpus_path(), "gen-corpus");
  return facts::load_corpus(r.corpus_path().string());
}

ModelState load_model(const Run& r) {
  require(r.model_path(), "train");
  return checkpoint::load(r.model_path().string());
}

ModelState load_edited(const Run& r, EditMode m) {
  const auto p = r.edit_dir(m) / "model.bin";
  require(p, edit_producer(m));
  return checkpoint::load(p.string());
}

SessionConfig session_for(const Run& r, EditMode m) {
  SessionConfig s = r.cfg.session;
  s.mode = m;
  return s;
}

json config_json(const Run& r) { return json(r.cfg); }

void write_manifest(const Run& r) {
  json files = json::array();
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(r.root()))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    const std::string bytes = pipeline::read_file(p.string());
    files.push_back({{"path", fs::relative(p, r.root()).generic_string()},
                     {"bytes", bytes.size()},
                     {"fnv1a64", pipeline::hex64(pipeline::fnv1a(bytes))}});
  }
  write_json(r.root() / "manifest.json",
             {{"schema_version", 1}, {"run_id", r.cfg.resolved_run_id()}, {"artifacts", std::move(files)}});
}

void cmd_gen_corpus(const Run& r) {
  const auto corpus = facts::generate_corpus(r.cfg.corpus);
  fs::create_directories(r.corpus_path().parent_path());
  facts::save_corpus(corpus, r.corpus_path().string());
  std::cout << "corpus: " << corpus.facts.size() << " facts, " << corpus.background.size() << " background, "
            << corpus.vocabulary.size() << " words -> " << r.corpus_path().string() << "\n";
}

void cmd_train(const Run& r) {
  const auto corpus = load_corpus(r);
  const auto result = train(r.cfg.model, corpus, r.cfg.train);
  fs::create_directories(r.model_path().parent_path());
  checkpoint::save(result.model, r.model_path().string(), {{"train", r.cfg.train}});
  write_json(r.root() / "model" / "train.json",
             {{"schema_version", 1},
              {"recall", result.recall},
              {"full_recall", result.full_recall},
              {"final_loss", result.final_loss},
              {"steps_run", result.steps_run},
              {"attempts", result.attempts},
              {"config", config_json(r)}});
  std::cout << "train: recall " << result.recall << " after " << result.steps_run << " steps -> "
            << r.model_path().string() << "\n";
}

void cmd_edit(const Run& r) {
  const auto corpus = load_corpus(r);
  const auto model = load_model(r);
  const auto edits = pipeline::select_edits(model, corpus, r.cfg.n_edits());
  for (EditMode m : r.modes) {
    const auto run = pipeline::run_session(model, corpus, edits, session_for(r, m), r.cfg.batch_size);
    fs::create_directories(r.edit_dir(m));
    checkpoint::save(run.model, (r.edit_dir(m) / "model.bin").string(), {{"mode", to_string(m)}});
    write_json(r.edit_dir(m) / "session.json", pipeline::session_log(run, corpus));
    std::cout << "edit: " << to_string(m) << " " << edits.size() << " edits in " << run.batches.size()
              << " batches -> " << r.edit_dir(m).string() << "\n";
  }
}

void write_report(const Run& r, const std::string& label, const eval::EvalReport& rep, const FactCorpus& corpus) {
  write_json(r.reports() / (label + ".json"), eval::to_json(rep, corpus, config_json(r)));
  write(r.reports() / (label + ".csv"), eval::to_csv(rep, corpus));
  std::cout << "eval: " << label << " efficacy " << rep.generation.efficacy << " generalization "
            << rep.generation.generalization << " specificity " << rep.generation.specificity << "\n";
}

void cmd_eval(const Run& r) {
  const auto corpus = load_corpus(r);
  const auto model = load_model(r);
  const auto edits = pipeline::select_edits(model, corpus, r.cfg.n_edits());
  if (r.checkpoint) {
    require(*r.checkpoint, "train");
    const auto m = checkpoint::load(*r.checkpoint);
    write_report(r, r.label, eval::evaluate(m, model, corpus, edits, r.label), corpus);
    return;
  }
  std::ostringstream summary;
  summary << "mode,prob_efficacy,prob_generalization,prob_specificity,prob_s,gen_efficacy,gen_generalization,"
             "gen_specificity,gen_s,token_accuracy,fluency,consistency\n";
  for (EditMode m : r.modes) {
    const auto rep = eval::evaluate(load_edited(r, m), model, corpus, edits, to_string(m));
    write_report(r, to_string(m), rep, corpus);
    summary << to_string(m);
    for (double x : {rep.probability.efficacy, rep.probability.generalization, rep.probability.specificity,
                     rep.s_probability, rep.generation.efficacy, rep.generation.generalization,
                     rep.generation.specificity, rep.s_generation, rep.token_accuracy, rep.fluency, rep.consistency})
      summary << ',' << eval::csv_number(x);
    summary << '\n';
  }
  write(r.reports() / "summary.csv", summary.str());
}

std::vector<Prompt> held_out_prompts(const FactCorpus& corpus, const std::vector<Fact>& edits) {
  std::vector<Prompt> held;
  for (const auto& f : corpus.facts) {
    if (std::any_of(edits.begin(), edits.end(), [&](const Fact& e) { return e.triplet == f.triplet; })) continue;
    held.push_back(f.prompts.rewrite);
    if (static_cast<int>(held.size()) == kHeldOutPrompts) break;
  }
  return held;
}

void cmd_analyze(const Run& r) {
  const auto corpus = load_corpus(r);
  const auto model = load_model(r);
  const auto edits = pipeline::select_edits(model, corpus, r.cfg.n_edits());
  std::vector<ModelState> edited;
  for (EditMode m : r.modes) edited.push_back(load_edited(r, m));

  const auto session = updater::start_session(model, corpus, pipeline::triplets(edits), r.cfg.session);
  json summary = {{"schema_version", 1}, {"config", config_json(r)}};

  std::ostringstream var;
  var << "layer,n_keys,rank,v_specific,v_agnostic\n";
  for (const auto& row : analysis::variance_table(model, corpus, session.bases))
    var << row.layer << ',' << row.n_keys << ',' << row.rank << ',' << eval::csv_number(row.v_specific) << ','
        << eval::csv_number(row.v_agnostic) << '\n';
  write(r.analysis() / "variance.csv", var.str());

  const auto held = held_out_prompts(corpus, edits);
  std::ostringstream leak, drift, pert;
  leak << "mode,layer,prompt_type,n,mean_leakage\n";
  drift << "mode,layer,mlp_output_drift\n";
  pert << "mode,prompt,position,subject_last,norm\n";
  for (std::size_t i = 0; i < r.modes.size(); ++i) {
    const std::string name = to_string(r.modes[i]);
    for (const auto& row : analysis::leakage_table(model, edited[i], corpus, edits, session.bases))
      leak << name << ',' << row.layer << ',' << row.prompt_type << ',' << row.n << ','
           << eval::csv_number(row.mean_leakage) << '\n';
    const auto d = analysis::mlp_output_drift(model, edited[i], held);
    for (std::size_t l = 0; l < d.size(); ++l) drift << name << ',' << l << ',' << eval::csv_number(d[l]) << '\n';
    const auto prof = analysis::perturbation_profile(model, edited[i], held);
    double subject_sum = 0.0, other_sum = 0.0;
    std::size_t subject_n = 0, other_n = 0;
    for (std::size_t p = 0; p < prof.size(); ++p)
      for (std::size_t t = 0; t < prof[p].norms.size(); ++t) {
        pert << name << ',' << p << ',' << t << ',' << (prof[p].subject_last[t] ? 1 : 0) << ','
             << eval::csv_number(prof[p].norms[t]) << '\n';
        (prof[p].subject_last[t] ? subject_sum : other_sum) += prof[p].norms[t];
        ++(prof[p].subject_last[t] ? subject_n : other_n);
      }
    summary["modes"][name] = {{"mlp_output_drift", d},
                              {"perturbation_subject_last", subject_n ? subject_sum / static_cast<double>(subject_n) : 0.0},
                              {"perturbation_other", other_n ? other_sum / static_cast<double>(other_n) : 0.0}};
  }
  write(r.analysis() / "leakage.csv", leak.str());
  write(r.analysis() / "drift.csv", drift.str());
  write(r.analysis() / "perturbation.csv", pert.str());

  std::ostringstream dec;
  dec << "subject,relation,new_object,parallel_energy_ratio,p_full,p_parallel,p_perp,converged\n";
  std::size_t converged = 0, parallel_wins = 0;
  double ratio = 0.0;
  for (const auto& row : analysis::delta_decomposition_table(model, corpus, edits, r.cfg.session)) {
    dec << corpus.words(row.edit.subject) << ',' << corpus.words(row.edit.relation) << ','
        << corpus.words({*row.edit.new_object}) << ',' << eval::csv_number(row.parallel_energy_ratio) << ','
        << eval::csv_number(row.p_full) << ',' << eval::csv_number(row.p_parallel) << ','
        << eval::csv_number(row.p_perp) << ',' << (row.converged ? 1 : 0) << '\n';
    if (!row.converged) continue;
    ++converged;
    parallel_wins += row.p_parallel >= row.p_perp;
    ratio += row.parallel_energy_ratio;
  }
  write(r.analysis() / "decomposition.csv", dec.str());
  summary["decomposition"] = {{"converged", converged},
                              {"parallel_at_least_perp", parallel_wins},
                              {"mean_parallel_energy_ratio", converged ? ratio / static_cast<double>(converged) : 0.0}};

  const auto& first = edits.front();
  const residual::PatchObjective obj(model, make_edit_target(corpus, first.triplet), model.config.last_edit_layer());
  const auto dirs = residual::fit_swap_directions(obj, r.cfg.session.lambda_penalty,
                                                  updater::detail::edit_seed(r.cfg.session.seed, 0, 0),
                                                  r.cfg.session.swap_optimizer);
  const auto curve = analysis::sweep_components(model, first.triplet, dirs);
  std::ostringstream sw;
  sw << "k,new_logit_w1,old_logit_w1,new_logit_w2,old_logit_w2\n";
  for (std::size_t i = 0; i < curve.k.size(); ++i)
    sw << eval::csv_number(curve.k[i]) << ',' << eval::csv_number(curve.new_logit_w1[i]) << ','
       << eval::csv_number(curve.old_logit_w1[i]) << ',' << eval::csv_number(curve.new_logit_w2[i]) << ','
       << eval::csv_number(curve.old_logit_w2[i]) << '\n';
  write(r.analysis() / "swap_components.csv", sw.str());
  write_json(r.analysis() / "analysis.json", summary);
  std::cout << "analyze: " << r.modes.size() << " modes -> " << r.analysis().string() << "\n";
}

void cmd_sweep(const Run& r) {
  const auto corpus = load_corpus(r);
  const auto model = load_model(r);
  std::vector<SweepParameter> params = {SweepParameter::tau_energy, SweepParameter::lambda_penalty};
  if (r.sweep_parameter) params = {parse_sweep_parameter(*r.sweep_parameter)};
  for (SweepParameter p : params) {
    SweepSpec spec;
    spec.parameter = p;
    spec.values = p == SweepParameter::tau_energy ? r.cfg.tau_grid : r.cfg.lambda_grid;
    spec.fixed_other = p == SweepParameter::tau_energy ? r.cfg.session.lambda_penalty : r.cfg.session.tau_energy;
    spec.batches = r.cfg.batches;
    spec.batch_size = r.cfg.batch_size;
    spec.seed = r.cfg.session.seed;
    spec.base = r.cfg.session;
    const auto points = sweep::run_sweep(spec, corpus, model);
    const std::string name = std::string("sweep_") + to_string(p) + ".csv";
    write(r.analysis() / name, sweep::to_csv(spec, points));
    const auto failed = std::count_if(points.begin(), points.end(), [](const SweepPoint& x) { return !x.ok(); });
    std::cout << "sweep: " << to_string(p) << " " << points.size() << " points, " << failed << " failed -> "
              << (r.analysis() / name).string() << "\n";
  }
}

void cmd_all(const Run& r) {
  cmd_gen_corpus(r);
  cmd_train(r);
  cmd_edit(r);
  cmd_eval(r);
  cmd_analyze(r);
  cmd_sweep(r);
}

int fail(const std::string& command, const std::exception& e) {
  json rec = {{"command", command}, {"message", e.what()}};
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    rec["code"] = to_string(err->code());
    if (const auto* tf = dynamic_cast<const TrainingFailed*>(err)) rec["recall"] = tf->recall();
  } else {
    rec["code"] = "internal";
  }
  if (const auto* mp = dynamic_cast<const MissingPrerequisite*>(&e)) {
    rec["path"] = mp->path;
    rec["producer"] = "subedit " + mp->producer;
  }
  std::cerr << json({{"schema_version", 1}, {"error", rec}}).dump() << "\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Subspace-constrained knowledge editing on a toy transformer"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode, out;
  std::optional<double> tau, lambda;
  app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed for corpus, model and editing");
  app.add_option("--mode", mode, "Edit mode: suit, alphaedit, memit, k-only, delta-only");
  app.add_option("--tau-energy", tau, "Energy share of the agnostic subspace");
  app.add_option("--lambda", lambda, "Directional penalty weight");
  app.add_option("--out", out, "Output directory");

  Run run;
  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic fact corpus");
  auto* trn = app.add_subcommand("train", "Train the toy model on the corpus");
  auto* edt = app.add_subcommand("edit", "Apply the edit session for each mode");
  auto* evl = app.add_subcommand("eval", "Score edited checkpoints");
  evl->add_option("--checkpoint", run.checkpoint, "Score this checkpoint instead of the edited ones");
  evl->add_option("--label", run.label, "Report name for --checkpoint");
  auto* ana = app.add_subcommand("analyze", "Leakage, drift, perturbation, variance and decomposition tables");
  auto* swp = app.add_subcommand("sweep", "Tau-energy and lambda tradeoff sweeps");
  swp->add_option("--parameter", run.sweep_parameter, "tau_energy or lambda_penalty (default: both)");
  auto* all = app.add_subcommand("all", "Run every stage in order");

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : pipeline::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.out = *out;
    if (tau) cfg.session.tau_energy = *tau;
    if (lambda) cfg.session.lambda_penalty = *lambda;
    if (mode) cfg.session.mode = parse_edit_mode(*mode);
    cfg = cfg.resolved();
    cfg.validate();
    run.cfg = cfg;
    run.mode_flag = mode.has_value();
    run.modes = mode ? std::vector<EditMode>{cfg.session.mode} : cfg.compare_modes;
    if (run.modes.empty()) throw Error(Errc::invalid_input, "config: compare_modes is empty");
    fs::create_directories(run.root());
    write_json(run.root() / "config.json", json(cfg));

    if (gen->parsed()) cmd_gen_corpus(run);
    else if (trn->parsed()) cmd_train(run);
    else if (edt->parsed()) cmd_edit(run);
    else if (evl->parsed()) cmd_eval(run);
    else if (ana->parsed()) cmd_analyze(run);
    else if (swp->parsed()) cmd_sweep(run);
    else if (all->parsed()) cmd_all(run);
    write_manifest(run);
  } catch (const std::exception& e) {
    return fail(command, e);
  }
  return 0;
}
