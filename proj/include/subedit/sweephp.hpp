#pragma once

// Hyperparameter tradeoff harness: one full edit session and evaluation per grid
// value of tau_energy or lambda_penalty, each from the same frozen checkpoint.

#include <json.hpp>

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "subedit/error.hpp"
#include "subedit/eval.hpp"
#include "subedit/pipeline.hpp"
#include "subedit/toymodel.hpp"
#include "subedit/updater.hpp"

namespace subedit {

enum class SweepParameter { tau_energy, lambda_penalty };

inline const char* to_string(SweepParameter p) {
  return p == SweepParameter::tau_energy ? "tau_energy" : "lambda_penalty";
}

inline SweepParameter parse_sweep_parameter(const std::string& s) {
  if (s == "tau_energy") return SweepParameter::tau_energy;
  if (s == "lambda_penalty") return SweepParameter::lambda_penalty;
  throw Error(Errc::invalid_input, "unknown sweep parameter '" + s + "'");
}

struct SweepSpec {
  SweepParameter parameter = SweepParameter::tau_energy;
  std::vector<double> values;
  double fixed_other = 0.3;  // lambda when sweeping tau, tau when sweeping lambda
  int batches = 2;
  int batch_size = 10;
  std::uint64_t seed = 1;
  /// Everything else (mode, regularizer, optimizers, nullspace threshold, L2).
  SessionConfig base;

  void validate() const {
    if (values.empty()) throw Error(Errc::empty_input, "sweep: no grid values");
    if (batches < 1 || batch_size < 1) throw Error(Errc::invalid_input, "sweep: batches and batch_size must be positive");
    auto tau_ok = [](double t) { return t >= 0.0 && t < 1.0; };
    auto lambda_ok = [](double l) { return l >= 0.0; };
    const bool sweeping_tau = parameter == SweepParameter::tau_energy;
    for (double v : values)
      if (!(sweeping_tau ? tau_ok(v) : lambda_ok(v)))
        throw Error(Errc::invalid_input, std::string("sweep: value out of range for ") + to_string(parameter));
    if (!(sweeping_tau ? lambda_ok(fixed_other) : tau_ok(fixed_other)))
      throw Error(Errc::invalid_input, "sweep: fixed_other out of range");
  }

  SessionConfig session_for(double value) const {
    SessionConfig c = base;
    c.seed = seed;
    if (parameter == SweepParameter::tau_energy) {
      c.tau_energy = value;
      c.lambda_penalty = fixed_other;
    } else {
      c.lambda_penalty = value;
      c.tau_energy = fixed_other;
    }
    return c;
  }
};

struct SweepPoint {
  double value = 0.0;
  std::optional<eval::EvalReport> report;  // empty when the point failed
  std::string error_code;
  std::string error;

  bool ok() const { return report.has_value(); }
};

namespace sweep {

/// One edit session plus evaluation per grid value. Points are independent and may run
/// in parallel; a failing point is flagged and the rest of the grid still runs.
inline std::vector<SweepPoint> run_sweep(const SweepSpec& spec, const FactCorpus& corpus, const ModelState& model) {
  spec.validate();
  const auto edits = pipeline::select_edits(model, corpus, spec.batches * spec.batch_size);
  std::vector<SweepPoint> points(spec.values.size());
  pipeline::parallel_for(points.size(), [&](std::size_t i) {
    SweepPoint& p = points[i];
    p.value = spec.values[i];
    try {
      const auto cfg = spec.session_for(p.value);
      const auto run = pipeline::run_session(model, corpus, edits, cfg, spec.batch_size);
      p.report = eval::evaluate(run.model, model, corpus, edits, to_string(cfg.mode));
    } catch (const Error& e) {
      p.error_code = to_string(e.code());
      p.error = e.what();
    } catch (const std::exception& e) {
      p.error_code = "internal";
      p.error = e.what();
    }
  });
  return points;
}

/// One row per (value, metric); failed points get a single row with status "failed".
inline std::string to_csv(const SweepSpec& spec, const std::vector<SweepPoint>& points) {
  std::ostringstream out;
  out << "parameter,value,metric,score,status\n";
  const std::string name = to_string(spec.parameter);
  for (const auto& p : points) {
    const std::string v = eval::csv_number(p.value);
    if (!p.ok()) {
      out << name << ',' << v << ",,,failed:" << p.error_code << '\n';
      continue;
    }
    const auto& r = *p.report;
    const std::vector<std::pair<const char*, double>> metrics = {
        {"prob_efficacy", r.probability.efficacy},     {"prob_generalization", r.probability.generalization},
        {"prob_specificity", r.probability.specificity}, {"prob_s", r.s_probability},
        {"gen_efficacy", r.generation.efficacy},       {"gen_generalization", r.generation.generalization},
        {"gen_specificity", r.generation.specificity},   {"gen_s", r.s_generation},
        {"token_accuracy", r.token_accuracy},          {"fluency", r.fluency},
        {"consistency", r.consistency}};
    for (const auto& [m, s] : metrics) out << name << ',' << v << ',' << m << ',' << eval::csv_number(s) << ",ok\n";
  }
  return out.str();
}

}  // namespace sweep
}  // namespace subedit
