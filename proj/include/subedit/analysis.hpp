#pragma once

// Read-only measurements on original/edited model pairs: residual-stream
// perturbation per token, MLP output drift per layer, the scaled-component
// sweep of a swap update, and aggregated variance / leakage / decomposition tables.

#include <json.hpp>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "subedit/error.hpp"
#include "subedit/eval.hpp"
#include "subedit/facts.hpp"
#include "subedit/keyspace.hpp"
#include "subedit/residual.hpp"
#include "subedit/toymodel.hpp"
#include "subedit/updater.hpp"

namespace subedit {

struct PerturbationRecord {
  TokenSeq prompt;
  std::vector<double> norms;         // per token, |h_edited - h_original| after the last edit layer
  std::vector<bool> subject_last;    // true at the subject's last token
};

struct SweepCurve {
  std::vector<double> k;
  std::vector<double> new_logit_w1, old_logit_w1;  // under h + k * dw1
  std::vector<double> new_logit_w2, old_logit_w2;  // under h + k * dw2
};

namespace analysis {

namespace detail {
inline void require_same_shape(const ModelState& a, const ModelState& b) {
  if (!(a.config == b.config)) throw Error(Errc::config_mismatch, "analysis: models have different configurations");
}
}  // namespace detail

inline std::vector<PerturbationRecord> perturbation_profile(const ModelState& original, const ModelState& edited,
                                                            const std::vector<Prompt>& prompts) {
  detail::require_same_shape(original, edited);
  const int layer = original.config.last_edit_layer();
  std::vector<PerturbationRecord> out;
  for (const auto& p : prompts) {
    const TokenSeq seq = p.tokens();
    const auto a = forward_trace(original, seq), b = forward_trace(edited, seq);
    PerturbationRecord rec;
    rec.prompt = seq;
    const auto& ha = a.residual[static_cast<std::size_t>(layer)];
    const auto& hb = b.residual[static_cast<std::size_t>(layer)];
    for (Eigen::Index t = 0; t < ha.rows(); ++t) {
      rec.norms.push_back((hb.row(t) - ha.row(t)).norm());
      rec.subject_last.push_back(static_cast<std::size_t>(t) == p.subject_last());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// Mean over prompts of |mlp_out_edited - mlp_out_original| at the subject's last token, for every layer.
inline std::vector<double> mlp_output_drift(const ModelState& original, const ModelState& edited,
                                            const std::vector<Prompt>& prompts) {
  detail::require_same_shape(original, edited);
  if (prompts.empty()) throw Error(Errc::empty_input, "mlp_output_drift: no prompts");
  std::vector<double> drift(static_cast<std::size_t>(original.config.n_layers), 0.0);
  for (const auto& p : prompts) {
    const auto a = forward_trace(original, p.tokens()), b = forward_trace(edited, p.tokens());
    const auto row = static_cast<Eigen::Index>(p.subject_last());
    for (std::size_t l = 0; l < drift.size(); ++l) drift[l] += (b.mlp_out[l].row(row) - a.mlp_out[l].row(row)).norm();
  }
  for (double& d : drift) d /= static_cast<double>(prompts.size());
  return drift;
}

/// Logits of o and o* when the stream at the subject's last token is patched with
/// k * dw1 or k * dw2, the two terms of the swap update, for k on a uniform grid in [0, 1].
inline SweepCurve sweep_components(const ModelState& m, const FactTriplet& edit, const SwapDirections& d,
                                   int grid_size = 11) {
  if (grid_size < 2) throw Error(Errc::invalid_input, "sweep_components: grid needs at least 2 points");
  if (!edit.new_object) throw Error(Errc::invalid_input, "sweep_components: edit without new_object");
  const int layer = m.config.last_edit_layer();
  const TokenSeq prompt = concat(edit.subject, edit.relation);
  const std::size_t pos = edit.subject.size() - 1;
  const Vector h = forward_trace(m, prompt).residual[static_cast<std::size_t>(layer)].row(static_cast<Eigen::Index>(pos)).transpose();
  const double a = h.dot(d.w1), b = h.dot(d.w2);
  const Vector dw1 = (b - a) * d.w1, dw2 = (a - b) * d.w2;
  SweepCurve c;
  for (int i = 0; i < grid_size; ++i) {
    const double k = static_cast<double>(i) / static_cast<double>(grid_size - 1);
    const Vector z1 = forward_with_stream_patch(m, prompt, layer, pos, k * dw1);
    const Vector z2 = forward_with_stream_patch(m, prompt, layer, pos, k * dw2);
    c.k.push_back(k);
    c.new_logit_w1.push_back(z1(*edit.new_object));
    c.old_logit_w1.push_back(z1(edit.object));
    c.new_logit_w2.push_back(z2(*edit.new_object));
    c.old_logit_w2.push_back(z2(edit.object));
  }
  return c;
}

struct VarianceRow {
  int layer = 0;
  std::size_t n_keys = 0;
  std::size_t rank = 0;
  double v_specific = 0.0, v_agnostic = 0.0;
};

/// Component variances of the subject-pool keys at every edit layer.
inline std::vector<VarianceRow> variance_table(const ModelState& m, const FactCorpus& corpus,
                                               const std::vector<SubspaceBasis>& bases) {
  std::vector<int> layers;
  for (const auto& b : bases) layers.push_back(b.layer);
  const auto ks = keyspace::extract_keys(m, corpus.subject_pool, corpus.prefix_pool, layers);
  std::vector<VarianceRow> out;
  for (std::size_t i = 0; i < bases.size(); ++i) {
    std::vector<KeyVector> keys;
    for (Eigen::Index j = 0; j < ks[i].cols(); ++j) keys.push_back({layers[i], ks[i].col(j), corpus.subject_pool[static_cast<std::size_t>(j)]});
    const auto v = keyspace::component_variance(keys, bases[i]);
    out.push_back({layers[i], keys.size(), static_cast<std::size_t>(bases[i].rank()), v.v_specific, v.v_agnostic});
  }
  return out;
}

struct LeakageRow {
  int layer = 0;
  std::string prompt_type;  // rewrite, paraphrase or neighborhood
  std::size_t n = 0;
  double mean_leakage = 0.0;
};

/// Mean |Delta k_agnostic|^2 / |Delta k|^2 per edit layer and prompt type, with Delta the
/// total change of the layer's down-projection and keys read from the original model.
/// Rewrite keys are prefix-averaged; paraphrase and neighborhood keys come from the prompt itself.
/// Keys with Delta k = 0 are skipped.
inline std::vector<LeakageRow> leakage_table(const ModelState& original, const ModelState& edited,
                                             const FactCorpus& corpus, const std::vector<Fact>& edits,
                                             const std::vector<SubspaceBasis>& bases) {
  detail::require_same_shape(original, edited);
  std::vector<LeakageRow> out;
  std::vector<TokenSeq> subjects;
  std::vector<Prompt> para, neigh;
  for (const auto& f : edits) {
    subjects.push_back(f.triplet.subject);
    for (const auto& p : f.prompts.paraphrases) para.push_back(p);
    for (const auto& p : f.prompts.neighborhood) neigh.push_back(p);
  }
  auto prompt_keys = [&](const std::vector<Prompt>& ps, int layer) {
    Matrix k(original.config.d_mlp, static_cast<Eigen::Index>(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i)
      k.col(static_cast<Eigen::Index>(i)) = keyspace::extract_key(original, ps[i].subject, {ps[i].prefix}, layer).values;
    return k;
  };
  for (const auto& b : bases) {
    const std::size_t l = static_cast<std::size_t>(b.layer);
    const Matrix delta = edited.layers[l].w_down - original.layers[l].w_down;
    const std::vector<std::pair<std::string, Matrix>> groups = {
        {"rewrite", subjects.empty() ? Matrix(original.config.d_mlp, 0)
                                     : keyspace::extract_keys(original, subjects, corpus.prefix_pool, {b.layer})[0]},
        {"paraphrase", prompt_keys(para, b.layer)},
        {"neighborhood", prompt_keys(neigh, b.layer)}};
    for (const auto& [name, keys] : groups) {
      LeakageRow row{b.layer, name, 0, 0.0};
      for (Eigen::Index j = 0; j < keys.cols(); ++j) {
        if (!((delta * keys.col(j)).squaredNorm() > 0.0)) continue;
        row.mean_leakage += updater::leakage_proportion(delta, keys.col(j), b);
        ++row.n;
      }
      if (row.n > 0) row.mean_leakage /= static_cast<double>(row.n);
      out.push_back(row);
    }
  }
  return out;
}

struct DecompositionRow {
  FactTriplet edit;
  double parallel_energy_ratio = 0.0;
  double p_full = 0.0, p_parallel = 0.0, p_perp = 0.0;  // p(o*) at the rewrite prompt
  bool converged = false;  // the full baseline delta makes o* the greedy answer
};

/// Splits each edit's baseline residual into its part inside span(w1, w2) of the
/// fitted swap directions and the remainder, and scores both parts as patches.
inline std::vector<DecompositionRow> delta_decomposition_table(const ModelState& m, const FactCorpus& corpus,
                                                               const std::vector<Fact>& edits,
                                                               const SessionConfig& cfg) {
  std::vector<DecompositionRow> out;
  const int layer = m.config.last_edit_layer();
  for (std::size_t i = 0; i < edits.size(); ++i) {
    const auto target = make_edit_target(corpus, edits[i].triplet);
    const residual::PatchObjective obj(m, target, layer);
    const auto base = residual::optimize_delta_baseline(obj, cfg.regularizer, cfg.delta_optimizer);
    const auto dirs = residual::fit_swap_directions(obj, cfg.lambda_penalty,
                                                    updater::detail::edit_seed(cfg.seed, -1, i), cfg.swap_optimizer);
    const auto dec = residual::decompose_delta(base.delta, dirs);
    const TokenSeq prompt = concat(edits[i].triplet.subject, edits[i].triplet.relation);
    const std::size_t pos = edits[i].triplet.subject.size() - 1;
    const Token o_new = *edits[i].triplet.new_object;
    auto prob = [&](const Vector& delta) {
      return std::exp(subedit::detail::log_softmax(forward_with_stream_patch(m, prompt, layer, pos, delta))(o_new));
    };
    DecompositionRow row;
    row.edit = edits[i].triplet;
    row.parallel_energy_ratio = dec.parallel_energy_ratio;
    row.p_full = prob(base.delta);
    row.p_parallel = prob(dec.parallel);
    row.p_perp = prob(dec.perp);
    row.converged = eval::argmax(forward_with_stream_patch(m, prompt, layer, pos, base.delta)) == o_new;
    out.push_back(row);
  }
  return out;
}

}  // namespace analysis
}  // namespace subedit
