#pragma once

// Closed-form edits of the MLP down-projections: preserved-key statistics and
// their null-space projector, the per-mode weight update, and a sequential
// batch editor that spreads each edit's residual over the edit layers.

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "subedit/error.hpp"
#include "subedit/facts.hpp"
#include "subedit/keyspace.hpp"
#include "subedit/linalg.hpp"
#include "subedit/residual.hpp"
#include "subedit/toymodel.hpp"

namespace subedit {

enum class EditMode { suit, alphaedit, memit, k_only, delta_only };

inline const char* to_string(EditMode m) {
  switch (m) {
    case EditMode::suit: return "suit";
    case EditMode::alphaedit: return "alphaedit";
    case EditMode::memit: return "memit";
    case EditMode::k_only: return "k-only";
    case EditMode::delta_only: return "delta-only";
  }
  return "unknown";
}

inline EditMode parse_edit_mode(const std::string& s) {
  for (EditMode m : {EditMode::suit, EditMode::alphaedit, EditMode::memit, EditMode::k_only, EditMode::delta_only})
    if (s == to_string(m)) return m;
  throw Error(Errc::invalid_input, "unknown edit mode '" + s + "'");
}

inline void to_json(nlohmann::json& j, EditMode m) { j = to_string(m); }
inline void from_json(const nlohmann::json& j, EditMode& m) { m = parse_edit_mode(j.get<std::string>()); }

/// Constrained keys are used by suit and k-only; swap residuals by suit and delta-only.
inline bool uses_constrained_keys(EditMode m) { return m == EditMode::suit || m == EditMode::k_only; }
inline bool uses_swap_residual(EditMode m) { return m == EditMode::suit || m == EditMode::delta_only; }

struct PreservedKnowledge {
  int layer = 0;
  Matrix k0_cov;  // K0 K0^T
  double nullspace_threshold = 0.0;
  Matrix projector;  // P onto eigenvectors of K0 K0^T with eigenvalue <= threshold * largest
  Eigen::Index n_keys = 0;
};

namespace updater {

/// Statistics of a preserved key matrix (d_mlp x n).
inline PreservedKnowledge preserved_from_keys(const Matrix& k0, double nullspace_threshold, int layer = 0) {
  if (k0.cols() == 0) throw Error(Errc::empty_input, "build_preserved: empty preserved key set");
  if (!(nullspace_threshold >= 0.0)) throw Error(Errc::invalid_input, "build_preserved: threshold must be nonnegative");
  linalg::require_finite(k0, "build_preserved");
  PreservedKnowledge pk;
  pk.layer = layer;
  pk.nullspace_threshold = nullspace_threshold;
  pk.n_keys = k0.cols();
  pk.k0_cov = k0 * k0.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(pk.k0_cov);
  if (eig.info() != Eigen::Success) throw Error(Errc::factorization, "build_preserved: eigendecomposition failed");
  const double top = std::max(0.0, eig.eigenvalues().maxCoeff());
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i)
    if (eig.eigenvalues()(i) <= nullspace_threshold * top) keep.push_back(i);
  Matrix u(k0.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) u.col(static_cast<Eigen::Index>(j)) = eig.eigenvectors().col(keep[j]);
  pk.projector = u * u.transpose();
  return pk;
}

/// Subjects of every corpus triplet that is not being edited, deduplicated in first-seen order.
inline std::vector<TokenSeq> preserved_subjects(const FactCorpus& corpus, const std::vector<FactTriplet>& edits) {
  std::set<TokenSeq> excluded;
  for (const auto& e : edits) excluded.insert(e.subject);
  std::set<TokenSeq> seen;
  std::vector<TokenSeq> out;
  for (const auto& t : facts::all_triplets(corpus))
    if (!excluded.count(t.subject) && seen.insert(t.subject).second) out.push_back(t.subject);
  return out;
}

/// Preserved statistics for several layers from one batched key pass.
inline std::vector<PreservedKnowledge> build_preserved_layers(const ModelState& m, const FactCorpus& corpus,
                                                              const std::vector<int>& layers,
                                                              double nullspace_threshold,
                                                              const std::vector<FactTriplet>& edits = {}) {
  const auto subjects = preserved_subjects(corpus, edits);
  if (subjects.empty()) throw Error(Errc::empty_input, "build_preserved: no preserved facts");
  const auto keys = keyspace::extract_keys(m, subjects, corpus.prefix_pool, layers);
  std::vector<PreservedKnowledge> out;
  for (std::size_t i = 0; i < layers.size(); ++i) out.push_back(preserved_from_keys(keys[i], nullspace_threshold, layers[i]));
  return out;
}

inline PreservedKnowledge build_preserved(const ModelState& m, const FactCorpus& corpus, int layer,
                                          double nullspace_threshold, const std::vector<FactTriplet>& edits = {}) {
  return build_preserved_layers(m, corpus, {layer}, nullspace_threshold, edits)[0];
}

/// Weight update for keys K (d_mlp x n) and residuals R (d_model x n).
///   memit:               R K^T (l2 K0K0^T + K K^T)^-1, minimum-norm when singular
///   every other mode:    R K^T P (Kp Kp^T P + K K^T P + I)^-1
inline Matrix compute_delta(const Matrix& k, const Matrix& r, const Matrix& prior_keys, const PreservedKnowledge& pk,
                            EditMode mode, double l2 = 10.0) {
  const Eigen::Index dk = pk.k0_cov.rows();
  if (k.rows() != dk || k.cols() != r.cols() || (prior_keys.size() > 0 && prior_keys.rows() != dk))
    throw Error(Errc::dimension_mismatch, "compute_delta: inconsistent shapes");
  linalg::require_finite(k, "compute_delta");
  linalg::require_finite(r, "compute_delta");
  if (k.cols() == 0) return Matrix::Zero(r.rows(), dk);
  if (mode == EditMode::memit) {
    // The system is consistent; with fewer preserved keys than d_mlp it is singular
    // and the minimum-norm solution is taken.
    const Matrix a = l2 * pk.k0_cov + k * k.transpose();
    const Matrix rhs = k * r.transpose();
    const Matrix x = Eigen::CompleteOrthogonalDecomposition<Matrix>(a).solve(rhs);
    if (!x.allFinite() || (a * x - rhs).norm() > 1e-8 * std::max(1.0, rhs.norm()))
      throw Error(Errc::factorization, "compute_delta: linear system could not be solved accurately");
    return x.transpose();
  }
  const Matrix& p = pk.projector;
  Matrix cov = k * k.transpose();
  if (prior_keys.cols() > 0) cov.noalias() += prior_keys * prior_keys.transpose();
  Matrix mtx = cov * p;
  mtx.diagonal().array() += 1.0;
  // Delta M = R K^T P  <=>  M^T Delta^T = P K R^T
  Eigen::PartialPivLU<Matrix> lu(mtx.transpose());
  const Matrix rhs = p * k * r.transpose();
  const Matrix x = lu.solve(rhs);
  if (!x.allFinite() || (mtx.transpose() * x - rhs).norm() > 1e-8 * std::max(1.0, rhs.norm()))
    throw Error(Errc::factorization, "compute_delta: linear system could not be solved accurately");
  return x.transpose();
}

/// Relative residual of the normal equations that compute_delta solves.
inline double normal_equation_residual(const Matrix& delta, const Matrix& k, const Matrix& r, const Matrix& prior_keys,
                                       const PreservedKnowledge& pk, EditMode mode, double l2 = 10.0) {
  Matrix lhs, rhs;
  if (mode == EditMode::memit) {
    lhs = delta * (l2 * pk.k0_cov + k * k.transpose());
    rhs = r * k.transpose();
  } else {
    Matrix cov = k * k.transpose();
    if (prior_keys.cols() > 0) cov += prior_keys * prior_keys.transpose();
    Matrix mtx = cov * pk.projector;
    mtx.diagonal().array() += 1.0;
    lhs = delta * mtx;
    rhs = r * k.transpose() * pk.projector;
  }
  return linalg::relative_frobenius(lhs, rhs);
}

/// |Delta k_agnostic|^2 / |Delta k|^2 with k_agnostic = U_t U_t^T k.
inline double leakage_proportion(const Matrix& delta, const Vector& k, const SubspaceBasis& b) {
  const double denom = (delta * k).squaredNorm();
  if (!(denom > 0.0)) throw Error(Errc::undefined_ratio, "leakage_proportion: Delta k is zero");
  return (delta * keyspace::agnostic_component(k, b)).squaredNorm() / denom;
}

}  // namespace updater

struct SessionConfig {
  EditMode mode = EditMode::suit;
  double tau_energy = 0.4;
  double lambda_penalty = 0.3;
  RegularizerConfig regularizer;
  OptimizerConfig delta_optimizer;
  OptimizerConfig swap_optimizer;
  double nullspace_threshold = 2e-2;
  double l2 = 10.0;
  std::uint64_t seed = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SessionConfig, mode, tau_energy, lambda_penalty, regularizer,
                                                delta_optimizer, swap_optimizer, nullspace_threshold, l2, seed)

/// Mutable state of a sequential editing run: per edit layer, the keys edited so
/// far, the preserved statistics and the agnostic subspace of the unedited model.
struct EditSession {
  SessionConfig config;
  std::vector<int> layers;
  std::vector<Matrix> prior_keys;  // d_mlp x (edits so far), per layer
  std::vector<PreservedKnowledge> preserved;
  std::vector<SubspaceBasis> bases;
  int batch_counter = 0;

  EditMode mode() const { return config.mode; }
  std::size_t layer_index(int layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i] == layer) return i;
    throw Error(Errc::index, "session: layer " + std::to_string(layer) + " is not an edit layer");
  }
};

/// One edit's target: the residual found at the last edit layer and the stream it aims for.
struct EditRecord {
  FactTriplet edit;
  ResidualResult residual;
  std::optional<SwapDirections> directions;
  Vector h_start;  // mean stream at the last edit layer before this batch
  Vector target;   // h_start + residual.delta
};

struct LayerUpdate {
  int layer = 0;
  Matrix keys_raw;  // d_mlp x n, keys measured on the partially edited model
  Matrix keys;      // keys the update was solved for (constrained in suit / k-only)
  Matrix residuals;  // d_model x n
  Matrix delta;      // d_model x d_mlp
  std::vector<double> leakage;  // per edit, against the raw key
};

struct EditBatch {
  int index = 0;
  std::vector<EditRecord> edits;
  std::vector<LayerUpdate> layers;
  std::vector<double> final_gap;  // |target - realized stream| / |residual| per edit
};

namespace updater {

inline EditSession start_session(const ModelState& m, const FactCorpus& corpus,
                                 const std::vector<FactTriplet>& all_edits, const SessionConfig& cfg) {
  cfg.regularizer.validate();
  EditSession s;
  s.config = cfg;
  s.layers = m.config.edit_layers;
  s.preserved = build_preserved_layers(m, corpus, s.layers, cfg.nullspace_threshold, all_edits);
  if (corpus.subject_pool.empty()) throw Error(Errc::empty_input, "session: corpus subject pool is empty");
  const auto ks = keyspace::extract_keys(m, corpus.subject_pool, corpus.prefix_pool, s.layers);
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    s.bases.push_back(keyspace::identify_agnostic_subspace(ks[i], cfg.tau_energy, s.layers[i]));
    s.prior_keys.emplace_back(m.config.d_mlp, 0);
  }
  return s;
}

namespace detail {
/// Mean over context prefixes of the stream after `layer` at each edit's subject position.
inline Matrix mean_subject_streams(const ModelState& m, const std::vector<EditTarget>& targets, int layer) {
  std::vector<TokenSeq> seqs;
  std::vector<std::pair<std::size_t, std::size_t>> where;  // (edit, position)
  for (std::size_t e = 0; e < targets.size(); ++e)
    for (const auto& p : targets[e].prefixes) {
      seqs.push_back(concat(concat(p, targets[e].edit.subject), targets[e].edit.relation));
      where.emplace_back(e, p.size() + targets[e].edit.subject.size() - 1);
    }
  Matrix out = Matrix::Zero(m.config.d_model, static_cast<Eigen::Index>(targets.size()));
  const auto c = subedit::detail::forward(m, seqs);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const Eigen::Index row = c.segs[i].begin + static_cast<Eigen::Index>(where[i].second);
    out.col(static_cast<Eigen::Index>(where[i].first)) += c.layers[static_cast<std::size_t>(layer)].x_out.row(row).transpose();
  }
  for (std::size_t e = 0; e < targets.size(); ++e)
    out.col(static_cast<Eigen::Index>(e)) /= static_cast<double>(targets[e].prefixes.size());
  return out;
}

inline std::uint64_t edit_seed(std::uint64_t seed, int batch, std::size_t edit) {
  std::uint64_t x = seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(batch + 1)) ^
                    (0xBF58476D1CE4E5B9ull * static_cast<std::uint64_t>(edit + 1));
  x ^= x >> 31;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 29;
  return x;
}
}  // namespace detail

/// Residual target for one edit on the current model.
inline EditRecord plan_edit(const ModelState& m, const EditTarget& target, const SessionConfig& cfg,
                            std::uint64_t seed) {
  const residual::PatchObjective obj(m, target, m.config.last_edit_layer());
  EditRecord rec;
  rec.edit = target.edit;
  if (uses_swap_residual(cfg.mode)) {
    SwapDirections dirs;
    rec.residual = residual::optimize_delta_swap(obj, cfg.lambda_penalty, seed, cfg.swap_optimizer, &dirs);
    rec.directions = std::move(dirs);
  } else {
    rec.residual = residual::optimize_delta_baseline(obj, cfg.regularizer, cfg.delta_optimizer);
  }
  rec.h_start = obj.mean_stream();
  rec.target = rec.h_start + rec.residual.delta;
  return rec;
}

struct BatchOutcome {
  ModelState model;
  EditBatch batch;
};

/// Applies one batch: finds each edit's residual at the last edit layer, then walks
/// the edit layers in order, re-measuring keys and the remaining gap on the
/// partially edited model and solving for that layer's update.
inline BatchOutcome apply_batch(const ModelState& m, const FactCorpus& corpus, const std::vector<FactTriplet>& edits,
                                EditSession& s) {
  BatchOutcome out{m, {}};
  out.batch.index = s.batch_counter;
  if (edits.empty()) return out;
  if (m.config.edit_layers != s.layers) throw Error(Errc::config_mismatch, "apply_batch: model and session edit layers differ");
  std::vector<EditTarget> targets;
  for (const auto& e : edits) targets.push_back(make_edit_target(corpus, e));
  for (std::size_t i = 0; i < targets.size(); ++i)
    out.batch.edits.push_back(plan_edit(m, targets[i], s.config, detail::edit_seed(s.config.seed, s.batch_counter, i)));

  const int last = m.config.last_edit_layer();
  const auto n = static_cast<Eigen::Index>(edits.size());
  Matrix z(m.config.d_model, n);
  for (Eigen::Index j = 0; j < n; ++j) z.col(j) = out.batch.edits[static_cast<std::size_t>(j)].target;

  std::vector<TokenSeq> subjects;
  for (const auto& e : edits) subjects.push_back(e.subject);
  for (std::size_t li = 0; li < s.layers.size(); ++li) {
    const int layer = s.layers[li];
    LayerUpdate up;
    up.layer = layer;
    up.keys_raw = keyspace::extract_keys(out.model, subjects, corpus.prefix_pool, {layer})[0];
    up.keys = up.keys_raw;
    if (uses_constrained_keys(s.config.mode))
      for (Eigen::Index j = 0; j < n; ++j) up.keys.col(j) = keyspace::constrain(up.keys_raw.col(j), s.bases[li]);
    const Matrix gap = z - detail::mean_subject_streams(out.model, targets, last);
    up.residuals.resize(m.config.d_model, n);
    for (Eigen::Index j = 0; j < n; ++j) up.residuals.col(j) = residual::spread_residual(gap.col(j), s.layers, layer);
    up.delta = compute_delta(up.keys, up.residuals, s.prior_keys[li], s.preserved[li], s.config.mode, s.config.l2);
    for (Eigen::Index j = 0; j < n; ++j) {
      const Vector k = up.keys_raw.col(j);
      up.leakage.push_back((up.delta * k).squaredNorm() > 0.0 ? leakage_proportion(up.delta, k, s.bases[li]) : 0.0);
    }
    out.model.layers[static_cast<std::size_t>(layer)].w_down += up.delta;
    out.batch.layers.push_back(std::move(up));
  }
  const Matrix realized = detail::mean_subject_streams(out.model, targets, last);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double norm = out.batch.edits[static_cast<std::size_t>(j)].residual.delta.norm();
    const double gap = (z.col(j) - realized.col(j)).norm();
    out.batch.final_gap.push_back(norm > 0.0 ? gap / norm : 0.0);
  }
  for (std::size_t li = 0; li < s.layers.size(); ++li) {
    Matrix& kp = s.prior_keys[li];
    Matrix grown(kp.rows(), kp.cols() + n);
    grown << kp, out.batch.layers[li].keys;
    kp = std::move(grown);
  }
  ++s.batch_counter;
  return out;
}

}  // namespace updater
}  // namespace subedit
