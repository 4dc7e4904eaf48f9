#pragma once

// Target-side vectors for an edit: the baseline residual delta found by gradient
// descent on the patched stream, the two-direction swap residual, and the
// per-layer split of a residual across the edit layers.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "subedit/error.hpp"
#include "subedit/facts.hpp"
#include "subedit/linalg.hpp"
#include "subedit/toymodel.hpp"

namespace subedit {

struct RegularizerConfig {
  double lambda_kl = 0.0625;
  double lambda_wd = 0.5;

  void validate() const {
    if (!(lambda_kl >= 0.0) || !(lambda_wd >= 0.0))
      throw Error(Errc::invalid_input, "regularizer: weights must be nonnegative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RegularizerConfig, lambda_kl, lambda_wd)

struct OptimizerConfig {
  int steps = 100;
  double lr = 0.5;
  double clip_norm = 1.0;
  /// Halvings tried when a step raises the loss before the step is accepted anyway.
  int max_backtracks = 8;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, steps, lr, clip_norm, max_backtracks)

struct SwapDirections {
  Vector w1, w2;
  double lambda_penalty = 0.0;
  Vector h_ref;  // unpatched stream the directions were fitted against
};

enum class ResidualKind { baseline, suit };

inline const char* to_string(ResidualKind k) { return k == ResidualKind::baseline ? "baseline" : "suit"; }

struct TracePoint {
  int step = 0;
  double loss = 0.0;
};

struct ResidualResult {
  Vector delta;
  ResidualKind kind = ResidualKind::baseline;
  std::vector<TracePoint> optimizer_trace;
};

/// Everything needed to score a residual patch for one edit: the rewrite prompt
/// under every context prefix, and the "{subject} is a" prompt for the KL term.
struct EditTarget {
  FactTriplet edit;
  std::vector<TokenSeq> prefixes;
  TokenSeq kl_suffix;
};

inline EditTarget make_edit_target(const FactCorpus& corpus, const FactTriplet& edit) {
  EditTarget t{edit, corpus.prefix_pool, {corpus.token("is"), corpus.token("a")}};
  if (t.prefixes.empty()) t.prefixes.push_back({});
  return t;
}

namespace residual {

/// The swap update: (h.w2 - h.w1) w1 + (h.w1 - h.w2) w2.
inline Vector swap_update(const Vector& h, const SwapDirections& d) {
  if (h.size() != d.w1.size() || h.size() != d.w2.size())
    throw Error(Errc::dimension_mismatch, "swap_update: dimension mismatch");
  const double a = h.dot(d.w1), b = h.dot(d.w2);
  return (b - a) * d.w1 + (a - b) * d.w2;
}

struct Decomposition {
  Vector parallel;
  Vector perp;
  double parallel_energy_ratio = 0.0;
};

/// Oblique projection of delta onto span(w1, w2) and its complement.
inline Decomposition decompose_delta(const Vector& delta, const SwapDirections& d) {
  if (delta.size() != d.w1.size()) throw Error(Errc::dimension_mismatch, "decompose_delta: dimension mismatch");
  Matrix w(delta.size(), 2);
  w << d.w1, d.w2;
  const Matrix pw = linalg::oblique_projector(w);
  Decomposition out;
  out.parallel = pw * delta;
  out.perp = delta - out.parallel;
  const double total = delta.squaredNorm();
  out.parallel_energy_ratio = total > 0.0 ? out.parallel.squaredNorm() / total : 0.0;
  return out;
}

/// Share of the remaining gap assigned to edit layer `current_layer`: the gap
/// divided by the number of edit layers from current_layer onwards.
inline Vector spread_residual(const Vector& gap, const std::vector<int>& edit_layers, int current_layer) {
  std::size_t remaining = 0;
  bool found = false;
  for (int l : edit_layers) {
    if (l == current_layer) found = true;
    if (l >= current_layer) ++remaining;
  }
  if (!found) throw Error(Errc::index, "spread_residual: layer is not an edit layer");
  return gap / static_cast<double>(remaining);
}

/// Loss landscape of residual patches at the subject's last token after block `layer`.
class PatchObjective {
 public:
  PatchObjective(const ModelState& m, const EditTarget& target, int layer)
      : target_token_(require_new_object(target.edit)),
        rewrite_(m, rewrite_prompts(target), subject_positions(target), layer),
        kl_(m, {concat(target.edit.subject, target.kl_suffix)}, {target.edit.subject.size() - 1}, layer) {
    if (target.edit.subject.empty()) throw Error(Errc::invalid_input, "edit: empty subject");
    clean_kl_ = subedit::detail::log_softmax(kl_.clean_logits(0));
  }

  std::size_t n_contexts() const { return rewrite_.size(); }
  int layer() const { return rewrite_.layer(); }
  Token target() const { return target_token_; }
  /// Unpatched stream at the patch point for context i.
  Vector stream(std::size_t i) const { return rewrite_.stream(i); }
  /// Mean unpatched stream over contexts.
  Vector mean_stream() const {
    Vector h = Vector::Zero(rewrite_.stream(0).size());
    for (std::size_t i = 0; i < n_contexts(); ++i) h += rewrite_.stream(i);
    return h / static_cast<double>(n_contexts());
  }
  Vector kl_stream() const { return kl_.stream(0); }

  /// Mean negative log-probability of the new object with per-context patches.
  /// When grads is non-null it receives d(loss)/d(delta_i).
  double nll(const std::vector<Vector>& deltas, std::vector<Vector>* grads) const {
    const auto pass = rewrite_.run(deltas);
    const double n = static_cast<double>(n_contexts());
    Matrix dlogits(pass.logits.rows(), pass.logits.cols());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < pass.logits.rows(); ++i) {
      const Vector lp = subedit::detail::log_softmax(pass.logits.row(i).transpose());
      loss -= lp(target_token_) / n;
      Vector g = lp.array().exp();
      g(target_token_) -= 1.0;
      dlogits.row(i) = g.transpose() / n;
    }
    if (grads) *grads = rewrite_.grad(pass, dlogits);
    return loss;
  }

  /// KL(p_clean || p_patched) on the "{subject} is a" prompt.
  double kl(const Vector& delta, Vector* grad) const {
    const auto pass = kl_.run(std::span<const Vector>(&delta, 1));
    const Vector lq = subedit::detail::log_softmax(pass.logits.row(0).transpose());
    const Vector p = clean_kl_.array().exp();
    const double value = (p.array() * (clean_kl_ - lq).array()).sum();
    if (grad) {
      const Matrix dlogits = (lq.array().exp() - p.array()).matrix().transpose();
      *grad = kl_.grad(pass, dlogits)[0];
    }
    return value;
  }

 private:
  static Token require_new_object(const FactTriplet& e) {
    if (!e.new_object) throw Error(Errc::invalid_input, "edit: new_object is missing");
    return *e.new_object;
  }
  static std::vector<TokenSeq> rewrite_prompts(const EditTarget& t) {
    std::vector<TokenSeq> out;
    for (const auto& p : t.prefixes) out.push_back(concat(concat(p, t.edit.subject), t.edit.relation));
    return out;
  }
  static std::vector<std::size_t> subject_positions(const EditTarget& t) {
    std::vector<std::size_t> out;
    for (const auto& p : t.prefixes) out.push_back(p.size() + t.edit.subject.size() - 1);
    return out;
  }

  Token target_token_;
  PatchSite rewrite_;
  PatchSite kl_;
  Vector clean_kl_;
};

/// Baseline objective: nll(h + delta) + lambda_kl KL + lambda_wd |delta|^2 / |h|^2,
/// with h the mean unpatched stream, so the decay is invariant to the stream's scale.
inline double baseline_loss(const PatchObjective& obj, const RegularizerConfig& reg, const Vector& delta, Vector* grad) {
  const double wd = reg.lambda_wd / std::max(obj.mean_stream().squaredNorm(), 1e-12);
  std::vector<Vector> deltas(obj.n_contexts(), delta);
  std::vector<Vector> g;
  double loss = obj.nll(deltas, grad ? &g : nullptr);
  Vector gkl;
  if (reg.lambda_kl > 0.0) loss += reg.lambda_kl * obj.kl(delta, grad ? &gkl : nullptr);
  loss += wd * delta.squaredNorm();
  if (grad) {
    *grad = 2.0 * wd * delta;
    for (const auto& gi : g) *grad += gi;
    if (reg.lambda_kl > 0.0) *grad += reg.lambda_kl * gkl;
  }
  return loss;
}

/// Swap objective: mean nll(h_i + swap_update(h_i)) + lambda (w1.w2)^2, with
/// gradients with respect to the unnormalized w1 and w2.
inline double swap_loss(const PatchObjective& obj, double lambda_penalty, const Vector& w1, const Vector& w2,
                        Vector* g1, Vector* g2) {
  const Vector u = w1 - w2;
  std::vector<Vector> hs, deltas;
  for (std::size_t i = 0; i < obj.n_contexts(); ++i) {
    hs.push_back(obj.stream(i));
    deltas.push_back(-u * u.dot(hs.back()));
  }
  std::vector<Vector> g;
  const double c = w1.dot(w2);
  const double loss = obj.nll(deltas, (g1 || g2) ? &g : nullptr) + lambda_penalty * c * c;
  if (g1 || g2) {
    Vector du = Vector::Zero(u.size());
    for (std::size_t i = 0; i < hs.size(); ++i) du -= u.dot(hs[i]) * g[i] + g[i].dot(u) * hs[i];
    if (g1) *g1 = du + 2.0 * lambda_penalty * c * w2;
    if (g2) *g2 = -du + 2.0 * lambda_penalty * c * w1;
  }
  return loss;
}

namespace detail {
inline void clip(Vector& g, double max_norm) {
  const double n = g.norm();
  if (max_norm > 0.0 && n > max_norm) g *= max_norm / n;
}

inline void check_loss(double loss, const char* what) {
  if (!std::isfinite(loss)) throw Error(Errc::optimization, std::string(what) + ": loss diverged");
}

inline Vector random_unit(std::mt19937_64& rng, Eigen::Index d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = normal(rng);
  return v.normalized();
}
}  // namespace detail

/// Gradient descent on the baseline objective from delta = 0.
inline ResidualResult optimize_delta_baseline(const PatchObjective& obj, const RegularizerConfig& reg,
                                              const OptimizerConfig& opt = {}) {
  reg.validate();
  const Eigen::Index d = obj.stream(0).size();
  ResidualResult out;
  out.kind = ResidualKind::baseline;
  out.delta = Vector::Zero(d);
  Vector grad;
  double loss = baseline_loss(obj, reg, out.delta, &grad);
  detail::check_loss(loss, "optimize_delta_baseline");
  out.optimizer_trace.push_back({0, loss});
  for (int step = 1; step <= opt.steps; ++step) {
    Vector dir = grad;
    detail::clip(dir, opt.clip_norm);
    double lr = opt.lr;
    Vector cand = out.delta - lr * dir;
    Vector cand_grad;
    double cand_loss = baseline_loss(obj, reg, cand, &cand_grad);
    for (int b = 0; b < opt.max_backtracks && !(cand_loss <= loss); ++b) {
      lr *= 0.5;
      cand = out.delta - lr * dir;
      cand_loss = baseline_loss(obj, reg, cand, &cand_grad);
    }
    detail::check_loss(cand_loss, "optimize_delta_baseline");
    if (!(cand_loss <= loss)) break;  // no descent at any tried step size: stationary up to precision
    out.delta = std::move(cand);
    grad = std::move(cand_grad);
    loss = cand_loss;
    out.optimizer_trace.push_back({step, loss});
  }
  return out;
}

/// Fits unit directions (w1, w2) whose swap update promotes the new object.
/// Labels are exchanged afterwards so that h_ref.w1 < h_ref.w2.
inline SwapDirections fit_swap_directions(const PatchObjective& obj, double lambda_penalty, std::uint64_t seed,
                                          const OptimizerConfig& opt = {},
                                          std::vector<TracePoint>* trace = nullptr) {
  if (!(lambda_penalty >= 0.0)) throw Error(Errc::invalid_input, "fit_swap_directions: lambda must be nonnegative");
  const Eigen::Index d = obj.stream(0).size();
  std::mt19937_64 rng(seed);
  SwapDirections s;
  s.lambda_penalty = lambda_penalty;
  s.w1 = detail::random_unit(rng, d);
  s.w2 = detail::random_unit(rng, d);
  Vector g1, g2;
  double loss = swap_loss(obj, lambda_penalty, s.w1, s.w2, &g1, &g2);
  detail::check_loss(loss, "fit_swap_directions");
  if (trace) trace->push_back({0, loss});
  for (int step = 1; step <= opt.steps; ++step) {
    Vector dir(2 * d);
    dir << g1, g2;
    detail::clip(dir, opt.clip_norm);
    double lr = opt.lr;
    Vector c1, c2, cg1, cg2;
    double cand_loss = 0.0;
    auto attempt = [&] {
      c1 = (s.w1 - lr * dir.head(d)).normalized();
      c2 = (s.w2 - lr * dir.tail(d)).normalized();
      cand_loss = swap_loss(obj, lambda_penalty, c1, c2, &cg1, &cg2);
    };
    attempt();
    for (int b = 0; b < opt.max_backtracks && !(cand_loss <= loss); ++b) {
      lr *= 0.5;
      attempt();
    }
    detail::check_loss(cand_loss, "fit_swap_directions");
    if (!(cand_loss <= loss)) break;
    s.w1 = std::move(c1);
    s.w2 = std::move(c2);
    g1 = std::move(cg1);
    g2 = std::move(cg2);
    loss = cand_loss;
    if (trace) trace->push_back({step, loss});
  }
  s.h_ref = obj.mean_stream();
  if (s.h_ref.dot(s.w1) > s.h_ref.dot(s.w2)) std::swap(s.w1, s.w2);
  return s;
}

/// Swap residual for the mean stream over contexts, with its optimizer trace.
inline ResidualResult optimize_delta_swap(const PatchObjective& obj, double lambda_penalty, std::uint64_t seed,
                                          const OptimizerConfig& opt, SwapDirections* directions = nullptr) {
  ResidualResult out;
  out.kind = ResidualKind::suit;
  const SwapDirections s = fit_swap_directions(obj, lambda_penalty, seed, opt, &out.optimizer_trace);
  out.delta = swap_update(s.h_ref, s);
  if (directions) *directions = s;
  return out;
}

}  // namespace residual
}  // namespace subedit
