#pragma once

// Key vectors (MLP up-projection activations at a subject's last token), the
// subject key matrix, its dominant entity-agnostic subspace, and constrained keys.

#include <cstddef>
#include <utility>
#include <vector>

#include "subedit/error.hpp"
#include "subedit/facts.hpp"
#include "subedit/linalg.hpp"
#include "subedit/toymodel.hpp"

namespace subedit {

struct KeyVector {
  int layer = 0;
  Vector values;
  TokenSeq subject;
};

struct SubspaceBasis {
  Matrix basis;  // d_mlp x m, orthonormal columns U_t
  linalg::EnergySpectrum spectrum;
  double tau_energy = 0.0;
  int layer = 0;

  Eigen::Index dim() const { return basis.rows(); }
  Eigen::Index rank() const { return basis.cols(); }
};

namespace keyspace {

namespace detail {
inline std::vector<TokenSeq> prefixes_or_empty(const std::vector<TokenSeq>& prefixes) {
  return prefixes.empty() ? std::vector<TokenSeq>{TokenSeq{}} : prefixes;
}
}  // namespace detail

/// Prefix-averaged keys of many subjects at several layers in batched passes.
/// Result[i] is d_mlp x subjects.size() for layers[i].
inline std::vector<Matrix> extract_keys(const ModelState& m, const std::vector<TokenSeq>& subjects,
                                        const std::vector<TokenSeq>& prefixes, const std::vector<int>& layers) {
  if (subjects.empty()) throw Error(Errc::empty_input, "extract_keys: no subjects");
  for (int l : layers)
    if (l < 0 || l >= m.config.n_layers) throw Error(Errc::index, "extract_keys: layer out of range");
  const auto pre = detail::prefixes_or_empty(prefixes);
  std::vector<Matrix> out(layers.size(), Matrix::Zero(m.config.d_mlp, static_cast<Eigen::Index>(subjects.size())));
  constexpr std::size_t kChunk = 256;
  std::vector<TokenSeq> seqs;
  std::vector<std::size_t> owner;
  auto flush = [&] {
    if (seqs.empty()) return;
    const auto c = subedit::detail::forward(m, seqs);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const Eigen::Index row = c.segs[i].begin + c.segs[i].len - 1;
      for (std::size_t li = 0; li < layers.size(); ++li)
        out[li].col(static_cast<Eigen::Index>(owner[i])) +=
            c.layers[static_cast<std::size_t>(layers[li])].key.row(row).transpose();
    }
    seqs.clear();
    owner.clear();
  };
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    if (subjects[s].empty()) throw Error(Errc::invalid_input, "extract_keys: empty subject");
    for (const auto& p : pre) {
      seqs.push_back(concat(p, subjects[s]));
      owner.push_back(s);
      if (seqs.size() >= kChunk) flush();
    }
  }
  flush();
  for (auto& k : out) k /= static_cast<double>(pre.size());
  return out;
}

/// Mean over prefixes of the up-projection activation at the subject's last token.
inline KeyVector extract_key(const ModelState& m, const TokenSeq& subject, const std::vector<TokenSeq>& prefixes,
                             int layer) {
  const auto keys = extract_keys(m, {subject}, prefixes, {layer});
  return KeyVector{layer, keys[0].col(0), subject};
}

/// Column j is the key of subjects[j].
inline Matrix build_subject_matrix(const ModelState& m, const std::vector<TokenSeq>& subjects,
                                   const std::vector<TokenSeq>& prefixes, int layer) {
  return extract_keys(m, subjects, prefixes, {layer})[0];
}

/// Leading left singular vectors of k_subject capturing a tau_energy share of its energy.
inline SubspaceBasis identify_agnostic_subspace(const Matrix& k_subject, double tau_energy, int layer = 0) {
  if (k_subject.cols() == 0) throw Error(Errc::empty_input, "identify_agnostic_subspace: no columns");
  const auto dec = linalg::svd(k_subject);
  SubspaceBasis b;
  b.spectrum = linalg::make_spectrum(dec.s, tau_energy);
  b.tau_energy = tau_energy;
  b.layer = layer;
  b.basis = dec.u.leftCols(static_cast<Eigen::Index>(b.spectrum.selected_rank));
  return b;
}

/// Component of k inside span(U_t).
inline Vector agnostic_component(const Vector& k, const SubspaceBasis& b) {
  if (k.size() != b.dim()) throw Error(Errc::dimension_mismatch, "agnostic_component: key and basis dimensions differ");
  if (b.rank() == 0) return Vector::Zero(k.size());
  return b.basis * (b.basis.transpose() * k);
}

inline Vector constrain(const Vector& k, const SubspaceBasis& b) { return k - agnostic_component(k, b); }

/// k' = k - U_t U_t^T k
inline KeyVector constrain_key(const KeyVector& k, const SubspaceBasis& b) {
  return KeyVector{k.layer, constrain(k.values, b), k.subject};
}

struct ComponentVariance {
  double v_specific = 0.0;
  double v_agnostic = 0.0;
};

/// Per-coordinate population variance across keys, averaged over coordinates,
/// for the subject-specific part k' and the agnostic part U_t U_t^T k.
inline ComponentVariance component_variance(const std::vector<KeyVector>& keys, const SubspaceBasis& b) {
  if (keys.size() < 2) throw Error(Errc::insufficient_data, "component_variance: need at least two keys");
  const Eigen::Index d = b.dim(), n = static_cast<Eigen::Index>(keys.size());
  Matrix spec(d, n), agn(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    agn.col(j) = agnostic_component(keys[static_cast<std::size_t>(j)].values, b);
    spec.col(j) = keys[static_cast<std::size_t>(j)].values - agn.col(j);
  }
  auto mean_var = [n](const Matrix& x) {
    const Vector mu = x.rowwise().mean();
    return (x.colwise() - mu).array().square().rowwise().sum().mean() / static_cast<double>(n);
  };
  return {mean_var(spec), mean_var(agn)};
}

}  // namespace keyspace
}  // namespace subedit
