#pragma once

// Scalar straight-line forward pass of the toy transformer for one prompt, with
// an optional additive patch to the stream after one block. No caching, no
// batching, no matrix products; every sum is an explicit loop.

#include <cmath>
#include <optional>
#include <vector>

#include "subedit/toymodel.hpp"

namespace oracle {

struct StreamPatch {
  int layer = 0;
  std::size_t position = 0;
  Eigen::VectorXd delta;
};

namespace detail {

using Row = std::vector<double>;

inline Row layer_norm(const Row& x, const Eigen::VectorXd& g, const Eigen::VectorXd& b) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  Row y(d);
  for (std::size_t i = 0; i < d; ++i)
    y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g(static_cast<Eigen::Index>(i)) + b(static_cast<Eigen::Index>(i));
  return y;
}

/// y = W x (+ bias), W stored out x in.
inline Row affine(const Eigen::MatrixXd& w, const Row& x, const Eigen::VectorXd* bias = nullptr) {
  Row y(static_cast<std::size_t>(w.rows()), 0.0);
  for (Eigen::Index o = 0; o < w.rows(); ++o) {
    double s = bias ? (*bias)(o) : 0.0;
    for (Eigen::Index i = 0; i < w.cols(); ++i) s += w(o, i) * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = s;
  }
  return y;
}

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace detail

/// Logits at every position, T x vocab.
inline Eigen::MatrixXd reference_logits(const subedit::ModelState& m, const subedit::TokenSeq& tokens,
                                        const std::optional<StreamPatch>& patch = std::nullopt) {
  using detail::Row;
  const auto& cfg = m.config;
  const std::size_t n = tokens.size();
  const int d = cfg.d_model, nh = cfg.n_heads, dh = d / nh;
  std::vector<Row> x(n, Row(static_cast<std::size_t>(d)));
  for (std::size_t t = 0; t < n; ++t)
    for (int i = 0; i < d; ++i) x[t][static_cast<std::size_t>(i)] = m.tok_emb(tokens[t], i) + m.pos_emb(static_cast<Eigen::Index>(t), i);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& w = m.layers[static_cast<std::size_t>(l)];
    std::vector<Row> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const Row a = detail::layer_norm(x[t], w.ln1_g, w.ln1_b);
      q[t] = detail::affine(w.wq, a);
      k[t] = detail::affine(w.wk, a);
      v[t] = detail::affine(w.wv, a);
    }
    const int window = cfg.attention_windows.empty() ? 0 : cfg.attention_windows[static_cast<std::size_t>(l)];
    std::vector<Row> next(n);
    for (std::size_t t = 0; t < n; ++t) {
      Row attn(static_cast<std::size_t>(d), 0.0);
      const std::size_t lo = (window > 0 && t + 1 > static_cast<std::size_t>(window)) ? t + 1 - static_cast<std::size_t>(window) : 0;
      for (int h = 0; h < nh; ++h) {
        std::vector<double> score;
        for (std::size_t s = lo; s <= t; ++s) {
          double dot = 0.0;
          for (int j = 0; j < dh; ++j) dot += q[t][static_cast<std::size_t>(h * dh + j)] * k[s][static_cast<std::size_t>(h * dh + j)];
          score.push_back(dot / std::sqrt(static_cast<double>(dh)));
        }
        double mx = score[0];
        for (double sc : score) mx = std::max(mx, sc);
        double z = 0.0;
        for (double& sc : score) z += (sc = std::exp(sc - mx));
        for (std::size_t s = lo; s <= t; ++s)
          for (int j = 0; j < dh; ++j)
            attn[static_cast<std::size_t>(h * dh + j)] += score[s - lo] / z * v[s][static_cast<std::size_t>(h * dh + j)];
      }
      Row hres = detail::affine(w.wo, attn);
      for (int i = 0; i < d; ++i) hres[static_cast<std::size_t>(i)] += x[t][static_cast<std::size_t>(i)];
      const Row b = detail::layer_norm(hres, w.ln2_g, w.ln2_b);
      Row key = detail::affine(w.w_up, b, &w.b_up);
      for (double& u : key) u = detail::gelu(u);
      const Row out = detail::affine(w.w_down, key, &w.b_down);
      next[t] = hres;
      for (int i = 0; i < d; ++i) next[t][static_cast<std::size_t>(i)] += out[static_cast<std::size_t>(i)];
      if (patch && patch->layer == l && patch->position == t)
        for (int i = 0; i < d; ++i) next[t][static_cast<std::size_t>(i)] += patch->delta(i);
    }
    x = std::move(next);
  }

  Eigen::MatrixXd logits(static_cast<Eigen::Index>(n), cfg.vocab_size);
  for (std::size_t t = 0; t < n; ++t) {
    const Row f = detail::layer_norm(x[t], m.lnf_g, m.lnf_b);
    const Row z = detail::affine(m.unembed, f);
    for (int o = 0; o < cfg.vocab_size; ++o) logits(static_cast<Eigen::Index>(t), o) = z[static_cast<std::size_t>(o)];
  }
  return logits;
}

}  // namespace oracle
