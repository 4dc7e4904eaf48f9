#pragma once

// A small pre-norm decoder-only transformer. The MLP down-projections are the
// editable associative memories; the residual stream and MLP key activations
// are exposed per layer, and reverse-mode gradients are hand written.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "subedit/error.hpp"
#include "subedit/facts.hpp"
#include "subedit/linalg.hpp"

namespace subedit {

struct ToyModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int d_mlp = 256;
  int n_heads = 4;
  int vocab_size = 0;
  int max_seq_len = 64;
  std::vector<int> edit_layers{0, 1};
  /// Per-layer attention span in tokens (0 = full causal). Narrow early layers keep
  /// subject information at the subject position until a later layer moves it.
  std::vector<int> attention_windows{1, 1, 0, 0};
  std::uint64_t seed = 1;

  bool operator==(const ToyModelConfig&) const = default;

  int last_edit_layer() const { return edit_layers.back(); }
  int attention_window(int layer) const {
    return attention_windows.empty() ? 0 : attention_windows[static_cast<std::size_t>(layer)];
  }
  bool is_edit_layer(int layer) const {
    return std::find(edit_layers.begin(), edit_layers.end(), layer) != edit_layers.end();
  }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 1 || max_seq_len < 1)
      throw Error(Errc::invalid_input, "model config: sizes must be positive");
    if (d_model % n_heads != 0) throw Error(Errc::invalid_input, "model config: d_model must divide by n_heads");
    if (d_mlp < d_model) throw Error(Errc::invalid_input, "model config: d_mlp must be >= d_model");
    if (edit_layers.empty()) throw Error(Errc::invalid_input, "model config: edit_layers is empty");
    if (!attention_windows.empty() && static_cast<int>(attention_windows.size()) != n_layers)
      throw Error(Errc::invalid_input, "model config: attention_windows needs one entry per layer");
    for (int w : attention_windows)
      if (w < 0) throw Error(Errc::invalid_input, "model config: attention window must be nonnegative");
    for (std::size_t i = 0; i < edit_layers.size(); ++i) {
      if (edit_layers[i] < 0 || edit_layers[i] >= n_layers)
        throw Error(Errc::invalid_input, "model config: edit layer out of range");
      if (i > 0 && edit_layers[i] <= edit_layers[i - 1])
        throw Error(Errc::invalid_input, "model config: edit_layers must be strictly increasing");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ToyModelConfig, n_layers, d_model, d_mlp, n_heads, vocab_size,
                                                max_seq_len, edit_layers, attention_windows, seed)

struct LayerWeights {
  Vector ln1_g, ln1_b;
  Matrix wq, wk, wv, wo;  // d_model x d_model, (out x in)
  Vector ln2_g, ln2_b;
  Matrix w_up;  // d_mlp x d_model
  Vector b_up;
  Matrix w_down;  // d_model x d_mlp: the associative memory W
  Vector b_down;
};

struct ModelState {
  ToyModelConfig config;
  Matrix tok_emb;  // vocab x d_model
  Matrix pos_emb;  // max_seq_len x d_model
  std::vector<LayerWeights> layers;
  Vector lnf_g, lnf_b;
  Matrix unembed;  // vocab x d_model
};

/// Calls f(name, tensor) for every parameter tensor in a fixed order.
template <class Model, class F>
void visit_params(Model& m, F&& f) {
  f("tok_emb", m.tok_emb);
  f("pos_emb", m.pos_emb);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& w = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    f(p + "ln1_g", w.ln1_g);
    f(p + "ln1_b", w.ln1_b);
    f(p + "wq", w.wq);
    f(p + "wk", w.wk);
    f(p + "wv", w.wv);
    f(p + "wo", w.wo);
    f(p + "ln2_g", w.ln2_g);
    f(p + "ln2_b", w.ln2_b);
    f(p + "w_up", w.w_up);
    f(p + "b_up", w.b_up);
    f(p + "w_down", w.w_down);
    f(p + "b_down", w.b_down);
  }
  f(std::string("lnf_g"), m.lnf_g);
  f(std::string("lnf_b"), m.lnf_b);
  f(std::string("unembed"), m.unembed);
}

inline ModelState zeros_like(const ModelState& m) {
  ModelState z = m;
  visit_params(z, [](const std::string&, auto& t) { t.setZero(); });
  return z;
}

/// Bit-identical comparison of all parameters, optionally skipping the down-projections of some layers.
inline bool params_identical(const ModelState& a, const ModelState& b, std::span<const int> skip_down_layers = {}) {
  if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
  std::vector<std::pair<const double*, Eigen::Index>> ta, tb;
  visit_params(a, [&](const std::string&, const auto& t) { ta.emplace_back(t.data(), t.size()); });
  visit_params(b, [&](const std::string&, const auto& t) { tb.emplace_back(t.data(), t.size()); });
  std::vector<const double*> skipped;
  for (int l : skip_down_layers) skipped.push_back(a.layers.at(static_cast<std::size_t>(l)).w_down.data());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (std::find(skipped.begin(), skipped.end(), ta[i].first) != skipped.end()) continue;
    if (ta[i].second != tb[i].second) return false;
    if (std::memcmp(ta[i].first, tb[i].first, static_cast<std::size_t>(ta[i].second) * sizeof(double)) != 0) return false;
  }
  return true;
}

inline ModelState init_model(const ToyModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Eigen::Index r, Eigen::Index c, double std) {
    Matrix m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = std * normal(rng);
    return m;
  };
  const int d = cfg.d_model;
  // Output projections of each block are shrunk so the residual stream stays O(1) at init.
  const double depth = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  ModelState m;
  m.config = cfg;
  m.tok_emb = randn(cfg.vocab_size, d, 1.0);
  m.pos_emb = randn(cfg.max_seq_len, d, 0.1);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerWeights w;
    w.ln1_g = Vector::Ones(d);
    w.ln1_b = Vector::Zero(d);
    w.wq = randn(d, d, 1.0 / std::sqrt(d));
    w.wk = randn(d, d, 1.0 / std::sqrt(d));
    w.wv = randn(d, d, 1.0 / std::sqrt(d));
    w.wo = randn(d, d, depth / std::sqrt(d));
    w.ln2_g = Vector::Ones(d);
    w.ln2_b = Vector::Zero(d);
    w.w_up = randn(cfg.d_mlp, d, 1.0 / std::sqrt(d));
    w.b_up = Vector::Zero(cfg.d_mlp);
    w.w_down = randn(d, cfg.d_mlp, depth / std::sqrt(cfg.d_mlp));
    w.b_down = Vector::Zero(d);
    m.layers.push_back(std::move(w));
  }
  m.lnf_g = Vector::Ones(d);
  m.lnf_b = Vector::Zero(d);
  m.unembed = randn(cfg.vocab_size, d, 1.0 / std::sqrt(d));
  return m;
}

// ---------------------------------------------------------------------------
// Packed forward / backward. Several sequences are stacked row-wise; linear
// maps act on all rows at once and attention runs per sequence.

namespace detail {

inline constexpr double kLnEps = 1e-5;

struct Segment {
  Eigen::Index begin = 0;
  Eigen::Index len = 0;
};

struct LayerCache {
  Matrix x_in, xhat1, a, q, k, v, attn, h, xhat2, b, u, gelu_du, key, mlp_out, x_out;
  Vector rstd1, rstd2;
  std::vector<Matrix> probs;  // segment-major, then head
};

struct ForwardCache {
  std::vector<Segment> segs;
  std::vector<Token> tokens;
  std::vector<Eigen::Index> positions;
  int first_layer = 0;
  std::vector<LayerCache> layers;  // indexed by absolute layer; entries below first_layer are empty
  Matrix x_final, xhatf, f;
  Vector rstdf;
  std::vector<Eigen::Index> logit_rows;
  Matrix logits;  // one row per logit_rows entry
};

struct RowPatch {
  int layer = 0;
  Eigen::Index row = 0;
  Vector delta;
};

// GELU in its tanh form, with tanh written through exp so Eigen vectorizes it.
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }
inline double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

/// Writes gelu(u) into y and gelu'(u) into dy in one pass.
inline void gelu_with_grad(const Matrix& u, Matrix& y, Matrix& dy) {
  const auto x = u.array();
  const Eigen::ArrayXXd z = (kGeluC * (x + kGeluA * x.cube())).cwiseMin(30.0).cwiseMax(-30.0);
  const Eigen::ArrayXXd t = 1.0 - 2.0 / ((2.0 * z).exp() + 1.0);
  y = (0.5 * x * (1.0 + t)).matrix();
  dy = (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square())).matrix();
}

inline void layer_norm(const Matrix& x, const Vector& g, const Vector& b, Matrix& xhat, Vector& rstd, Matrix& y) {
  const Eigen::Index n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    rstd(i) = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  y = (xhat.array().rowwise() * g.transpose().array()).rowwise() + b.transpose().array();
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd, const Vector& g,
                                  Vector* dg, Vector* db) {
  if (dg) *dg += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  if (db) *db += dy.colwise().sum().transpose();
  const Matrix dxhat = dy.array().rowwise() * g.transpose().array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
    dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

inline void check_tokens(const ModelState& m, const std::vector<TokenSeq>& seqs) {
  for (const auto& s : seqs) {
    if (s.empty()) throw Error(Errc::invalid_input, "forward: empty token sequence");
    if (static_cast<int>(s.size()) > m.config.max_seq_len)
      throw Error(Errc::index, "forward: sequence longer than max_seq_len");
    for (Token t : s)
      if (t < 0 || t >= m.config.vocab_size) throw Error(Errc::vocabulary, "forward: token " + std::to_string(t) + " outside vocabulary");
  }
}

inline ForwardCache embed(const ModelState& m, const std::vector<TokenSeq>& seqs) {
  check_tokens(m, seqs);
  ForwardCache c;
  Eigen::Index rows = 0;
  for (const auto& s : seqs) {
    c.segs.push_back({rows, static_cast<Eigen::Index>(s.size())});
    for (std::size_t p = 0; p < s.size(); ++p) {
      c.tokens.push_back(s[p]);
      c.positions.push_back(static_cast<Eigen::Index>(p));
    }
    rows += static_cast<Eigen::Index>(s.size());
  }
  c.layers.resize(static_cast<std::size_t>(m.config.n_layers));
  c.x_final.resize(rows, m.config.d_model);
  for (Eigen::Index r = 0; r < rows; ++r)
    c.x_final.row(r) = m.tok_emb.row(c.tokens[static_cast<std::size_t>(r)]) + m.pos_emb.row(c.positions[static_cast<std::size_t>(r)]);
  return c;
}

inline void apply_patches(Matrix& x, int layer, std::span<const RowPatch> patches) {
  for (const auto& p : patches)
    if (p.layer == layer) x.row(p.row) += p.delta.transpose();
}

/// Runs blocks first_layer..n-1 starting from c.x_final (the stream entering first_layer).
inline void run_layers(const ModelState& m, ForwardCache& c, int first_layer, std::span<const RowPatch> patches) {
  const int d = m.config.d_model, nh = m.config.n_heads, dh = d / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.first_layer = first_layer;
  Matrix x = std::move(c.x_final);
  for (int l = first_layer; l < m.config.n_layers; ++l) {
    const LayerWeights& w = m.layers[static_cast<std::size_t>(l)];
    LayerCache& lc = c.layers[static_cast<std::size_t>(l)];
    lc.x_in = std::move(x);
    layer_norm(lc.x_in, w.ln1_g, w.ln1_b, lc.xhat1, lc.rstd1, lc.a);
    lc.q.noalias() = lc.a * w.wq.transpose();
    lc.k.noalias() = lc.a * w.wk.transpose();
    lc.v.noalias() = lc.a * w.wv.transpose();
    lc.attn.setZero(lc.a.rows(), d);
    lc.probs.clear();
    const int window = m.config.attention_window(l);
    for (const Segment& s : c.segs) {
      for (int h = 0; h < nh; ++h) {
        const auto qh = lc.q.block(s.begin, h * dh, s.len, dh);
        const auto kh = lc.k.block(s.begin, h * dh, s.len, dh);
        const auto vh = lc.v.block(s.begin, h * dh, s.len, dh);
        Matrix p = (qh * kh.transpose()) * scale;
        for (Eigen::Index i = 0; i < s.len; ++i) {
          const Eigen::Index lo = window > 0 ? std::max<Eigen::Index>(0, i - window + 1) : 0;
          const double mx = p.row(i).segment(lo, i - lo + 1).maxCoeff();
          double sum = 0.0;
          for (Eigen::Index j = 0; j < s.len; ++j) {
            p(i, j) = (j >= lo && j <= i) ? std::exp(p(i, j) - mx) : 0.0;
            sum += p(i, j);
          }
          p.row(i) /= sum;
        }
        lc.attn.block(s.begin, h * dh, s.len, dh).noalias() = p * vh;
        lc.probs.push_back(std::move(p));
      }
    }
    lc.h = lc.x_in;
    lc.h.noalias() += lc.attn * w.wo.transpose();
    layer_norm(lc.h, w.ln2_g, w.ln2_b, lc.xhat2, lc.rstd2, lc.b);
    lc.u.noalias() = lc.b * w.w_up.transpose();
    lc.u.rowwise() += w.b_up.transpose();
    gelu_with_grad(lc.u, lc.key, lc.gelu_du);
    lc.mlp_out.noalias() = lc.key * w.w_down.transpose();
    lc.mlp_out.rowwise() += w.b_down.transpose();
    lc.x_out = lc.h + lc.mlp_out;
    apply_patches(lc.x_out, l, patches);
    x = lc.x_out;
  }
  c.x_final = std::move(x);
}

inline void run_head(const ModelState& m, ForwardCache& c, std::vector<Eigen::Index> logit_rows) {
  layer_norm(c.x_final, m.lnf_g, m.lnf_b, c.xhatf, c.rstdf, c.f);
  c.logit_rows = std::move(logit_rows);
  c.logits.resize(static_cast<Eigen::Index>(c.logit_rows.size()), m.config.vocab_size);
  Matrix rows(static_cast<Eigen::Index>(c.logit_rows.size()), m.config.d_model);
  for (std::size_t i = 0; i < c.logit_rows.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = c.f.row(c.logit_rows[i]);
  c.logits.noalias() = rows * m.unembed.transpose();
}

inline std::vector<Eigen::Index> final_rows(const ForwardCache& c) {
  std::vector<Eigen::Index> out;
  for (const auto& s : c.segs) out.push_back(s.begin + s.len - 1);
  return out;
}

inline std::vector<Eigen::Index> all_rows(const ForwardCache& c) {
  std::vector<Eigen::Index> out(c.tokens.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Eigen::Index>(i);
  return out;
}

inline ForwardCache forward(const ModelState& m, const std::vector<TokenSeq>& seqs, std::span<const RowPatch> patches = {},
                            bool all_logits = false) {
  ForwardCache c = embed(m, seqs);
  apply_patches(c.x_final, -1, patches);
  run_layers(m, c, 0, patches);
  run_head(m, c, all_logits ? all_rows(c) : final_rows(c));
  return c;
}

/// Backpropagates dlogits (rows matching c.logit_rows). When grads is non-null, parameter
/// gradients are accumulated into it. Returns d(loss)/d(stream entering stop_layer); with
/// stop_layer == n_layers that is the gradient with respect to the final residual stream.
inline Matrix backward(const ModelState& m, const ForwardCache& c, const Matrix& dlogits, ModelState* grads,
                       int stop_layer) {
  const int d = m.config.d_model, nh = m.config.n_heads, dh = d / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (stop_layer < c.first_layer) throw Error(Errc::index, "backward: stop layer below cached range");
  const Eigen::Index n_logit = static_cast<Eigen::Index>(c.logit_rows.size());
  Matrix f_rows(n_logit, d);
  for (Eigen::Index i = 0; i < n_logit; ++i) f_rows.row(i) = c.f.row(c.logit_rows[static_cast<std::size_t>(i)]);
  if (grads) grads->unembed.noalias() += dlogits.transpose() * f_rows;
  const Matrix df_rows = dlogits * m.unembed;
  Matrix df = Matrix::Zero(c.f.rows(), d);
  for (Eigen::Index i = 0; i < n_logit; ++i) df.row(c.logit_rows[static_cast<std::size_t>(i)]) += df_rows.row(i);
  Matrix dx = layer_norm_backward(df, c.xhatf, c.rstdf, m.lnf_g, grads ? &grads->lnf_g : nullptr,
                                  grads ? &grads->lnf_b : nullptr);
  for (int l = m.config.n_layers - 1; l >= stop_layer; --l) {
    const LayerWeights& w = m.layers[static_cast<std::size_t>(l)];
    const LayerCache& lc = c.layers[static_cast<std::size_t>(l)];
    LayerWeights* gw = grads ? &grads->layers[static_cast<std::size_t>(l)] : nullptr;
    // x_out = h + key W_down^T + b_down
    const Matrix& dmlp = dx;
    Matrix dkey = dmlp * w.w_down;
    if (gw) {
      gw->w_down.noalias() += dmlp.transpose() * lc.key;
      gw->b_down += dmlp.colwise().sum().transpose();
    }
    Matrix du = dkey.cwiseProduct(lc.gelu_du);
    Matrix db = du * w.w_up;
    if (gw) {
      gw->w_up.noalias() += du.transpose() * lc.b;
      gw->b_up += du.colwise().sum().transpose();
    }
    Matrix dh_res = dx + layer_norm_backward(db, lc.xhat2, lc.rstd2, w.ln2_g, gw ? &gw->ln2_g : nullptr,
                                             gw ? &gw->ln2_b : nullptr);
    // h = x_in + attn W_o^T
    Matrix dattn = dh_res * w.wo;
    if (gw) gw->wo.noalias() += dh_res.transpose() * lc.attn;
    Matrix dq = Matrix::Zero(lc.q.rows(), d), dk = Matrix::Zero(lc.k.rows(), d), dv = Matrix::Zero(lc.v.rows(), d);
    std::size_t pi = 0;
    for (const Segment& s : c.segs) {
      for (int h = 0; h < nh; ++h, ++pi) {
        const Matrix& p = lc.probs[pi];
        const auto qh = lc.q.block(s.begin, h * dh, s.len, dh);
        const auto kh = lc.k.block(s.begin, h * dh, s.len, dh);
        const auto vh = lc.v.block(s.begin, h * dh, s.len, dh);
        const auto dout = dattn.block(s.begin, h * dh, s.len, dh);
        Matrix dp = dout * vh.transpose();
        dv.block(s.begin, h * dh, s.len, dh).noalias() += p.transpose() * dout;
        Matrix ds(s.len, s.len);
        for (Eigen::Index i = 0; i < s.len; ++i) {
          const double dot = (dp.row(i).array() * p.row(i).array()).sum();
          ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
        }
        ds *= scale;
        dq.block(s.begin, h * dh, s.len, dh).noalias() += ds * kh;
        dk.block(s.begin, h * dh, s.len, dh).noalias() += ds.transpose() * qh;
      }
    }
    Matrix da = dq * w.wq;
    da.noalias() += dk * w.wk;
    da.noalias() += dv * w.wv;
    if (gw) {
      gw->wq.noalias() += dq.transpose() * lc.a;
      gw->wk.noalias() += dk.transpose() * lc.a;
      gw->wv.noalias() += dv.transpose() * lc.a;
    }
    dx = dh_res + layer_norm_backward(da, lc.xhat1, lc.rstd1, w.ln1_g, gw ? &gw->ln1_g : nullptr,
                                      gw ? &gw->ln1_b : nullptr);
  }
  if (grads && stop_layer == 0) {
    for (Eigen::Index r = 0; r < dx.rows(); ++r) {
      grads->tok_emb.row(c.tokens[static_cast<std::size_t>(r)]) += dx.row(r);
      grads->pos_emb.row(c.positions[static_cast<std::size_t>(r)]) += dx.row(r);
    }
  }
  return dx;
}

inline Vector log_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public single-prompt surface

struct StreamTrace {
  std::vector<Matrix> residual;  // per layer: T x d_model, stream after the block
  std::vector<Matrix> key;       // per layer: T x d_mlp, MLP up-projection activation
  std::vector<Matrix> mlp_out;   // per layer: T x d_model
  Vector logits;                 // final position
};

namespace detail {
inline StreamTrace to_trace(const ForwardCache& c) {
  StreamTrace t;
  for (const auto& lc : c.layers) {
    t.residual.push_back(lc.x_out);
    t.key.push_back(lc.key);
    t.mlp_out.push_back(lc.mlp_out);
  }
  t.logits = c.logits.row(c.logits.rows() - 1).transpose();
  return t;
}

inline void check_patch(const ModelState& m, const TokenSeq& prompt, int layer, std::size_t position, const Vector& delta) {
  if (layer < 0 || layer >= m.config.n_layers) throw Error(Errc::index, "patch: layer out of range");
  if (position >= prompt.size()) throw Error(Errc::index, "patch: position out of range");
  if (delta.size() != m.config.d_model) throw Error(Errc::dimension_mismatch, "patch: delta has wrong dimension");
}
}  // namespace detail

inline StreamTrace forward_trace(const ModelState& m, const TokenSeq& prompt) {
  return detail::to_trace(detail::forward(m, {prompt}));
}

inline StreamTrace forward_trace_patched(const ModelState& m, const TokenSeq& prompt, int layer, std::size_t position,
                                         const Vector& delta) {
  detail::check_patch(m, prompt, layer, position, delta);
  const detail::RowPatch patch{layer, static_cast<Eigen::Index>(position), delta};
  return detail::to_trace(detail::forward(m, {prompt}, std::span<const detail::RowPatch>(&patch, 1)));
}

/// Final-position logits with delta added to the residual stream after block `layer` at `position`.
inline Vector forward_with_stream_patch(const ModelState& m, const TokenSeq& prompt, int layer, std::size_t position,
                                        const Vector& delta) {
  return forward_trace_patched(m, prompt, layer, position, delta).logits;
}

/// Final-position logits for a batch of prompts, one row per prompt.
inline Matrix final_logits(const ModelState& m, const std::vector<TokenSeq>& prompts) {
  if (prompts.empty()) return Matrix(0, m.config.vocab_size);
  return detail::forward(m, prompts).logits;
}

/// Logits at every position of one prompt (T x vocab).
inline Matrix all_logits(const ModelState& m, const TokenSeq& prompt) {
  return detail::forward(m, {prompt}, {}, true).logits;
}

/// A scalar loss of the final-position logits. Writes d(loss)/d(logits) into grad when non-null.
using LogitLoss = std::function<double(const Vector& logits, Vector* grad)>;

namespace losses {

inline LogitLoss constant(double value) {
  return [value](const Vector& logits, Vector* grad) {
    if (grad) *grad = Vector::Zero(logits.size());
    return value;
  };
}

inline LogitLoss linear(Vector weights) {
  return [w = std::move(weights)](const Vector& logits, Vector* grad) {
    if (grad) *grad = w;
    return w.dot(logits);
  };
}

/// -log softmax(logits)[target]
inline LogitLoss neg_log_prob(Token target) {
  return [target](const Vector& logits, Vector* grad) {
    const Vector lp = detail::log_softmax(logits);
    if (grad) {
      *grad = lp.array().exp();
      (*grad)(target) -= 1.0;
    }
    return -lp(target);
  };
}

}  // namespace losses

inline Vector grad_wrt_patch(const ModelState& m, const TokenSeq& prompt, int layer, std::size_t position,
                             const Vector& delta, const LogitLoss& loss) {
  detail::check_patch(m, prompt, layer, position, delta);
  const detail::RowPatch patch{layer, static_cast<Eigen::Index>(position), delta};
  const detail::ForwardCache c = detail::forward(m, {prompt}, std::span<const detail::RowPatch>(&patch, 1));
  Vector g;
  loss(c.logits.row(0).transpose(), &g);
  const Matrix dx = detail::backward(m, c, g.transpose(), nullptr, layer + 1);
  return dx.row(static_cast<Eigen::Index>(position)).transpose();
}

/// Caches the clean stream of a fixed prompt set up to block `layer` so that repeated
/// patched evaluations only rerun the downstream blocks.
class PatchSite {
 public:
  struct Pass {
    Matrix logits;  // one row per prompt
    detail::ForwardCache cache;
  };

  PatchSite(const ModelState& m, std::vector<TokenSeq> prompts, std::vector<std::size_t> positions, int layer)
      : model_(&m), prompts_(std::move(prompts)), positions_(std::move(positions)), layer_(layer) {
    if (prompts_.size() != positions_.size()) throw Error(Errc::dimension_mismatch, "PatchSite: prompts/positions");
    if (prompts_.empty()) throw Error(Errc::empty_input, "PatchSite: no prompts");
    for (std::size_t i = 0; i < prompts_.size(); ++i)
      detail::check_patch(m, prompts_[i], layer, positions_[i], Vector::Zero(m.config.d_model));
    clean_ = detail::forward(m, prompts_);
    for (std::size_t i = 0; i < prompts_.size(); ++i) rows_.push_back(clean_.segs[i].begin + static_cast<Eigen::Index>(positions_[i]));
  }

  std::size_t size() const { return prompts_.size(); }
  int layer() const { return layer_; }
  const std::vector<TokenSeq>& prompts() const { return prompts_; }
  const std::vector<std::size_t>& positions() const { return positions_; }
  /// Unpatched residual stream at the patch point of prompt i.
  Vector stream(std::size_t i) const {
    return clean_.layers[static_cast<std::size_t>(layer_)].x_out.row(rows_[i]).transpose();
  }
  Vector clean_logits(std::size_t i) const { return clean_.logits.row(static_cast<Eigen::Index>(i)).transpose(); }

  Pass run(std::span<const Vector> deltas) const {
    if (deltas.size() != prompts_.size()) throw Error(Errc::dimension_mismatch, "PatchSite: one delta per prompt");
    Pass pass;
    detail::ForwardCache& c = pass.cache;
    c.segs = clean_.segs;
    c.tokens = clean_.tokens;
    c.positions = clean_.positions;
    c.layers.resize(clean_.layers.size());
    c.x_final = clean_.layers[static_cast<std::size_t>(layer_)].x_out;
    for (std::size_t i = 0; i < deltas.size(); ++i) c.x_final.row(rows_[i]) += deltas[i].transpose();
    detail::run_layers(*model_, c, layer_ + 1, {});
    detail::run_head(*model_, c, detail::final_rows(c));
    pass.logits = c.logits;
    return pass;
  }

  /// d(loss)/d(delta_i) given d(loss)/d(logits) for every prompt.
  std::vector<Vector> grad(const Pass& pass, const Matrix& dlogits) const {
    const Matrix dx = detail::backward(*model_, pass.cache, dlogits, nullptr, layer_ + 1);
    std::vector<Vector> out;
    for (Eigen::Index r : rows_) out.push_back(dx.row(r).transpose());
    return out;
  }

 private:
  const ModelState* model_;
  std::vector<TokenSeq> prompts_;
  std::vector<std::size_t> positions_;
  int layer_;
  detail::ForwardCache clean_;
  std::vector<Eigen::Index> rows_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  int steps = 1000;
  double lr = 3e-3;
  int batch_size = 64;
  double target_recall = 0.95;
  int eval_every = 250;
  int max_attempts = 2;
  double clip_norm = 1.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainOptions, steps, lr, batch_size, target_recall, eval_every,
                                                max_attempts, clip_norm)

struct TrainResult {
  ModelState model;
  double recall = 0.0;     // rewrite prompts of every asserted triplet
  double full_recall = 0.0;  // rewrite + paraphrase + neighborhood prompts
  double final_loss = 0.0;
  int steps_run = 0;
  int attempts = 0;
};

namespace detail {

struct Example {
  TokenSeq tokens;
  Token target;
};

inline std::vector<Example> exact_examples(const FactCorpus& c) {
  std::vector<Example> out;
  for (const auto& t : facts::all_triplets(c)) out.push_back({concat(t.subject, t.relation), t.object});
  for (const auto& f : c.facts)
    for (const auto& p : f.prompts.paraphrases) out.push_back({p.tokens(), f.triplet.object});
  return out;
}

inline double recall_of(const ModelState& m, const std::vector<Example>& ex) {
  if (ex.empty()) return 1.0;
  std::size_t hits = 0;
  for (std::size_t b = 0; b < ex.size(); b += 256) {
    std::vector<TokenSeq> seqs;
    for (std::size_t i = b; i < std::min(ex.size(), b + 256); ++i) seqs.push_back(ex[i].tokens);
    const Matrix logits = final_logits(m, seqs);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index arg;
      logits.row(i).maxCoeff(&arg);
      if (arg == ex[b + static_cast<std::size_t>(i)].target) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(ex.size());
}

struct Adam {
  ModelState m1, m2;
  int t = 0;
  explicit Adam(const ModelState& like) : m1(zeros_like(like)), m2(zeros_like(like)) {}

  void step(ModelState& params, const ModelState& grads, double lr) {
    ++t;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    std::vector<double*> p, mm, vv;
    std::vector<const double*> g;
    std::vector<Eigen::Index> n;
    visit_params(params, [&](const std::string&, auto& x) { p.push_back(x.data()); n.push_back(x.size()); });
    visit_params(m1, [&](const std::string&, auto& x) { mm.push_back(x.data()); });
    visit_params(m2, [&](const std::string&, auto& x) { vv.push_back(x.data()); });
    visit_params(grads, [&](const std::string&, const auto& x) { g.push_back(x.data()); });
    for (std::size_t k = 0; k < p.size(); ++k) {
      for (Eigen::Index i = 0; i < n[k]; ++i) {
        mm[k][i] = b1 * mm[k][i] + (1 - b1) * g[k][i];
        vv[k][i] = b2 * vv[k][i] + (1 - b2) * g[k][i] * g[k][i];
        p[k][i] -= lr * (mm[k][i] / c1) / (std::sqrt(vv[k][i] / c2) + eps);
      }
    }
  }
};

inline double grad_norm(const ModelState& g) {
  double s = 0.0;
  visit_params(g, [&](const std::string&, const auto& x) { s += x.squaredNorm(); });
  return std::sqrt(s);
}

inline void scale_grads(ModelState& g, double f) {
  visit_params(g, [&](const std::string&, auto& x) { x *= f; });
}

}  // namespace detail

/// Trains the model until it recalls the corpus facts. Each epoch pairs every
/// asserted triplet's canonical prompt with one augmented variant (random filler
/// prefix, random relation phrasing), plus the exact paraphrase prompts.
inline TrainResult train(ToyModelConfig cfg, const FactCorpus& corpus, const TrainOptions& opt) {
  if (cfg.vocab_size == 0) cfg.vocab_size = static_cast<int>(corpus.vocabulary.size());
  if (cfg.vocab_size != static_cast<int>(corpus.vocabulary.size()))
    throw Error(Errc::config_mismatch, "train: vocab_size does not match the corpus vocabulary");
  cfg.validate();

  const auto triplets = facts::all_triplets(corpus);
  std::vector<detail::Example> rewrite;
  for (const auto& t : triplets) rewrite.push_back({concat(t.subject, t.relation), t.object});
  const auto exact = detail::exact_examples(corpus);
  std::vector<int> relation_of(triplets.size(), -1);
  for (std::size_t i = 0; i < triplets.size(); ++i)
    for (std::size_t r = 0; r < corpus.relation_templates.size(); ++r)
      if (!corpus.relation_templates[r].empty() && corpus.relation_templates[r][0] == triplets[i].relation)
        relation_of[i] = static_cast<int>(r);

  TrainResult best;
  best.recall = -1.0;
  int total_steps = 0;
  for (int attempt = 0; attempt < std::max(1, opt.max_attempts); ++attempt) {
    ToyModelConfig attempt_cfg = cfg;
    attempt_cfg.seed = cfg.seed + static_cast<std::uint64_t>(attempt) * 7919u;
    ModelState m = init_model(attempt_cfg);
    m.config.seed = cfg.seed;
    detail::Adam adam(m);
    std::mt19937_64 rng(attempt_cfg.seed ^ 0x9E3779B97F4A7C15ull);
    auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

    std::vector<detail::Example> epoch;
    std::size_t cursor = 0;
    double last_loss = 0.0;
    int step = 0;
    double recall = 0.0, full = 0.0;
    for (; step < opt.steps; ++step) {
      if (cursor >= epoch.size()) {
        epoch = exact;
        for (std::size_t i = 0; i < triplets.size(); ++i) {
          TokenSeq prefix;
          const std::size_t len = pick(3);
          for (std::size_t k = 0; k < len && !corpus.filler.empty(); ++k) prefix.push_back(corpus.filler[pick(corpus.filler.size())]);
          TokenSeq rel = triplets[i].relation;
          if (relation_of[i] >= 0) {
            const auto& phr = corpus.relation_templates[static_cast<std::size_t>(relation_of[i])];
            rel = phr[pick(phr.size())];
          }
          epoch.push_back({concat(concat(prefix, triplets[i].subject), rel), triplets[i].object});
        }
        for (std::size_t i = epoch.size(); i > 1; --i) std::swap(epoch[i - 1], epoch[pick(i)]);
        cursor = 0;
      }
      std::vector<TokenSeq> seqs;
      std::vector<Token> targets;
      for (int b = 0; b < opt.batch_size && cursor < epoch.size(); ++b, ++cursor) {
        seqs.push_back(epoch[cursor].tokens);
        targets.push_back(epoch[cursor].target);
      }
      detail::ForwardCache c = detail::forward(m, seqs);
      Matrix dlogits(c.logits.rows(), c.logits.cols());
      double loss = 0.0;
      for (Eigen::Index i = 0; i < c.logits.rows(); ++i) {
        Vector g;
        loss += losses::neg_log_prob(targets[static_cast<std::size_t>(i)])(c.logits.row(i).transpose(), &g);
        dlogits.row(i) = g.transpose() / static_cast<double>(c.logits.rows());
      }
      last_loss = loss / static_cast<double>(c.logits.rows());
      ModelState grads = zeros_like(m);
      detail::backward(m, c, dlogits, &grads, 0);
      const double gn = detail::grad_norm(grads);
      if (!std::isfinite(gn)) throw Error(Errc::optimization, "train: non-finite gradient");
      if (gn > opt.clip_norm) detail::scale_grads(grads, opt.clip_norm / gn);
      adam.step(m, grads, opt.lr);

      if ((step + 1) % opt.eval_every == 0) {
        full = detail::recall_of(m, exact);
        if (full >= 1.0) {
          ++step;
          break;
        }
      }
    }
    total_steps += step;
    recall = detail::recall_of(m, rewrite);
    full = detail::recall_of(m, exact);
    if (recall > best.recall) {
      best.model = std::move(m);
      best.recall = recall;
      best.full_recall = full;
      best.final_loss = last_loss;
    }
    best.steps_run = total_steps;
    best.attempts = attempt + 1;
    if (best.recall >= opt.target_recall) return best;
  }
  throw TrainingFailed(best.recall, "train: recall " + std::to_string(best.recall) + " below target " +
                                        std::to_string(opt.target_recall));
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, u64 header length, JSON header, then raw little-endian doubles.

namespace checkpoint {

inline constexpr int kSchemaVersion = 1;
inline constexpr char kMagic[8] = {'S', 'U', 'B', 'E', 'D', 'I', 'T', 'M'};

inline void write(const ModelState& m, std::ostream& out, const nlohmann::json& extra = nullptr) {
  nlohmann::json header = {{"schema_version", kSchemaVersion}, {"config", m.config}};
  if (!extra.is_null()) header["meta"] = extra;
  header["tensors"] = nlohmann::json::array();
  visit_params(m, [&](const std::string& name, const auto& t) {
    header["tensors"].push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  const std::string h = header.dump();
  const std::uint64_t len = h.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  visit_params(m, [&](const std::string&, const auto& t) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
}

inline ModelState read(std::istream& in, nlohmann::json* meta = nullptr) {
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw Error(Errc::parse, "checkpoint: bad magic");
  if (!in.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 26)) throw Error(Errc::parse, "checkpoint: bad header length");
  std::string h(len, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(len))) throw Error(Errc::parse, "checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse, std::string("checkpoint: header: ") + e.what());
  }
  if (header.value("schema_version", -1) != kSchemaVersion) throw Error(Errc::parse, "checkpoint: unsupported schema_version");
  ModelState m = init_model(header.at("config").get<ToyModelConfig>());
  if (meta) *meta = header.value("meta", nlohmann::json());
  std::size_t i = 0;
  const auto& tensors = header.at("tensors");
  visit_params(m, [&](const std::string& name, auto& t) {
    if (i >= tensors.size() || tensors[i].at("name") != name || tensors[i].at("rows") != t.rows() ||
        tensors[i].at("cols") != t.cols())
      throw Error(Errc::parse, "checkpoint: tensor layout mismatch at " + name);
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw Error(Errc::parse, "checkpoint: truncated tensor " + name);
    ++i;
  });
  return m;
}

inline void save(const ModelState& m, const std::string& path, const nlohmann::json& extra = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write " + path);
  write(m, out, extra);
  if (!out) throw Error(Errc::io, "write failed for " + path);
}

inline ModelState load(const std::string& path, nlohmann::json* meta = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot read " + path);
  return read(in, meta);
}

}  // namespace checkpoint
}  // namespace subedit
