// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#include "dca/toy_model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include "dca/linalg.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

namespace dca {

namespace {

constexpr float kNormEps = 1e-5f;

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

void fill_uniform(std::vector<float>& w, double bound, std::mt19937_64& rng) {
  for (float& x : w) x = static_cast<float>((2.0 * uniform01(rng) - 1.0) * bound);
}

template <typename S>
RowMatrix<S> rmsnorm(const RowMatrix<S>& x, const std::vector<float>& gain,
                     std::vector<S>* inv_out = nullptr) {
  RowMatrix<S> y(x.rows, x.cols);
  if (inv_out) inv_out->resize(x.rows);
  for (int64_t i = 0; i < x.rows; ++i) {
    const S* xi = x.row(i);
    double ss = 0.0;
    for (int64_t j = 0; j < x.cols; ++j) ss += static_cast<double>(xi[j]) * xi[j];
    const S inv = static_cast<S>(1.0 / std::sqrt(ss / x.cols + kNormEps));
    if (inv_out) (*inv_out)[i] = inv;
    S* yi = y.row(i);
    for (int64_t j = 0; j < x.cols; ++j) yi[j] = static_cast<S>(gain[j]) * xi[j] * inv;
  }
  return y;
}

template <typename S>
S silu(S x) {
  return x / (S(1) + std::exp(-x));
}

template <typename S>
RowMatrix<S> cast_mat(const MatF& src) {
  RowMatrix<S> out(src.rows, src.cols);
  for (size_t t = 0; t < src.data.size(); ++t) out.data[t] = static_cast<S>(src.data[t]);
  return out;
}

template <>
RowMatrix<float> cast_mat<float>(const MatF& src) {
  return src;
}

/// Full block forward in scalar S. When k_caps/v_caps are given (float path
/// only), the raw pre-rotation per-layer K and V are copied out for the
/// decode cache.
template <typename S>
RowMatrix<S> forward_impl(const ModelCheckpoint& ckpt, std::span<const uint8_t> tokens,
                          AttentionMode mode, const ChunkConfig* cfg, AttentionEngine engine,
                          std::vector<RowMatrix<S>>* k_caps = nullptr,
                          std::vector<RowMatrix<S>>* v_caps = nullptr) {
  require_valid(ckpt.config);
  if (tokens.empty()) throw std::invalid_argument("tokens must be nonempty");
  if (mode_needs_config(mode)) detail::checked_config(mode, cfg);

  const ModelConfig& mc = ckpt.config;
  const int64_t l = static_cast<int64_t>(tokens.size());
  const int64_t d = mc.model_dim;
  RotaryTable table(mc.head_dim(), std::max<int64_t>(l, mc.train_context));

  RowMatrix<S> x(l, d);
  for (int64_t i = 0; i < l; ++i) {
    const float* e = ckpt.embedding.row(tokens[i]);
    S* xi = x.row(i);
    for (int64_t j = 0; j < d; ++j) xi[j] = static_cast<S>(e[j]);
  }

  RowMatrix<S> q, k, v, cat, proj, u;
  for (const LayerParams& lp : ckpt.layers) {
    const RowMatrix<S> a = rmsnorm<S>(x, lp.attn_norm);
    matmul(q, a, cast_mat<S>(lp.wq));
    matmul(k, a, cast_mat<S>(lp.wk));
    matmul(v, a, cast_mat<S>(lp.wv));
    if (k_caps) k_caps->push_back(k);
    if (v_caps) v_caps->push_back(v);
    cat = per_head_attention(q, k, v, mc.heads, mode, cfg, table, engine);
    matmul(proj, cat, cast_mat<S>(lp.wo));
    for (size_t t = 0; t < x.data.size(); ++t) x.data[t] += proj.data[t];

    const RowMatrix<S> f = rmsnorm<S>(x, lp.ffn_norm);
    matmul(u, f, cast_mat<S>(lp.w1));
    for (S& e : u.data) e = silu(e);
    matmul(proj, u, cast_mat<S>(lp.w2));
    for (size_t t = 0; t < x.data.size(); ++t) x.data[t] += proj.data[t];
  }

  const RowMatrix<S> fn = rmsnorm<S>(x, ckpt.final_norm);
  RowMatrix<S> logits;
  matmul(logits, fn, cast_mat<S>(ckpt.output));
  return logits;
}

/// log(sum(exp(row))) with the usual max shift, in double.
template <typename S>
double row_logsumexp(const S* row, int64_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
  double sum = 0.0;
  for (int64_t j = 0; j < n; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
  return mx + std::log(sum);
}

}  // namespace

std::optional<std::string> validate_config(const ModelConfig& cfg) {
  if (cfg.vocab != 256) return "vocab must be 256";
  if (cfg.model_dim < 1) return "model_dim must be > 0";
  if (cfg.heads < 1) return "heads must be > 0";
  if (cfg.model_dim % cfg.heads != 0) return "model_dim must be divisible by heads";
  if ((cfg.model_dim / cfg.heads) % 2 != 0) return "head_dim must be even";
  if (cfg.layers < 1) return "layers must be > 0";
  if (cfg.train_context < 2) return "train_context must be >= 2";
  return std::nullopt;
}

void require_valid(const ModelConfig& cfg) {
  if (auto err = validate_config(cfg)) throw std::invalid_argument(*err);
}

int64_t parameter_count(const ModelConfig& cfg) {
  const int64_t d = cfg.model_dim;
  const int64_t per_layer = 2 * d + 4 * d * d + 2 * d * cfg.ffn_dim();
  return 2 * cfg.vocab * d + d + cfg.layers * per_layer;
}

ModelCheckpoint init_model(const ModelConfig& cfg) {
  require_valid(cfg);
  const int64_t d = cfg.model_dim;
  std::mt19937_64 rng(cfg.seed);
  const double a_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double a_ffn = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim()));

  ModelCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.embedding = MatF(cfg.vocab, d);
  fill_uniform(ckpt.embedding.data, a_d, rng);
  ckpt.layers.resize(cfg.layers);
  for (LayerParams& lp : ckpt.layers) {
    lp.attn_norm.assign(d, 1.0f);
    for (MatF* w : {&lp.wq, &lp.wk, &lp.wv, &lp.wo}) {
      *w = MatF(d, d);
      fill_uniform(w->data, a_d, rng);
    }
    lp.ffn_norm.assign(d, 1.0f);
    lp.w1 = MatF(d, cfg.ffn_dim());
    fill_uniform(lp.w1.data, a_d, rng);
    lp.w2 = MatF(cfg.ffn_dim(), d);
    fill_uniform(lp.w2.data, a_ffn, rng);
  }
  ckpt.final_norm.assign(d, 1.0f);
  ckpt.output = MatF(d, cfg.vocab);
  fill_uniform(ckpt.output.data, a_d, rng);
  return ckpt;
}

RowMatrix<float> forward(const ModelCheckpoint& ckpt, std::span<const uint8_t> tokens,
                         AttentionMode mode, const ChunkConfig* cfg, AttentionEngine engine) {
  return forward_impl<float>(ckpt, tokens, mode, cfg, engine);
}

RowMatrix<double> forward_f64(const ModelCheckpoint& ckpt, std::span<const uint8_t> tokens,
                              AttentionMode mode, const ChunkConfig* cfg, AttentionEngine engine) {
  return forward_impl<double>(ckpt, tokens, mode, cfg, engine);
}

double sequence_nll(const ModelCheckpoint& ckpt, std::span<const uint8_t> tokens,
                    AttentionMode mode, const ChunkConfig* cfg) {
  if (tokens.size() < 2) throw std::invalid_argument("need at least 2 tokens to score");
  const RowMatrix<float> logits = forward(ckpt, tokens, mode, cfg);
  double nll = 0.0;
  for (int64_t i = 0; i + 1 < logits.rows; ++i) {
    const float* row = logits.row(i);
    nll += row_logsumexp(row, logits.cols) - static_cast<double>(row[tokens[i + 1]]);
  }
  return nll / static_cast<double>(logits.rows - 1);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct LayerGrads {
  std::vector<float> attn_norm;
  MatF wq, wk, wv, wo;
  std::vector<float> ffn_norm;
  MatF w1, w2;
};

struct Grads {
  MatF embedding;
  std::vector<LayerGrads> layers;
  std::vector<float> final_norm;
  MatF output;
};

Grads zero_grads(const ModelConfig& cfg) {
  const int64_t d = cfg.model_dim;
  Grads g;
  g.embedding = MatF(cfg.vocab, d);
  g.layers.resize(cfg.layers);
  for (LayerGrads& lg : g.layers) {
    lg.attn_norm.assign(d, 0.0f);
    lg.wq = MatF(d, d);
    lg.wk = MatF(d, d);
    lg.wv = MatF(d, d);
    lg.wo = MatF(d, d);
    lg.ffn_norm.assign(d, 0.0f);
    lg.w1 = MatF(d, cfg.ffn_dim());
    lg.w2 = MatF(cfg.ffn_dim(), d);
  }
  g.final_norm.assign(d, 0.0f);
  g.output = MatF(d, cfg.vocab);
  return g;
}

void zero_fill(Grads& g) {
  g.embedding.fill(0.0f);
  for (LayerGrads& lg : g.layers) {
    std::fill(lg.attn_norm.begin(), lg.attn_norm.end(), 0.0f);
    lg.wq.fill(0.0f);
    lg.wk.fill(0.0f);
    lg.wv.fill(0.0f);
    lg.wo.fill(0.0f);
    std::fill(lg.ffn_norm.begin(), lg.ffn_norm.end(), 0.0f);
    lg.w1.fill(0.0f);
    lg.w2.fill(0.0f);
  }
  std::fill(g.final_norm.begin(), g.final_norm.end(), 0.0f);
  g.output.fill(0.0f);
}

/// Parameters and gradients enumerated in one canonical order so clip and the
/// optimizer walk matched spans.
std::vector<std::span<float>> tensor_spans(ModelCheckpoint& c) {
  std::vector<std::span<float>> out;
  out.emplace_back(c.embedding.data);
  for (LayerParams& lp : c.layers) {
    out.emplace_back(lp.attn_norm);
    out.emplace_back(lp.wq.data);
    out.emplace_back(lp.wk.data);
    out.emplace_back(lp.wv.data);
    out.emplace_back(lp.wo.data);
    out.emplace_back(lp.ffn_norm);
    out.emplace_back(lp.w1.data);
    out.emplace_back(lp.w2.data);
  }
  out.emplace_back(c.final_norm);
  out.emplace_back(c.output.data);
  return out;
}

std::vector<std::span<float>> tensor_spans(Grads& g) {
  std::vector<std::span<float>> out;
  out.emplace_back(g.embedding.data);
  for (LayerGrads& lg : g.layers) {
    out.emplace_back(lg.attn_norm);
    out.emplace_back(lg.wq.data);
    out.emplace_back(lg.wk.data);
    out.emplace_back(lg.wv.data);
    out.emplace_back(lg.wo.data);
    out.emplace_back(lg.ffn_norm);
    out.emplace_back(lg.w1.data);
    out.emplace_back(lg.w2.data);
  }
  out.emplace_back(g.final_norm);
  out.emplace_back(g.output.data);
  return out;
}

struct LayerCache {
  MatF x_in;
  std::vector<float> inv_attn;
  MatF a, q_rot, k_rot, v;
  std::vector<MatF> probs;  // per head, rows above the diagonal are zero
  MatF cat;
  MatF x_mid;
  std::vector<float> inv_ffn;
  MatF f, u, su;
};

struct SeqCache {
  std::vector<LayerCache> layers;
  MatF x_final;
  std::vector<float> inv_final;
  MatF fn;
  MatF logits;
};

void rotate_heads(MatF& m, const RotaryTable& table, int64_t heads) {
  const int64_t hd = m.cols / heads;
  for (int64_t i = 0; i < m.rows; ++i)
    for (int64_t h = 0; h < heads; ++h)
      apply_rotary_inplace<float>(table, static_cast<double>(i),
                                  std::span<float>(m.row(i) + h * hd, hd));
}

/// Adjoint of rotate_heads: rotation is orthogonal, so the gradient is rotated
/// by the transpose (cos, -sin).
void rotate_heads_adjoint(MatF& m, const RotaryTable& table, int64_t heads) {
  const int64_t hd = m.cols / heads;
  for (int64_t i = 0; i < m.rows; ++i) {
    const bool hit = table.cached(static_cast<double>(i));
    const double* cr = hit ? table.cos_row(i) : nullptr;
    const double* sr = hit ? table.sin_row(i) : nullptr;
    for (int64_t h = 0; h < heads; ++h) {
      float* row = m.row(i) + h * hd;
      for (int64_t p = 0; p < hd / 2; ++p) {
        const double angle = hit ? 0.0 : static_cast<double>(i) * table.freq(p);
        const double c = hit ? cr[p] : std::cos(angle);
        const double s = hit ? sr[p] : std::sin(angle);
        const double a = row[2 * p], b = row[2 * p + 1];
        row[2 * p] = static_cast<float>(a * c + b * s);
        row[2 * p + 1] = static_cast<float>(-a * s + b * c);
      }
    }
  }
}

/// Vanilla-attention forward over one training window, keeping every
/// activation backward needs.
SeqCache train_forward(const ModelCheckpoint& ckpt, std::span<const uint8_t> seq,
                       const RotaryTable& table) {
  const ModelConfig& mc = ckpt.config;
  const int64_t l = static_cast<int64_t>(seq.size());
  const int64_t d = mc.model_dim, heads = mc.heads, hd = mc.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  SeqCache sc;
  sc.layers.reserve(ckpt.layers.size());

  MatF x(l, d);
  for (int64_t i = 0; i < l; ++i) {
    const float* e = ckpt.embedding.row(seq[i]);
    std::copy(e, e + d, x.row(i));
  }

  for (const LayerParams& lp : ckpt.layers) {
    LayerCache lc;
    lc.x_in = x;
    lc.a = rmsnorm<float>(x, lp.attn_norm, &lc.inv_attn);
    matmul(lc.q_rot, lc.a, lp.wq);
    matmul(lc.k_rot, lc.a, lp.wk);
    matmul(lc.v, lc.a, lp.wv);
    rotate_heads(lc.q_rot, table, heads);
    rotate_heads(lc.k_rot, table, heads);

    lc.cat = MatF(l, d);
    lc.probs.assign(heads, MatF(l, l));
    for (int64_t h = 0; h < heads; ++h) {
      MatF& p = lc.probs[h];
      for (int64_t i = 0; i < l; ++i) {
        const float* qi = lc.q_rot.row(i) + h * hd;
        float* pi = p.row(i);
        float mx = -std::numeric_limits<float>::infinity();
        for (int64_t j = 0; j <= i; ++j) {
          const float* kj = lc.k_rot.row(j) + h * hd;
          pi[j] = dot_span(qi, kj, hd) * scale;
          if (pi[j] > mx) mx = pi[j];
        }
        float mass = 0.0f;
        for (int64_t j = 0; j <= i; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          mass += pi[j];
        }
        const float inv = 1.0f / mass;
        for (int64_t j = 0; j <= i; ++j) pi[j] *= inv;
        float* oi = lc.cat.row(i) + h * hd;
        std::fill(oi, oi + hd, 0.0f);
        for (int64_t j = 0; j <= i; ++j) {
          const float* vj = lc.v.row(j) + h * hd;
          const float w = pi[j];
          for (int64_t t = 0; t < hd; ++t) oi[t] += w * vj[t];
        }
      }
    }

    MatF proj;
    matmul(proj, lc.cat, lp.wo);
    lc.x_mid = lc.x_in;
    for (size_t t = 0; t < proj.data.size(); ++t) lc.x_mid.data[t] += proj.data[t];

    lc.f = rmsnorm<float>(lc.x_mid, lp.ffn_norm, &lc.inv_ffn);
    matmul(lc.u, lc.f, lp.w1);
    lc.su = lc.u;
    for (float& e : lc.su.data) e = silu(e);
    matmul(proj, lc.su, lp.w2);
    x = lc.x_mid;
    for (size_t t = 0; t < proj.data.size(); ++t) x.data[t] += proj.data[t];
    sc.layers.push_back(std::move(lc));
  }

  sc.x_final = x;
  sc.fn = rmsnorm<float>(x, ckpt.final_norm, &sc.inv_final);
  matmul(sc.logits, sc.fn, ckpt.output);
  return sc;
}

/// dx for y = gain * x * inv_rms(x), given dy; accumulates the gain gradient.
void rmsnorm_backward(const MatF& x, const std::vector<float>& gain,
                      const std::vector<float>& inv, const MatF& dy, MatF& dx_add,
                      std::vector<float>& dgain) {
  const int64_t d = x.cols;
  for (int64_t i = 0; i < x.rows; ++i) {
    const float* xi = x.row(i);
    const float* dyi = dy.row(i);
    float* dxi = dx_add.row(i);
    const float r = inv[i];
    double inner = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      dgain[j] += dyi[j] * xi[j] * r;
      inner += static_cast<double>(dyi[j]) * gain[j] * xi[j];
    }
    const float coef = static_cast<float>(inner) * r * r * r / static_cast<float>(d);
    for (int64_t j = 0; j < d; ++j) dxi[j] += dyi[j] * gain[j] * r - xi[j] * coef;
  }
}

/// Cross-entropy on the cached forward, then full backward. seq holds l+1
/// bytes: inputs seq[0..l), targets seq[1..l]. Gradients are scaled by
/// inv_tokens (1 / tokens in the whole batch) and accumulated into g.
/// Returns the summed token NLL for this window.
double train_backward(const ModelCheckpoint& ckpt, const SeqCache& sc,
                      std::span<const uint8_t> seq, double inv_tokens, const RotaryTable& table,
                      Grads& g) {
  const ModelConfig& mc = ckpt.config;
  const int64_t l = static_cast<int64_t>(seq.size()) - 1;
  const int64_t d = mc.model_dim, heads = mc.heads, hd = mc.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  double nll = 0.0;
  MatF dlogits(l, mc.vocab);
  for (int64_t i = 0; i < l; ++i) {
    const float* row = sc.logits.row(i);
    const int64_t target = seq[i + 1];
    const double lse = row_logsumexp(row, mc.vocab);
    nll += lse - static_cast<double>(row[target]);
    float* drow = dlogits.row(i);
    for (int64_t jv = 0; jv < mc.vocab; ++jv)
      drow[jv] = static_cast<float>(std::exp(static_cast<double>(row[jv]) - lse) * inv_tokens);
    drow[target] -= static_cast<float>(inv_tokens);
  }

  matmul_tn_add(g.output, sc.fn, dlogits);
  MatF dfn(l, d);
  matmul_nt_add(dfn, dlogits, ckpt.output);

  MatF dx(l, d);
  rmsnorm_backward(sc.x_final, ckpt.final_norm, sc.inv_final, dfn, dx, g.final_norm);

  MatF dsu, du, df, dcat, dS, dq, dk, dv, da, tmp;
  MatF ph_d(l, hd), qh(l, hd), kh(l, hd), vh(l, hd);
  for (int64_t li = static_cast<int64_t>(ckpt.layers.size()) - 1; li >= 0; --li) {
    const LayerParams& lp = ckpt.layers[li];
    const LayerCache& lc = sc.layers[li];
    LayerGrads& lg = g.layers[li];

    // x_out = x_mid + silu(f w1) w2
    matmul_tn_add(lg.w2, lc.su, dx);
    dsu = MatF(l, mc.ffn_dim());
    matmul_nt_add(dsu, dx, lp.w2);
    du = dsu;
    for (size_t t = 0; t < du.data.size(); ++t) {
      const float u = lc.u.data[t];
      const float sg = 1.0f / (1.0f + std::exp(-u));
      du.data[t] *= sg * (1.0f + u * (1.0f - sg));
    }
    matmul_tn_add(lg.w1, lc.f, du);
    df = MatF(l, d);
    matmul_nt_add(df, du, lp.w1);
    rmsnorm_backward(lc.x_mid, lp.ffn_norm, lc.inv_ffn, df, dx, lg.ffn_norm);

    // x_mid = x_in + attention(a) wo
    matmul_tn_add(lg.wo, lc.cat, dx);
    dcat = MatF(l, d);
    matmul_nt_add(dcat, dx, lp.wo);

    dq = MatF(l, d);
    dk = MatF(l, d);
    dv = MatF(l, d);
    for (int64_t h = 0; h < heads; ++h) {
      const MatF& p = lc.probs[h];
      for (int64_t i = 0; i < l; ++i) {
        std::copy(dcat.row(i) + h * hd, dcat.row(i) + (h + 1) * hd, ph_d.row(i));
        std::copy(lc.q_rot.row(i) + h * hd, lc.q_rot.row(i) + (h + 1) * hd, qh.row(i));
        std::copy(lc.k_rot.row(i) + h * hd, lc.k_rot.row(i) + (h + 1) * hd, kh.row(i));
        std::copy(lc.v.row(i) + h * hd, lc.v.row(i) + (h + 1) * hd, vh.row(i));
      }
      // dV = P^T dO, dP = dO V^T, dS = P (dP - rowsum(dP P)), then qk grads.
      dS = MatF(l, l);
      matmul_nt_add(dS, ph_d, vh);  // dS holds dP for now
      for (int64_t i = 0; i < l; ++i) {
        const float* pi = p.row(i);
        float* dsi = dS.row(i);
        double dot = 0.0;
        for (int64_t j = 0; j <= i; ++j) dot += static_cast<double>(dsi[j]) * pi[j];
        const float dots = static_cast<float>(dot);
        for (int64_t j = 0; j <= i; ++j) dsi[j] = pi[j] * (dsi[j] - dots) * scale;
        for (int64_t j = i + 1; j < l; ++j) dsi[j] = 0.0f;
      }
      matmul(tmp, dS, kh);
      for (int64_t i = 0; i < l; ++i)
        for (int64_t t = 0; t < hd; ++t) dq.row(i)[h * hd + t] = tmp.row(i)[t];
      tmp = MatF(l, hd);
      matmul_tn_add(tmp, dS, qh);
      for (int64_t i = 0; i < l; ++i)
        for (int64_t t = 0; t < hd; ++t) dk.row(i)[h * hd + t] = tmp.row(i)[t];
      tmp = MatF(l, hd);
      matmul_tn_add(tmp, p, ph_d);
      for (int64_t i = 0; i < l; ++i)
        for (int64_t t = 0; t < hd; ++t) dv.row(i)[h * hd + t] = tmp.row(i)[t];
    }
    rotate_heads_adjoint(dq, table, heads);
    rotate_heads_adjoint(dk, table, heads);

    matmul_tn_add(lg.wq, lc.a, dq);
    matmul_tn_add(lg.wk, lc.a, dk);
    matmul_tn_add(lg.wv, lc.a, dv);
    da = MatF(l, d);
    matmul_nt_add(da, dq, lp.wq);
    matmul_nt_add(da, dk, lp.wk);
    matmul_nt_add(da, dv, lp.wv);
    rmsnorm_backward(lc.x_in, lp.attn_norm, lc.inv_attn, da, dx, lg.attn_norm);
  }

  for (int64_t i = 0; i < l; ++i) {
    float* er = g.embedding.row(seq[i]);
    const float* dxi = dx.row(i);
    for (int64_t j = 0; j < d; ++j) er[j] += dxi[j];
  }
  return nll;
}

}  // namespace

RowMatrix<float> train_path_logits(const ModelCheckpoint& ckpt, std::span<const uint8_t> tokens) {
  require_valid(ckpt.config);
  if (tokens.empty()) throw std::invalid_argument("tokens must be nonempty");
  RotaryTable table(ckpt.config.head_dim(),
                    std::max<int64_t>(static_cast<int64_t>(tokens.size()),
                                      ckpt.config.train_context));
  return train_forward(ckpt, tokens, table).logits;
}

std::pair<double, std::vector<float>> loss_and_gradient(const ModelCheckpoint& ckpt,
                                                        std::span<const uint8_t> window) {
  require_valid(ckpt.config);
  if (window.size() < 2) throw std::invalid_argument("window must hold at least 2 bytes");
  const int64_t l = static_cast<int64_t>(window.size()) - 1;
  RotaryTable table(ckpt.config.head_dim(), std::max(l, ckpt.config.train_context));
  const SeqCache sc = train_forward(ckpt, window.first(static_cast<size_t>(l)), table);
  Grads g = zero_grads(ckpt.config);
  const double nll =
      train_backward(ckpt, sc, window, 1.0 / static_cast<double>(l), table, g) / l;

  std::vector<float> flat;
  flat.reserve(static_cast<size_t>(parameter_count(ckpt.config)));
  for (const auto& gs : tensor_spans(g)) flat.insert(flat.end(), gs.begin(), gs.end());
  return {nll, std::move(flat)};
}

ModelCheckpoint train(const ModelCheckpoint& ckpt, std::span<const uint8_t> corpus,
                      const TrainOptions& opts,
                      const std::function<void(int64_t, double)>& on_log) {
  require_valid(ckpt.config);
  const int64_t seq_len = opts.seq_len > 0 ? opts.seq_len : ckpt.config.train_context;
  if (seq_len < 2 || seq_len > ckpt.config.train_context)
    throw std::invalid_argument("seq_len must be in [2, train_context]");
  if (opts.steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (opts.batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (static_cast<int64_t>(corpus.size()) <= seq_len)
    throw std::invalid_argument("corpus too short");

  ModelCheckpoint out = ckpt;
  if (opts.steps == 0) return out;

  const int64_t n_offsets = static_cast<int64_t>(corpus.size()) - seq_len;
  std::mt19937_64 rng(ckpt.config.seed * 0x100000001b3ULL +
                      static_cast<uint64_t>(ckpt.step_count) + 1);
  RotaryTable table(out.config.head_dim(), out.config.train_context);

  Grads grads = zero_grads(out.config);
  Grads m = zero_grads(out.config);
  Grads v = zero_grads(out.config);
  auto params = tensor_spans(out);
  auto gsp = tensor_spans(grads);
  auto msp = tensor_spans(m);
  auto vsp = tensor_spans(v);

  const double inv_tokens = 1.0 / (static_cast<double>(opts.batch) * seq_len);
  for (int64_t step = 1; step <= opts.steps; ++step) {
    zero_fill(grads);
    double loss_sum = 0.0;
    for (int64_t b = 0; b < opts.batch; ++b) {
      const int64_t off = static_cast<int64_t>(rng() % static_cast<uint64_t>(n_offsets));
      std::span<const uint8_t> window = corpus.subspan(off, seq_len + 1);
      const SeqCache sc = train_forward(out, window.first(seq_len), table);
      loss_sum += train_backward(out, sc, window, inv_tokens, table, grads);
    }

    double sq = 0.0;
    for (auto& gs : gsp)
      for (float x : gs) sq += static_cast<double>(x) * x;
    const double gnorm = std::sqrt(sq);
    const float gscale =
        gnorm > opts.clip_norm ? static_cast<float>(opts.clip_norm / gnorm) : 1.0f;

    const int64_t t = out.step_count + step - ckpt.step_count;
    const double lr = opts.warmup_steps > 0 && t < opts.warmup_steps
                          ? opts.lr * static_cast<double>(t) / opts.warmup_steps
                          : opts.lr;
    const double bc1 = 1.0 - std::pow(opts.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(opts.beta2, static_cast<double>(t));
    for (size_t ti = 0; ti < params.size(); ++ti) {
      float* p = params[ti].data();
      float* gp = gsp[ti].data();
      float* mp = msp[ti].data();
      float* vp = vsp[ti].data();
      const size_t n = params[ti].size();
      for (size_t j = 0; j < n; ++j) {
        const double gj = static_cast<double>(gp[j]) * gscale;
        const double mj = opts.beta1 * mp[j] + (1.0 - opts.beta1) * gj;
        const double vj = opts.beta2 * vp[j] + (1.0 - opts.beta2) * gj * gj;
        mp[j] = static_cast<float>(mj);
        vp[j] = static_cast<float>(vj);
        p[j] -= static_cast<float>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + opts.adam_eps));
      }
    }

    if (on_log && (step % opts.log_every == 0 || step == opts.steps)) {
      const double mean_loss = loss_sum / (static_cast<double>(opts.batch) * seq_len);
      on_log(step, mean_loss);
    }
  }
  out.step_count = ckpt.step_count + opts.steps;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'C', 'A', '1'};
constexpr uint32_t kVersion = 1;

struct TensorRef {
  std::string name;
  std::vector<int64_t> dims;
  const float* data;
  float* mut = nullptr;
  int64_t count() const {
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    return n;
  }
};

std::vector<TensorRef> tensor_table(ModelCheckpoint& c) {
  const int64_t d = c.config.model_dim;
  std::vector<TensorRef> t;
  auto add = [&](std::string name, std::vector<int64_t> dims, std::vector<float>& v) {
    t.push_back({std::move(name), std::move(dims), v.data(), v.data()});
  };
  add("embedding", {c.config.vocab, d}, c.embedding.data);
  for (size_t i = 0; i < c.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    LayerParams& lp = c.layers[i];
    add(p + "attn_norm", {d}, lp.attn_norm);
    add(p + "wq", {d, d}, lp.wq.data);
    add(p + "wk", {d, d}, lp.wk.data);
    add(p + "wv", {d, d}, lp.wv.data);
    add(p + "wo", {d, d}, lp.wo.data);
    add(p + "ffn_norm", {d}, lp.ffn_norm);
    add(p + "w1", {d, c.config.ffn_dim()}, lp.w1.data);
    add(p + "w2", {c.config.ffn_dim(), d}, lp.w2.data);
  }
  add("final_norm", {d}, c.final_norm);
  add("output", {d, c.config.vocab}, c.output.data);
  return t;
}

template <typename T>
void put_pod(std::string& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

struct Cursor {
  const char* p;
  const char* end;
  void need(size_t n) const {
    if (static_cast<size_t>(end - p) < n) throw std::runtime_error("truncated checkpoint");
  }
  template <typename T>
  T take() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, p, sizeof v);
    p += sizeof v;
    return v;
  }
  void take_bytes(void* dst, size_t n) {
    need(n);
    std::memcpy(dst, p, n);
    p += n;
  }
};

}  // namespace

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  require_valid(ckpt.config);
  auto& mut = const_cast<ModelCheckpoint&>(ckpt);
  const auto table = tensor_table(mut);

  std::string buf;
  buf.append(kMagic, sizeof kMagic);
  put_pod(buf, kVersion);
  put_pod(buf, ckpt.config.vocab);
  put_pod(buf, ckpt.config.model_dim);
  put_pod(buf, ckpt.config.heads);
  put_pod(buf, ckpt.config.layers);
  put_pod(buf, ckpt.config.train_context);
  put_pod(buf, ckpt.config.seed);
  put_pod(buf, ckpt.step_count);
  put_pod(buf, ckpt.corpus_fingerprint);
  put_pod(buf, static_cast<uint32_t>(table.size()));
  for (const TensorRef& t : table) {
    put_pod(buf, static_cast<uint32_t>(t.name.size()));
    buf.append(t.name);
    put_pod(buf, static_cast<uint32_t>(t.dims.size()));
    for (int64_t dm : t.dims) put_pod(buf, dm);
  }
  for (const TensorRef& t : table)
    buf.append(reinterpret_cast<const char*>(t.data), sizeof(float) * t.count());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Cursor cur{buf.data(), buf.data() + buf.size()};
  char magic[4];
  cur.take_bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw std::runtime_error("bad magic");
  const uint32_t version = cur.take<uint32_t>();
  if (version != kVersion)
    throw std::runtime_error("version mismatch: file has " + std::to_string(version) +
                             ", expected " + std::to_string(kVersion));

  ModelConfig cfg;
  cfg.vocab = cur.take<int64_t>();
  cfg.model_dim = cur.take<int64_t>();
  cfg.heads = cur.take<int64_t>();
  cfg.layers = cur.take<int64_t>();
  cfg.train_context = cur.take<int64_t>();
  cfg.seed = cur.take<uint64_t>();
  require_valid(cfg);

  ModelCheckpoint ckpt = init_model(cfg);
  ckpt.step_count = cur.take<int64_t>();
  ckpt.corpus_fingerprint = cur.take<uint64_t>();

  auto table = tensor_table(ckpt);
  const uint32_t count = cur.take<uint32_t>();
  if (count != table.size())
    throw std::runtime_error("checkpoint shape mismatch: tensor count " + std::to_string(count));
  for (const TensorRef& t : table) {
    const uint32_t name_len = cur.take<uint32_t>();
    std::string name(name_len, '\0');
    cur.take_bytes(name.data(), name_len);
    const uint32_t ndim = cur.take<uint32_t>();
    std::vector<int64_t> dims(ndim);
    for (uint32_t i = 0; i < ndim; ++i) dims[i] = cur.take<int64_t>();
    if (name != t.name || dims != t.dims)
      throw std::runtime_error("checkpoint shape mismatch: " + name);
  }
  for (TensorRef& t : table)
    cur.take_bytes(t.mut, sizeof(float) * static_cast<size_t>(t.count()));
  if (cur.p != cur.end) throw std::runtime_error("trailing bytes after checkpoint payload");
  return ckpt;
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

namespace {

RotaryTable session_table(const ModelConfig& cfg) {
  require_valid(cfg);
  return RotaryTable(cfg.head_dim(), cfg.train_context);
}

}  // namespace

DecodeSession::DecodeSession(const ModelCheckpoint& ckpt, AttentionMode mode,
                             const ChunkConfig* cfg)
    : ckpt_(ckpt), mode_(mode), table_(session_table(ckpt.config)) {
  if (mode_needs_config(mode)) {
    cfg_ = detail::checked_config(mode, cfg);
    has_cfg_ = true;
  }
  const int64_t layers = ckpt.config.layers;
  k_cache_.assign(layers, MatF(0, ckpt.config.model_dim));
  v_cache_.assign(layers, MatF(0, ckpt.config.model_dim));
}

void DecodeSession::prefill(std::span<const uint8_t> tokens) {
  if (tokens.empty()) throw std::invalid_argument("tokens must be nonempty");
  std::vector<MatF> k_caps, v_caps;
  const RowMatrix<float> logits =
      forward_impl<float>(ckpt_, tokens, mode_, has_cfg_ ? &cfg_ : nullptr,
                          AttentionEngine::Fast, &k_caps, &v_caps);
  k_cache_ = std::move(k_caps);
  v_cache_ = std::move(v_caps);
  len_ = static_cast<int64_t>(tokens.size());
  const float* last = logits.row(logits.rows - 1);
  last_logits_.assign(last, last + logits.cols);
}

void DecodeSession::step_token(uint8_t token) {
  const ModelConfig& mc = ckpt_.config;
  const int64_t d = mc.model_dim, heads = mc.heads, hd = mc.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const ChunkConfig* cfg = has_cfg_ ? &cfg_ : nullptr;

  std::vector<float> x(ckpt_.embedding.row(token), ckpt_.embedding.row(token) + d);
  std::vector<float> a(d), q(d), cat(d), proj(d), u(mc.ffn_dim());

  auto rms_row = [&](const std::vector<float>& in, const std::vector<float>& gain,
                     std::vector<float>& out) {
    double ss = 0.0;
    for (float e : in) ss += static_cast<double>(e) * e;
    const float inv = static_cast<float>(1.0 / std::sqrt(ss / d + kNormEps));
    for (int64_t j = 0; j < d; ++j) out[j] = gain[j] * in[j] * inv;
  };
  auto gemv = [](const std::vector<float>& in, const MatF& w, std::vector<float>& out) {
    std::fill(out.begin(), out.end(), 0.0f);
    for (int64_t t = 0; t < w.rows; ++t) {
      const float it = in[t];
      const float* wr = w.row(t);
      for (int64_t j = 0; j < w.cols; ++j) out[j] += it * wr[j];
    }
  };

  for (int64_t li = 0; li < mc.layers; ++li) {
    const LayerParams& lp = ckpt_.layers[li];
    rms_row(x, lp.attn_norm, a);
    gemv(a, lp.wq, q);

    MatF& kc = k_cache_[li];
    MatF& vc = v_cache_[li];
    kc.data.resize(kc.data.size() + d);
    vc.data.resize(vc.data.size() + d);
    kc.rows += 1;
    vc.rows += 1;
    {
      std::vector<float> kv(d);
      gemv(a, lp.wk, kv);
      std::copy(kv.begin(), kv.end(), kc.row(kc.rows - 1));
      gemv(a, lp.wv, kv);
      std::copy(kv.begin(), kv.end(), vc.row(vc.rows - 1));
    }

    MatF kh(kc.rows, hd), vh(kc.rows, hd);
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t r = 0; r < kc.rows; ++r) {
        std::copy(kc.row(r) + h * hd, kc.row(r) + (h + 1) * hd, kh.row(r));
        std::copy(vc.row(r) + h * hd, vc.row(r) + (h + 1) * hd, vh.row(r));
      }
      const std::vector<float> oh = attention_step<float>(
          std::span<const float>(q.data() + h * hd, hd), kh, vh, scale, mode_, cfg, table_);
      std::copy(oh.begin(), oh.end(), cat.begin() + h * hd);
    }
    gemv(cat, lp.wo, proj);
    for (int64_t j = 0; j < d; ++j) x[j] += proj[j];

    rms_row(x, lp.ffn_norm, a);
    gemv(a, lp.w1, u);
    for (float& e : u) e = silu(e);
    gemv(u, lp.w2, proj);
    for (int64_t j = 0; j < d; ++j) x[j] += proj[j];
  }

  rms_row(x, ckpt_.final_norm, a);
  last_logits_.assign(mc.vocab, 0.0f);
  gemv(a, ckpt_.output, last_logits_);
  len_ += 1;
}

uint8_t DecodeSession::greedy_step() {
  if (len_ == 0) throw std::logic_error("greedy_step before prefill");
  const auto it = std::max_element(last_logits_.begin(), last_logits_.end());
  const uint8_t token = static_cast<uint8_t>(it - last_logits_.begin());
  step_token(token);
  return token;
}

}  // namespace dca
