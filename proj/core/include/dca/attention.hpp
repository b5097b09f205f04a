// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dca/linalg.hpp"
#include "dca/matrix.hpp"
#include "dca/rope.hpp"
#include "dca/schedules.hpp"

namespace dca {

enum class AttentionMode { Vanilla, PI, IntraOnly, IntraInter, FullDCA };

/// True for the modes that decompose attention by chunk (and need a ChunkConfig).
bool is_chunked_mode(AttentionMode mode);
/// True for every mode that needs a ChunkConfig (chunked modes plus PI, which
/// reads the pretraining context from it).
bool mode_needs_config(AttentionMode mode);

std::string_view mode_name(AttentionMode mode);
std::optional<AttentionMode> parse_mode(std::string_view name);
std::string valid_mode_names();

/// Unnormalized result of attending one query over one span of keys.
/// weighted = sum exp(score - max_score) * v, mass = sum exp(score - max_score).
/// A pass that covered zero keys has mass 0.
struct AttentionPartial {
  std::vector<double> weighted;
  double mass = 0.0;
  double max_score = -std::numeric_limits<double>::infinity();

  bool empty() const { return mass == 0.0; }
};

/// Combines per-pass partials into one normalized output vector, rescaling
/// each by exp(max_p - global_max) so the merge is stable and order-invariant.
/// Throws if every part is empty.
std::vector<double> merge_partials(std::span<const AttentionPartial> parts);

struct KeyRange {
  int64_t begin = 0;
  int64_t end = 0;
  int64_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
};

/// Key index ranges covered by the three passes for query_index. Sizes always
/// sum to query_index + 1.
struct PassRanges {
  KeyRange intra;
  KeyRange succ;
  KeyRange inter;
};

PassRanges dca_pass_ranges(int64_t query_index, int64_t chunk_size);

namespace detail {

template <typename T>
void check_attention_inputs(const RowMatrix<T>& q, const RowMatrix<T>& k, const RowMatrix<T>& v,
                            const RotaryTable& table) {
  if (q.rows != k.rows || q.rows != v.rows || q.cols != k.cols || q.cols != v.cols)
    throw std::invalid_argument("Q, K, V must have matching shapes");
  if (q.cols != table.head_dim())
    throw std::invalid_argument("head_dim must match the rotary table");
  for (const auto* m : {&q, &k, &v})
    for (T x : m->data)
      if (std::isnan(static_cast<double>(x))) throw std::invalid_argument("NaN in attention inputs");
}

/// One pass of one query over keys [range.begin, range.end): two sweeps,
/// max then exp-accumulate. Scores in scratch, accumulation in double.
template <typename T>
void attend_range(std::span<const T> q_rot, const RowMatrix<T>& k_rot, const RowMatrix<T>& v,
                  double scale, KeyRange range, std::vector<double>& scratch,
                  AttentionPartial& out) {
  const int64_t d = k_rot.cols;
  out.weighted.assign(d, 0.0);
  out.mass = 0.0;
  out.max_score = -std::numeric_limits<double>::infinity();
  if (range.empty()) return;

  scratch.resize(range.size());
  for (int64_t j = range.begin; j < range.end; ++j) {
    const T* krow = k_rot.row(j);
    const double s = static_cast<double>(dot_span(q_rot.data(), krow, d)) * scale;
    scratch[j - range.begin] = s;
    if (s > out.max_score) out.max_score = s;
  }
  for (int64_t j = range.begin; j < range.end; ++j) {
    const double e = std::exp(scratch[j - range.begin] - out.max_score);
    out.mass += e;
    const T* vrow = v.row(j);
    for (int64_t t = 0; t < d; ++t) out.weighted[t] += e * vrow[t];
  }
}

const ChunkConfig& checked_config(AttentionMode mode, const ChunkConfig* cfg);

}  // namespace detail

/// Single-pass causal attention with explicit (possibly fractional) positions:
/// the vanilla RoPE and position-interpolation regimes.
template <typename T>
RowMatrix<T> causal_attention(const RowMatrix<T>& q, const RowMatrix<T>& k, const RowMatrix<T>& v,
                              double scale, std::span<const double> positions,
                              const RotaryTable& table) {
  detail::check_attention_inputs(q, k, v, table);
  if (static_cast<int64_t>(positions.size()) != q.rows)
    throw std::invalid_argument("positions must cover every row");
  RowMatrix<T> q_rot = q, k_rot = k;
  apply_rotary_rows(table, positions, q_rot);
  apply_rotary_rows(table, positions, k_rot);

  RowMatrix<T> out(q.rows, q.cols);
  std::vector<double> scratch;
  AttentionPartial part;
  for (int64_t i = 0; i < q.rows; ++i) {
    detail::attend_range<T>(q_rot.row_span(i), k_rot, v, scale, {0, i + 1}, scratch, part);
    const double inv = 1.0 / part.mass;
    T* orow = out.row(i);
    for (int64_t t = 0; t < q.cols; ++t) orow[t] = static_cast<T>(part.weighted[t] * inv);
  }
  return out;
}

/// Chunked attention: up to three passes per query (own chunk, previous
/// chunk, all earlier chunks), each over keys rotated by their fixed
/// positions and a query re-rotated per pass schedule; partials merged by
/// their softmax masses. mode selects which passes exist:
///   IntraOnly  - own chunk only
///   IntraInter - own chunk + one pass over all previous chunks
///   FullDCA    - own chunk + previous chunk + earlier chunks
template <typename T>
RowMatrix<T> dca_attention_chunked(const RowMatrix<T>& q, const RowMatrix<T>& k,
                                   const RowMatrix<T>& v, double scale, const ChunkConfig& cfg,
                                   const RotaryTable& table,
                                   AttentionMode mode = AttentionMode::FullDCA) {
  detail::check_attention_inputs(q, k, v, table);
  if (!is_chunked_mode(mode)) throw std::invalid_argument("mode is not a chunked mode");
  require_valid(cfg);
  const int64_t len = q.rows, d = q.cols;

  const auto key_sched = key_positions(len, cfg.chunk_size);
  std::vector<double> key_pos(len), intra_pos(len), succ_pos(len), inter_pos(len);
  const auto succ_sched = succ_query_positions(len, cfg);
  for (int64_t i = 0; i < len; ++i) {
    key_pos[i] = static_cast<double>(key_sched.ints()[i]);
    intra_pos[i] = key_pos[i];
    succ_pos[i] = static_cast<double>(succ_sched.ints()[i]);
    inter_pos[i] = static_cast<double>(cfg.pretrain_ctx - 1);
  }

  RowMatrix<T> k_rot = k;
  apply_rotary_rows(table, key_pos, k_rot);
  RowMatrix<T> q_intra = q;
  apply_rotary_rows(table, intra_pos, q_intra);
  RowMatrix<T> q_succ, q_inter;
  if (mode == AttentionMode::FullDCA) {
    q_succ = q;
    apply_rotary_rows(table, succ_pos, q_succ);
  }
  if (mode != AttentionMode::IntraOnly) {
    q_inter = q;
    apply_rotary_rows(table, inter_pos, q_inter);
  }

  RowMatrix<T> out(len, d);
  std::vector<double> scratch;
  AttentionPartial parts[3];
  for (int64_t i = 0; i < len; ++i) {
    const PassRanges ranges = dca_pass_ranges(i, cfg.chunk_size);
    size_t used = 0;
    detail::attend_range<T>(q_intra.row_span(i), k_rot, v, scale, ranges.intra, scratch,
                            parts[used++]);
    if (mode == AttentionMode::FullDCA) {
      detail::attend_range<T>(q_succ.row_span(i), k_rot, v, scale, ranges.succ, scratch,
                              parts[used++]);
      detail::attend_range<T>(q_inter.row_span(i), k_rot, v, scale, ranges.inter, scratch,
                              parts[used++]);
    } else if (mode == AttentionMode::IntraInter) {
      detail::attend_range<T>(q_inter.row_span(i), k_rot, v, scale,
                              {0, ranges.intra.begin}, scratch, parts[used++]);
    }
    const auto merged = merge_partials({parts, used});
    T* orow = out.row(i);
    for (int64_t t = 0; t < d; ++t) orow[t] = static_cast<T>(merged[t]);
  }
  return out;
}

/// Brute-force reference: every admissible (query, key) score is computed
/// independently through rotary_inner and normalized by one full softmax per
/// row. Slow; exists to pin down what the fast paths must produce.
template <typename T>
RowMatrix<T> oracle_attention(const RowMatrix<T>& q, const RowMatrix<T>& k, const RowMatrix<T>& v,
                              double scale, AttentionMode mode, const ChunkConfig* cfg,
                              const RotaryTable& table) {
  detail::check_attention_inputs(q, k, v, table);
  const int64_t len = q.rows, d = q.cols;

  const ChunkConfig* checked = nullptr;
  if (mode_needs_config(mode)) checked = &detail::checked_config(mode, cfg);

  std::vector<double> pi_pos;
  if (mode == AttentionMode::PI) {
    const auto sched = pi_scaled_positions(len, checked->pretrain_ctx);
    pi_pos = sched.reals();
  }

  RowMatrix<T> out(len, d);
  std::vector<double> scores;
  std::vector<int64_t> keys;
  for (int64_t i = 0; i < len; ++i) {
    scores.clear();
    keys.clear();
    for (int64_t j = 0; j <= i; ++j) {
      double qpos = 0.0, kpos = 0.0;
      switch (mode) {
        case AttentionMode::Vanilla:
          qpos = static_cast<double>(i);
          kpos = static_cast<double>(j);
          break;
        case AttentionMode::PI:
          qpos = pi_pos[i];
          kpos = pi_pos[j];
          break;
        case AttentionMode::IntraOnly:
          if (i / checked->chunk_size != j / checked->chunk_size) continue;
          qpos = static_cast<double>(i % checked->chunk_size);
          kpos = static_cast<double>(j % checked->chunk_size);
          break;
        case AttentionMode::IntraInter: {
          const bool same = i / checked->chunk_size == j / checked->chunk_size;
          qpos = same ? static_cast<double>(i % checked->chunk_size)
                      : static_cast<double>(checked->pretrain_ctx - 1);
          kpos = static_cast<double>(j % checked->chunk_size);
          break;
        }
        case AttentionMode::FullDCA:
          qpos = static_cast<double>(query_position_for(i, j, *checked));
          kpos = static_cast<double>(j % checked->chunk_size);
          break;
      }
      scores.push_back(rotary_inner<T>(table, q.row_span(i), k.row_span(j), qpos, kpos) * scale);
      keys.push_back(j);
    }
    double max_score = -std::numeric_limits<double>::infinity();
    for (double s : scores) max_score = std::max(max_score, s);
    double mass = 0.0;
    std::vector<double> acc(d, 0.0);
    for (size_t t = 0; t < scores.size(); ++t) {
      const double e = std::exp(scores[t] - max_score);
      mass += e;
      const T* vrow = v.row(keys[t]);
      for (int64_t x = 0; x < d; ++x) acc[x] += e * vrow[x];
    }
    T* orow = out.row(i);
    for (int64_t x = 0; x < d; ++x) orow[x] = static_cast<T>(acc[x] / mass);
  }
  return out;
}

/// Mode dispatch used by the model: causal kernel for Vanilla/PI, chunked
/// kernel otherwise.
template <typename T>
RowMatrix<T> attention_forward(const RowMatrix<T>& q, const RowMatrix<T>& k, const RowMatrix<T>& v,
                               double scale, AttentionMode mode, const ChunkConfig* cfg,
                               const RotaryTable& table) {
  switch (mode) {
    case AttentionMode::Vanilla: {
      std::vector<double> pos(q.rows);
      for (int64_t i = 0; i < q.rows; ++i) pos[i] = static_cast<double>(i);
      return causal_attention(q, k, v, scale, pos, table);
    }
    case AttentionMode::PI: {
      const auto& c = detail::checked_config(mode, cfg);
      const auto sched = pi_scaled_positions(q.rows, c.pretrain_ctx);
      return causal_attention(q, k, v, scale, sched.reals(), table);
    }
    default:
      return dca_attention_chunked(q, k, v, scale, detail::checked_config(mode, cfg), table, mode);
  }
}

/// One decode step: attention of the newest query (the last cached position)
/// over raw (unrotated) cached keys/values. Key positions are fixed per index
/// so the cache never needs re-rotation for the chunked modes; PI re-derives
/// its scale factor from the current length each step.
template <typename T>
std::vector<T> attention_step(std::span<const T> q, const RowMatrix<T>& k_cache,
                              const RowMatrix<T>& v_cache, double scale, AttentionMode mode,
                              const ChunkConfig* cfg, const RotaryTable& table) {
  const int64_t len = k_cache.rows, d = k_cache.cols;
  if (len < 1) throw std::invalid_argument("empty key cache");
  const int64_t i = len - 1;

  const ChunkConfig* checked = nullptr;
  if (mode_needs_config(mode)) checked = &detail::checked_config(mode, cfg);

  // (query position, key range, causal clamp) per pass.
  struct Pass {
    double qpos;
    KeyRange range;
  };
  std::vector<Pass> passes;
  std::vector<double> key_pos(len);
  switch (mode) {
    case AttentionMode::Vanilla:
      for (int64_t j = 0; j < len; ++j) key_pos[j] = static_cast<double>(j);
      passes.push_back({static_cast<double>(i), {0, len}});
      break;
    case AttentionMode::PI: {
      const double f = static_cast<double>(pi_scale_factor(len, checked->pretrain_ctx));
      for (int64_t j = 0; j < len; ++j) key_pos[j] = static_cast<double>(j) / f;
      passes.push_back({static_cast<double>(i) / f, {0, len}});
      break;
    }
    default: {
      for (int64_t j = 0; j < len; ++j)
        key_pos[j] = static_cast<double>(j % checked->chunk_size);
      const PassRanges ranges = dca_pass_ranges(i, checked->chunk_size);
      const int64_t offset = i % checked->chunk_size;
      const double intra_q = static_cast<double>(offset);
      const double inter_q = static_cast<double>(checked->pretrain_ctx - 1);
      const double succ_q = offset < checked->local_window
                                ? static_cast<double>(checked->chunk_size + offset)
                                : inter_q;
      passes.push_back({intra_q, ranges.intra});
      if (mode == AttentionMode::FullDCA) {
        passes.push_back({succ_q, ranges.succ});
        passes.push_back({inter_q, ranges.inter});
      } else if (mode == AttentionMode::IntraInter) {
        passes.push_back({inter_q, {0, ranges.intra.begin}});
      }
      break;
    }
  }

  std::vector<AttentionPartial> parts;
  std::vector<T> q_rot(q.begin(), q.end());
  std::vector<T> k_rot(d);
  for (const Pass& pass : passes) {
    AttentionPartial part;
    part.weighted.assign(d, 0.0);
    if (pass.range.empty()) {
      parts.push_back(std::move(part));
      continue;
    }
    std::copy(q.begin(), q.end(), q_rot.begin());
    apply_rotary_inplace<T>(table, pass.qpos, q_rot);
    std::vector<double> scores(pass.range.size());
    for (int64_t j = pass.range.begin; j < pass.range.end; ++j) {
      const T* krow = k_cache.row(j);
      std::copy(krow, krow + d, k_rot.begin());
      apply_rotary_inplace<T>(table, key_pos[j], std::span<T>(k_rot));
      const double s = static_cast<double>(dot_span(q_rot.data(), k_rot.data(), d)) * scale;
      scores[j - pass.range.begin] = s;
      if (s > part.max_score) part.max_score = s;
    }
    for (int64_t j = pass.range.begin; j < pass.range.end; ++j) {
      const double e = std::exp(scores[j - pass.range.begin] - part.max_score);
      part.mass += e;
      const T* vrow = v_cache.row(j);
      for (int64_t t = 0; t < d; ++t) part.weighted[t] += e * vrow[t];
    }
    parts.push_back(std::move(part));
  }

  const auto merged = merge_partials(parts);
  std::vector<T> out(d);
  for (int64_t t = 0; t < d; ++t) out[t] = static_cast<T>(merged[t]);
  return out;
}

/// Projection weights around the per-head kernel. All square model_dim matrices.
template <typename T>
struct AttentionParams {
  RowMatrix<T> wq, wk, wv, wo;
};

/// Which per-head kernel runs: the production passes or the brute-force
/// reference. Oracle exists so a whole network forward can be cross-checked
/// end to end.
enum class AttentionEngine { Fast, Oracle };

/// Slices already-projected q/k/v (len x dim) into heads, runs the per-head
/// kernel, returns the concatenated heads (len x dim). scale = 1/sqrt(head_dim).
template <typename T>
RowMatrix<T> per_head_attention(const RowMatrix<T>& q, const RowMatrix<T>& k,
                                const RowMatrix<T>& v, int64_t heads, AttentionMode mode,
                                const ChunkConfig* cfg, const RotaryTable& table,
                                AttentionEngine engine = AttentionEngine::Fast) {
  const int64_t len = q.rows, dim = q.cols;
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("model_dim must be divisible by head count");
  const int64_t head_dim = dim / heads;
  if (head_dim != table.head_dim())
    throw std::invalid_argument("head_dim must match the rotary table");
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  RowMatrix<T> concat(len, dim);
  RowMatrix<T> qh(len, head_dim), kh(len, head_dim), vh(len, head_dim);
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < len; ++i) {
      const T* qr = q.row(i) + h * head_dim;
      const T* kr = k.row(i) + h * head_dim;
      const T* vr = v.row(i) + h * head_dim;
      std::copy(qr, qr + head_dim, qh.row(i));
      std::copy(kr, kr + head_dim, kh.row(i));
      std::copy(vr, vr + head_dim, vh.row(i));
    }
    const RowMatrix<T> oh = engine == AttentionEngine::Oracle
                                ? oracle_attention(qh, kh, vh, scale, mode, cfg, table)
                                : attention_forward(qh, kh, vh, scale, mode, cfg, table);
    for (int64_t i = 0; i < len; ++i)
      std::copy(oh.row(i), oh.row(i) + head_dim, concat.row(i) + h * head_dim);
  }
  return concat;
}

/// Standard project / split heads / per-head kernel / concat / output-project.
template <typename T>
RowMatrix<T> multi_head_attention(const RowMatrix<T>& x, const AttentionParams<T>& params,
                                  int64_t heads, AttentionMode mode, const ChunkConfig* cfg,
                                  const RotaryTable& table,
                                  AttentionEngine engine = AttentionEngine::Fast) {
  RowMatrix<T> q, k, v;
  matmul(q, x, params.wq);
  matmul(k, x, params.wk);
  matmul(v, x, params.wv);
  const RowMatrix<T> concat = per_head_attention(q, k, v, heads, mode, cfg, table, engine);
  RowMatrix<T> out;
  matmul(out, concat, params.wo);
  return out;
}

}  // namespace dca
