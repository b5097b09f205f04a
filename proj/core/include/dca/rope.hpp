// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dca/matrix.hpp"

namespace dca {

/// Per-pair rotation frequencies for rotary position embedding, with cos/sin
/// cached for integer positions below max_pos. Immutable after construction;
/// shared concurrent reads are safe. Fractional positions (used by position
/// interpolation) bypass the cache.
///
/// Pairing is interleaved: components (2k, 2k+1) rotate together by
/// angle pos * base^(-2k/head_dim).
class RotaryTable {
 public:
  explicit RotaryTable(int64_t head_dim, int64_t max_pos = 0, double base = 10000.0);

  int64_t head_dim() const { return head_dim_; }
  double base() const { return base_; }
  int64_t max_pos() const { return max_pos_; }
  int64_t pairs() const { return head_dim_ / 2; }
  double freq(int64_t pair) const { return inv_freq_[pair]; }

  bool cached(double pos) const {
    const auto ip = static_cast<int64_t>(pos);
    return static_cast<double>(ip) == pos && ip >= 0 && ip < max_pos_;
  }
  const double* cos_row(int64_t pos) const { return cos_.data() + pos * pairs(); }
  const double* sin_row(int64_t pos) const { return sin_.data() + pos * pairs(); }

 private:
  int64_t head_dim_;
  double base_;
  int64_t max_pos_;
  std::vector<double> inv_freq_;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

/// Rotates v in place by position pos. v.size() must equal head_dim.
template <typename T>
void apply_rotary_inplace(const RotaryTable& table, double pos, std::span<T> v) {
  if (static_cast<int64_t>(v.size()) != table.head_dim())
    throw std::invalid_argument("vector length must equal head_dim");
  const int64_t n = table.pairs();
  if (table.cached(pos)) {
    const auto ip = static_cast<int64_t>(pos);
    const double* c = table.cos_row(ip);
    const double* s = table.sin_row(ip);
    for (int64_t k = 0; k < n; ++k) {
      const double a = v[2 * k], b = v[2 * k + 1];
      v[2 * k] = static_cast<T>(a * c[k] - b * s[k]);
      v[2 * k + 1] = static_cast<T>(a * s[k] + b * c[k]);
    }
    return;
  }
  for (int64_t k = 0; k < n; ++k) {
    const double angle = pos * table.freq(k);
    const double c = std::cos(angle), s = std::sin(angle);
    const double a = v[2 * k], b = v[2 * k + 1];
    v[2 * k] = static_cast<T>(a * c - b * s);
    v[2 * k + 1] = static_cast<T>(a * s + b * c);
  }
}

template <typename T>
std::vector<T> apply_rotary(const RotaryTable& table, double pos, std::span<const T> v) {
  std::vector<T> out(v.begin(), v.end());
  apply_rotary_inplace<T>(table, pos, out);
  return out;
}

/// dot(rotate(q, qpos), rotate(k, kpos)), accumulated in double. Depends on
/// q, k and qpos - kpos only.
template <typename T>
double rotary_inner(const RotaryTable& table, std::span<const T> q, std::span<const T> k,
                    double qpos, double kpos) {
  if (q.size() != k.size()) throw std::invalid_argument("head_dim mismatch");
  if (static_cast<int64_t>(q.size()) != table.head_dim())
    throw std::invalid_argument("vector length must equal head_dim");
  double acc = 0.0;
  for (int64_t p = 0; p < table.pairs(); ++p) {
    const double aq = qpos * table.freq(p);
    const double ak = kpos * table.freq(p);
    const double cq = std::cos(aq), sq = std::sin(aq);
    const double ck = std::cos(ak), sk = std::sin(ak);
    const double q0 = q[2 * p], q1 = q[2 * p + 1];
    const double k0 = k[2 * p], k1 = k[2 * p + 1];
    const double rq0 = q0 * cq - q1 * sq, rq1 = q0 * sq + q1 * cq;
    const double rk0 = k0 * ck - k1 * sk, rk1 = k0 * sk + k1 * ck;
    acc += rq0 * rk0 + rq1 * rk1;
  }
  return acc;
}

/// Rotates every row of m by the corresponding position. Rows beyond
/// positions.size() are not touched.
template <typename T>
void apply_rotary_rows(const RotaryTable& table, std::span<const double> positions,
                       RowMatrix<T>& m) {
  for (int64_t i = 0; i < static_cast<int64_t>(positions.size()); ++i)
    apply_rotary_inplace<T>(table, positions[i], m.row_span(i));
}

}  // namespace dca
