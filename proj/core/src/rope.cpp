// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#include "dca/rope.hpp"

namespace dca {

RotaryTable::RotaryTable(int64_t head_dim, int64_t max_pos, double base)
    : head_dim_(head_dim), base_(base), max_pos_(max_pos) {
  if (head_dim <= 0 || head_dim % 2 != 0)
    throw std::invalid_argument("head_dim must be a positive even number");
  if (max_pos < 0) throw std::invalid_argument("max_pos must be >= 0");
  if (base <= 0.0) throw std::invalid_argument("base must be > 0");
  const int64_t n = head_dim / 2;
  inv_freq_.resize(n);
  for (int64_t k = 0; k < n; ++k)
    inv_freq_[k] = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(head_dim));
  if (max_pos_ > 0) {
    cos_.resize(max_pos_ * n);
    sin_.resize(max_pos_ * n);
    for (int64_t p = 0; p < max_pos_; ++p) {
      for (int64_t k = 0; k < n; ++k) {
        const double angle = static_cast<double>(p) * inv_freq_[k];
        cos_[p * n + k] = std::cos(angle);
        sin_[p * n + k] = std::sin(angle);
      }
    }
  }
}

}  // namespace dca
