// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace dca {

/// Dense row-major matrix. The only layout used anywhere in this library.
template <typename T>
struct RowMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<T> data;

  RowMatrix() = default;
  RowMatrix(int64_t r, int64_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c), T{}) {}

  T* row(int64_t i) { return data.data() + i * cols; }
  const T* row(int64_t i) const { return data.data() + i * cols; }

  std::span<T> row_span(int64_t i) { return {row(i), static_cast<size_t>(cols)}; }
  std::span<const T> row_span(int64_t i) const { return {row(i), static_cast<size_t>(cols)}; }

  T& operator()(int64_t i, int64_t j) { return data[i * cols + j]; }
  const T& operator()(int64_t i, int64_t j) const { return data[i * cols + j]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

using MatF = RowMatrix<float>;
using MatD = RowMatrix<double>;

}  // namespace dca
