// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dca/matrix.hpp"

namespace dca {

// Small dense kernels, row-major, written so the k/n loops vectorize.

/// Dot product with eight independent accumulators, so the reduction
/// vectorizes without reassociation flags. Deterministic: the summation order
/// is fixed by n alone.
template <typename T>
T dot_span(const T* a, const T* b, int64_t n) {
  T acc[8] = {};
  int64_t k = 0;
  for (; k + 8 <= n; k += 8)
    for (int64_t j = 0; j < 8; ++j) acc[j] += a[k + j] * b[k + j];
  for (; k < n; ++k) acc[k % 8] += a[k] * b[k];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

/// dst = src^T
template <typename T>
void transpose(RowMatrix<T>& dst, const RowMatrix<T>& src) {
  dst.rows = src.cols;
  dst.cols = src.rows;
  dst.data.resize(src.data.size());
  for (int64_t i = 0; i < src.rows; ++i) {
    const T* srow = src.row(i);
    for (int64_t j = 0; j < src.cols; ++j) dst.data[j * src.rows + i] = srow[j];
  }
}

/// C = A (M,K) * B (K,N)
template <typename T>
void matmul(RowMatrix<T>& c, const RowMatrix<T>& a, const RowMatrix<T>& b) {
  c.rows = a.rows;
  c.cols = b.cols;
  c.data.assign(static_cast<size_t>(a.rows * b.cols), T{});
  for (int64_t i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int64_t k = 0; k < a.cols; ++k) {
      const T av = arow[k];
      const T* brow = b.row(k);
      for (int64_t n = 0; n < b.cols; ++n) crow[n] += av * brow[n];
    }
  }
}

/// C += A (M,K) * B (K,N)
template <typename T>
void matmul_add(RowMatrix<T>& c, const RowMatrix<T>& a, const RowMatrix<T>& b) {
  for (int64_t i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int64_t k = 0; k < a.cols; ++k) {
      const T av = arow[k];
      const T* brow = b.row(k);
      for (int64_t n = 0; n < b.cols; ++n) crow[n] += av * brow[n];
    }
  }
}

/// C += A (M,K) * B^T where B is (N,K). Goes through an explicit transpose of
/// B so the inner loop is a vectorizable axpy instead of a serial dot.
template <typename T>
void matmul_nt_add(RowMatrix<T>& c, const RowMatrix<T>& a, const RowMatrix<T>& b) {
  RowMatrix<T> bt;
  transpose(bt, b);
  matmul_add(c, a, bt);
}

/// C (K,N) += A^T * B where A is (M,K), B is (M,N)
template <typename T>
void matmul_tn_add(RowMatrix<T>& c, const RowMatrix<T>& a, const RowMatrix<T>& b) {
  for (int64_t m = 0; m < a.rows; ++m) {
    const T* arow = a.row(m);
    const T* brow = b.row(m);
    for (int64_t k = 0; k < a.cols; ++k) {
      const T av = arow[k];
      T* crow = c.row(k);
      for (int64_t n = 0; n < b.cols; ++n) crow[n] += av * brow[n];
    }
  }
}

}  // namespace dca
