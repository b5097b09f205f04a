// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0
//
// Microbenchmarks for the hot paths: the chunked kernel against the
// brute-force oracle across sequence lengths, the rotary rotation itself,
// and relative-position matrix construction.

#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include "dca/attention.hpp"
#include "dca/evalharness.hpp"
#include "dca/schedules.hpp"

namespace {

using dca::ChunkConfig;
using dca::MatF;
using dca::RotaryTable;

constexpr int64_t kHeadDim = 32;
const ChunkConfig kCfg{96, 128, 32};

MatF random_mat(std::mt19937_64& rng, int64_t rows, int64_t cols) {
  MatF m(rows, cols);
  for (auto& x : m.data) x = static_cast<float>((rng() >> 11) * 0x1.0p-53) - 0.5f;
  return m;
}

void BM_ChunkedAttention(benchmark::State& state) {
  const int64_t len = state.range(0);
  std::mt19937_64 rng(1);
  const MatF q = random_mat(rng, len, kHeadDim), k = random_mat(rng, len, kHeadDim),
             v = random_mat(rng, len, kHeadDim);
  const RotaryTable table(kHeadDim, kCfg.pretrain_ctx + kCfg.chunk_size);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kHeadDim));
  for (auto _ : state) {
    auto out = dca::dca_attention_chunked(q, k, v, scale, kCfg, table);
    benchmark::DoNotOptimize(out.data.data());
  }
  state.SetComplexityN(len);
}
BENCHMARK(BM_ChunkedAttention)->RangeMultiplier(2)->Range(128, 2048)->Complexity();

void BM_OracleAttention(benchmark::State& state) {
  const int64_t len = state.range(0);
  std::mt19937_64 rng(1);
  const MatF q = random_mat(rng, len, kHeadDim), k = random_mat(rng, len, kHeadDim),
             v = random_mat(rng, len, kHeadDim);
  const RotaryTable table(kHeadDim, kCfg.pretrain_ctx + kCfg.chunk_size);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kHeadDim));
  for (auto _ : state) {
    auto out = dca::oracle_attention(q, k, v, scale, dca::AttentionMode::FullDCA, &kCfg, table);
    benchmark::DoNotOptimize(out.data.data());
  }
  state.SetComplexityN(len);
}
BENCHMARK(BM_OracleAttention)->RangeMultiplier(2)->Range(128, 512)->Complexity();

void BM_VanillaAttention(benchmark::State& state) {
  const int64_t len = state.range(0);
  std::mt19937_64 rng(1);
  const MatF q = random_mat(rng, len, kHeadDim), k = random_mat(rng, len, kHeadDim),
             v = random_mat(rng, len, kHeadDim);
  const RotaryTable table(kHeadDim, 4096);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kHeadDim));
  std::vector<double> pos(len);
  for (int64_t i = 0; i < len; ++i) pos[i] = static_cast<double>(i);
  for (auto _ : state) {
    auto out = dca::causal_attention(q, k, v, scale, pos, table);
    benchmark::DoNotOptimize(out.data.data());
  }
  state.SetComplexityN(len);
}
BENCHMARK(BM_VanillaAttention)->RangeMultiplier(2)->Range(128, 2048)->Complexity();

void BM_RotaryRows(benchmark::State& state) {
  const int64_t len = state.range(0);
  std::mt19937_64 rng(2);
  const MatF src = random_mat(rng, len, kHeadDim);
  const RotaryTable table(kHeadDim, len);
  std::vector<double> pos(len);
  for (int64_t i = 0; i < len; ++i) pos[i] = static_cast<double>(i % kCfg.chunk_size);
  for (auto _ : state) {
    MatF rotated = src;
    dca::apply_rotary_rows(table, pos, rotated);
    benchmark::DoNotOptimize(rotated.data.data());
  }
}
BENCHMARK(BM_RotaryRows)->Arg(512)->Arg(4096);

void BM_RelPosMatrix(benchmark::State& state) {
  const int64_t len = state.range(0);
  for (auto _ : state) {
    auto m = dca::relative_position_matrix(len, kCfg);
    benchmark::DoNotOptimize(m.entries.data());
  }
}
BENCHMARK(BM_RelPosMatrix)->Arg(512)->Arg(2048);

void BM_DecodeStep(benchmark::State& state) {
  const int64_t prompt_len = state.range(0);
  dca::ModelConfig mc;
  mc.model_dim = 64;
  mc.heads = 2;
  mc.layers = 2;
  mc.train_context = 128;
  mc.seed = 3;
  const dca::ModelCheckpoint ckpt = dca::init_model(mc);
  const auto prompt = dca::make_sample_corpus(prompt_len, 4);
  dca::DecodeSession session(ckpt, dca::AttentionMode::FullDCA, &kCfg);
  session.prefill(prompt);
  // Each step appends to the cache, so pin the iteration count to keep the
  // measured lengths close to the nominal prompt length.
  for (auto _ : state) benchmark::DoNotOptimize(session.greedy_step());
}
BENCHMARK(BM_DecodeStep)->Arg(256)->Arg(1024)->Iterations(64);

}  // namespace

BENCHMARK_MAIN();
