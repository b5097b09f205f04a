// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <vector>

#include <doctest.h>

#include "dca/evalharness.hpp"
#include "dca/toy_model.hpp"

using dca::AttentionMode;
using dca::ChunkConfig;
using dca::ModelCheckpoint;
using dca::ModelConfig;

namespace {

ModelConfig small_config(uint64_t seed = 0) {
  ModelConfig cfg;
  cfg.model_dim = 32;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.train_context = 16;
  cfg.seed = seed;
  return cfg;
}

std::vector<uint8_t> bytes_of(const char* text) {
  return std::vector<uint8_t>(text, text + std::char_traits<char>::length(text));
}

std::vector<uint8_t> random_bytes(std::mt19937_64& rng, int64_t n) {
  std::vector<uint8_t> out(n);
  for (auto& b : out) b = static_cast<uint8_t>(rng() % 96 + 32);
  return out;
}

/// All parameter tensors of a checkpoint flattened in a fixed order, for
/// bitwise comparisons.
std::vector<float> flatten(const ModelCheckpoint& ckpt) {
  std::vector<float> out(ckpt.embedding.data.begin(), ckpt.embedding.data.end());
  for (const auto& layer : ckpt.layers) {
    out.insert(out.end(), layer.attn_norm.begin(), layer.attn_norm.end());
    for (const auto* m : {&layer.wq, &layer.wk, &layer.wv, &layer.wo})
      out.insert(out.end(), m->data.begin(), m->data.end());
    out.insert(out.end(), layer.ffn_norm.begin(), layer.ffn_norm.end());
    out.insert(out.end(), layer.w1.data.begin(), layer.w1.data.end());
    out.insert(out.end(), layer.w2.data.begin(), layer.w2.data.end());
  }
  out.insert(out.end(), ckpt.final_norm.begin(), ckpt.final_norm.end());
  out.insert(out.end(), ckpt.output.data.begin(), ckpt.output.data.end());
  return out;
}

struct TempFile {
  std::string path;
  explicit TempFile(const char* name)
      : path((std::filesystem::temp_directory_path() / name).string()) {}
  ~TempFile() {
    std::error_code ec;
    std::filesystem::remove(path, ec);
  }
};

double mean_nll_f64(const ModelCheckpoint& ckpt, std::span<const uint8_t> window) {
  const int64_t l = static_cast<int64_t>(window.size()) - 1;
  const auto logits = dca::forward_f64(ckpt, window.first(static_cast<size_t>(l)),
                                       AttentionMode::Vanilla);
  double nll = 0.0;
  for (int64_t i = 0; i < l; ++i) {
    const double* row = logits.row(i);
    double mx = row[0];
    for (int64_t t = 1; t < logits.cols; ++t) mx = std::max(mx, row[t]);
    double lse = 0.0;
    for (int64_t t = 0; t < logits.cols; ++t) lse += std::exp(row[t] - mx);
    nll += mx + std::log(lse) - row[window[static_cast<size_t>(i) + 1]];
  }
  return nll / static_cast<double>(l);
}

}  // namespace

TEST_CASE("config validation names the failing field") {
  CHECK(!dca::validate_config(small_config()));
  ModelConfig cfg = small_config();
  cfg.vocab = 100;
  CHECK(*dca::validate_config(cfg) == "vocab must be 256");
  cfg = small_config();
  cfg.heads = 3;
  CHECK(*dca::validate_config(cfg) == "model_dim must be divisible by heads");
  cfg = small_config();
  cfg.model_dim = 6;
  cfg.heads = 2;
  CHECK(*dca::validate_config(cfg) == "head_dim must be even");
  cfg = small_config();
  cfg.train_context = 1;
  CHECK(*dca::validate_config(cfg) == "train_context must be >= 2");
}

TEST_CASE("initialization is a pure function of the seed") {
  const ModelCheckpoint a = dca::init_model(small_config(7));
  const ModelCheckpoint b = dca::init_model(small_config(7));
  const ModelCheckpoint c = dca::init_model(small_config(8));
  CHECK(flatten(a) == flatten(b));
  CHECK(flatten(a) != flatten(c));
}

TEST_CASE("parameter count matches the closed form") {
  for (uint64_t seed : {0, 1}) {
    const ModelConfig cfg = small_config(seed);
    const ModelCheckpoint ckpt = dca::init_model(cfg);
    CHECK(static_cast<int64_t>(flatten(ckpt).size()) == dca::parameter_count(cfg));
  }
  ModelConfig big;
  CHECK(dca::parameter_count(big) == 853120);
}

TEST_CASE("forward rejects empty input and missing config") {
  const ModelCheckpoint ckpt = dca::init_model(small_config());
  CHECK_THROWS_WITH_AS(dca::forward(ckpt, {}, AttentionMode::Vanilla),
                       "tokens must be nonempty", std::invalid_argument);
  const auto tokens = bytes_of("abc");
  CHECK_THROWS_WITH_AS(dca::forward(ckpt, tokens, AttentionMode::FullDCA),
                       "mode requires a ChunkConfig", std::invalid_argument);
}

TEST_CASE("fixed seed and input reproduce the stored golden logits") {
  // Golden values from the double-precision forward with the brute-force
  // attention engine on this exact configuration; regenerate through
  // forward_f64(..., AttentionEngine::Oracle) if the init scheme changes.
  const ModelCheckpoint ckpt = dca::init_model(small_config(42));
  const auto tokens = bytes_of("the quick brown ");
  REQUIRE(tokens.size() == 16);
  const auto logits = dca::forward(ckpt, tokens, AttentionMode::Vanilla);
  REQUIRE(logits.rows == 16);
  REQUIRE(logits.cols == 256);

  const double row15[8] = {0.52288199, 1.34179133,  0.57447976, -0.03362027,
                           -0.34780467, 0.26163515, 0.77152108, 0.19453420};
  for (int t = 0; t < 8; ++t) CHECK(std::abs(double(logits(15, t)) - row15[t]) < 1e-4);
  const double row0[4] = {0.03552755, 0.62894529, 0.73584683, 0.57432682};
  for (int t = 0; t < 4; ++t) CHECK(std::abs(double(logits(0, t)) - row0[t]) < 1e-4);

  const auto oracle = dca::forward_f64(ckpt, tokens, AttentionMode::Vanilla, nullptr,
                                       dca::AttentionEngine::Oracle);
  for (int t = 0; t < 8; ++t) CHECK(std::abs(oracle(15, t) - row15[t]) < 1e-7);
}

TEST_CASE("float forward stays within tolerance of the double oracle path") {
  std::mt19937_64 rng(21);
  const ModelCheckpoint ckpt = dca::init_model(small_config(3));
  const ChunkConfig cfg{12, 16, 4};
  const auto tokens = random_bytes(rng, 24);
  for (AttentionMode mode : {AttentionMode::Vanilla, AttentionMode::PI, AttentionMode::FullDCA}) {
    const auto fast = dca::forward(ckpt, tokens, mode, &cfg);
    const auto gold = dca::forward_f64(ckpt, tokens, mode, &cfg, dca::AttentionEngine::Oracle);
    double worst = 0;
    for (size_t i = 0; i < gold.data.size(); ++i)
      worst = std::max(worst, std::abs(gold.data[i] - double(fast.data[i])));
    REQUIRE(worst < 1e-4);
  }
}

TEST_CASE("full dca forward reduces to vanilla inside one chunk") {
  std::mt19937_64 rng(22);
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const ModelCheckpoint ckpt = dca::init_model(small_config(seed));
    const ChunkConfig cfg{12, 16, 4};
    const auto tokens = random_bytes(rng, 10);
    const auto a = dca::forward(ckpt, tokens, AttentionMode::FullDCA, &cfg);
    const auto b = dca::forward(ckpt, tokens, AttentionMode::Vanilla);
    double worst = 0;
    for (size_t i = 0; i < a.data.size(); ++i)
      worst = std::max(worst, std::abs(double(a.data[i]) - double(b.data[i])));
    REQUIRE(worst < 1e-4);
  }
}

TEST_CASE("logits are causal in the input suffix") {
  std::mt19937_64 rng(23);
  const ModelCheckpoint ckpt = dca::init_model(small_config(4));
  const ChunkConfig cfg{6, 16, 4};
  auto tokens = random_bytes(rng, 20);
  for (AttentionMode mode : {AttentionMode::Vanilla, AttentionMode::FullDCA}) {
    const auto base = dca::forward(ckpt, tokens, mode, &cfg);
    auto poked = tokens;
    for (size_t i = 13; i < poked.size(); ++i) poked[i] = static_cast<uint8_t>(poked[i] + 1);
    const auto after = dca::forward(ckpt, poked, mode, &cfg);
    for (int64_t i = 0; i < 13; ++i)
      for (int64_t t = 0; t < 256; ++t) REQUIRE(after(i, t) == base(i, t));
  }
}

TEST_CASE("trainer's fused forward matches the public forward") {
  std::mt19937_64 rng(24);
  const ModelCheckpoint ckpt = dca::init_model(small_config(5));
  const auto tokens = random_bytes(rng, 16);
  const auto fused = dca::train_path_logits(ckpt, tokens);
  const auto plain = dca::forward(ckpt, tokens, AttentionMode::Vanilla);
  REQUIRE(fused.rows == plain.rows);
  double worst = 0;
  for (size_t i = 0; i < fused.data.size(); ++i)
    worst = std::max(worst, std::abs(double(fused.data[i]) - double(plain.data[i])));
  CHECK(worst < 1e-5);
}

TEST_CASE("analytic gradients agree with central finite differences") {
  std::mt19937_64 rng(25);
  ModelConfig cfg;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.train_context = 8;
  cfg.seed = 9;
  ModelCheckpoint ckpt = dca::init_model(cfg);
  const auto window = random_bytes(rng, 9);

  const auto [loss, grad] = dca::loss_and_gradient(ckpt, window);
  CHECK(loss == doctest::Approx(mean_nll_f64(ckpt, window)).epsilon(1e-5));
  REQUIRE(static_cast<int64_t>(grad.size()) == dca::parameter_count(cfg));

  // Flat parameter order matches flatten(); walk a spread of indices and
  // compare against (L(th+h) - L(th-h)) / 2h on the double forward.
  auto tensors = [&](ModelCheckpoint& m) {
    std::vector<float*> ptrs;
    auto push = [&](std::vector<float>& v) {
      for (auto& x : v) ptrs.push_back(&x);
    };
    push(m.embedding.data);
    for (auto& layer : m.layers) {
      push(layer.attn_norm);
      push(layer.wq.data);
      push(layer.wk.data);
      push(layer.wv.data);
      push(layer.wo.data);
      push(layer.ffn_norm);
      push(layer.w1.data);
      push(layer.w2.data);
    }
    push(m.final_norm);
    push(m.output.data);
    return ptrs;
  };
  auto ptrs = tensors(ckpt);
  REQUIRE(ptrs.size() == grad.size());

  const double h = 1e-3;
  const size_t step = grad.size() / 37;
  for (size_t idx = 1; idx < grad.size(); idx += step) {
    const float saved = *ptrs[idx];
    *ptrs[idx] = static_cast<float>(saved + h);
    const double up = mean_nll_f64(ckpt, window);
    *ptrs[idx] = static_cast<float>(saved - h);
    const double down = mean_nll_f64(ckpt, window);
    *ptrs[idx] = saved;
    const double fd = (up - down) / (2 * h);
    const double analytic = grad[idx];
    REQUIRE(std::abs(fd - analytic) <= 1e-3 + 5e-3 * std::abs(fd));
  }
}

TEST_CASE("zero training steps return the checkpoint unchanged") {
  std::mt19937_64 rng(26);
  const ModelCheckpoint ckpt = dca::init_model(small_config(6));
  const auto corpus = random_bytes(rng, 400);
  dca::TrainOptions opts;
  opts.steps = 0;
  const ModelCheckpoint out = dca::train(ckpt, corpus, opts);
  CHECK(flatten(out) == flatten(ckpt));
  CHECK(out.step_count == ckpt.step_count);
}

TEST_CASE("training is deterministic in the seed") {
  std::mt19937_64 rng(27);
  const auto corpus = random_bytes(rng, 600);
  dca::TrainOptions opts;
  opts.steps = 5;
  opts.batch = 2;
  const ModelCheckpoint a = dca::train(dca::init_model(small_config(7)), corpus, opts);
  const ModelCheckpoint b = dca::train(dca::init_model(small_config(7)), corpus, opts);
  CHECK(flatten(a) == flatten(b));
  CHECK(a.step_count == 5);
}

TEST_CASE("training reduces held-out perplexity well below init") {
  const auto corpus = dca::make_sample_corpus(1 << 16, 11);
  const std::span<const uint8_t> all(corpus);
  const auto train_part = all.first(corpus.size() - 512);
  const auto held_out = all.last(512);

  const ModelCheckpoint init = dca::init_model(small_config(1));
  dca::TrainOptions opts;
  opts.steps = 60;
  opts.batch = 2;
  std::vector<double> losses;
  const ModelCheckpoint trained = dca::train(
      init, train_part, opts, [&](int64_t, double loss) { losses.push_back(loss); });

  const double before = dca::sequence_nll(init, held_out, AttentionMode::Vanilla);
  const double after = dca::sequence_nll(trained, held_out, AttentionMode::Vanilla);
  CHECK(std::exp(after) < 0.7 * std::exp(before));
  CHECK(!losses.empty());
}

TEST_CASE("training rejects bad options and short corpora") {
  std::mt19937_64 rng(28);
  const ModelCheckpoint ckpt = dca::init_model(small_config());
  const auto corpus = random_bytes(rng, 100);
  dca::TrainOptions opts;
  opts.steps = -1;
  CHECK_THROWS_WITH_AS(dca::train(ckpt, corpus, opts), "steps must be >= 0",
                       std::invalid_argument);
  opts = {};
  opts.batch = 0;
  CHECK_THROWS_WITH_AS(dca::train(ckpt, corpus, opts), "batch must be >= 1",
                       std::invalid_argument);
  opts = {};
  opts.seq_len = 100;
  CHECK_THROWS_WITH_AS(dca::train(ckpt, corpus, opts), "seq_len must be in [2, train_context]",
                       std::invalid_argument);
  opts = {};
  const auto tiny = random_bytes(rng, 16);
  CHECK_THROWS_WITH_AS(dca::train(ckpt, tiny, opts), "corpus too short", std::invalid_argument);
}

TEST_CASE("checkpoints round-trip byte for byte") {
  std::mt19937_64 rng(29);
  ModelCheckpoint ckpt = dca::init_model(small_config(12));
  ckpt.step_count = 77;
  ckpt.corpus_fingerprint = 0xfeedfacecafebeefULL;

  TempFile a("dca_test_ckpt_a.bin");
  TempFile b("dca_test_ckpt_b.bin");
  dca::save_checkpoint(ckpt, a.path);
  const ModelCheckpoint loaded = dca::load_checkpoint(a.path);
  CHECK(flatten(loaded) == flatten(ckpt));
  CHECK(loaded.step_count == 77);
  CHECK(loaded.corpus_fingerprint == 0xfeedfacecafebeefULL);
  CHECK(loaded.config.seed == 12);

  dca::save_checkpoint(loaded, b.path);
  std::ifstream fa(a.path, std::ios::binary), fb(b.path, std::ios::binary);
  const std::vector<char> bytes_a((std::istreambuf_iterator<char>(fa)),
                                  std::istreambuf_iterator<char>());
  const std::vector<char> bytes_b((std::istreambuf_iterator<char>(fb)),
                                  std::istreambuf_iterator<char>());
  CHECK(bytes_a == bytes_b);
}

TEST_CASE("corrupt checkpoints are rejected with named errors") {
  const ModelCheckpoint ckpt = dca::init_model(small_config(13));
  TempFile good("dca_test_ckpt_good.bin");
  dca::save_checkpoint(ckpt, good.path);

  std::ifstream in(good.path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();

  auto write_variant = [&](const std::string& path, auto mutate) {
    std::vector<char> copy = bytes;
    mutate(copy);
    std::ofstream out(path, std::ios::binary);
    out.write(copy.data(), static_cast<std::streamsize>(copy.size()));
  };

  TempFile bad_magic("dca_test_ckpt_magic.bin");
  write_variant(bad_magic.path, [](auto& c) { c[0] = 'X'; });
  CHECK_THROWS_WITH_AS(dca::load_checkpoint(bad_magic.path), "bad magic", std::runtime_error);

  TempFile bad_version("dca_test_ckpt_version.bin");
  write_variant(bad_version.path, [](auto& c) { c[4] = 9; });
  CHECK_THROWS_WITH_AS(dca::load_checkpoint(bad_version.path),
                       "version mismatch: file has 9, expected 1", std::runtime_error);

  TempFile truncated("dca_test_ckpt_trunc.bin");
  write_variant(truncated.path, [](auto& c) { c.resize(c.size() / 2); });
  CHECK_THROWS_WITH_AS(dca::load_checkpoint(truncated.path), "truncated checkpoint",
                       std::runtime_error);

  TempFile trailing("dca_test_ckpt_trail.bin");
  write_variant(trailing.path, [](auto& c) { c.push_back('\0'); });
  CHECK_THROWS_WITH_AS(dca::load_checkpoint(trailing.path),
                       "trailing bytes after checkpoint payload", std::runtime_error);

  CHECK_THROWS_AS(dca::load_checkpoint("/nonexistent/dir/x.bin"), std::runtime_error);
}

TEST_CASE("decode sessions reproduce the batch forward step by step") {
  std::mt19937_64 rng(30);
  const ModelCheckpoint ckpt = dca::init_model(small_config(14));
  const ChunkConfig cfg{12, 16, 4};
  const auto prompt = random_bytes(rng, 20);

  for (AttentionMode mode : {AttentionMode::Vanilla, AttentionMode::FullDCA}) {
    const ChunkConfig* cfg_ptr = dca::mode_needs_config(mode) ? &cfg : nullptr;
    dca::DecodeSession session(ckpt, mode, cfg_ptr);
    session.prefill(prompt);
    REQUIRE(session.length() == 20);

    std::vector<uint8_t> tokens = prompt;
    for (int step = 0; step < 6; ++step) {
      const auto full = dca::forward(ckpt, tokens, mode, cfg_ptr);
      const float* last = full.row(full.rows - 1);
      const auto& logits = session.last_logits();
      double worst = 0;
      for (int64_t t = 0; t < 256; ++t)
        worst = std::max(worst, std::abs(double(logits[t]) - double(last[t])));
      REQUIRE(worst < 1e-4);

      int64_t best = 0;
      for (int64_t t = 1; t < 256; ++t)
        if (last[t] > last[best]) best = t;
      const uint8_t produced = session.greedy_step();
      REQUIRE(produced == static_cast<uint8_t>(best));
      tokens.push_back(produced);
    }
  }
}

TEST_CASE("greedy decoding before prefill is a usage error") {
  const ModelCheckpoint ckpt = dca::init_model(small_config(15));
  dca::DecodeSession session(ckpt, AttentionMode::Vanilla);
  CHECK_THROWS_WITH_AS(session.greedy_step(), "greedy_step before prefill", std::logic_error);
}
