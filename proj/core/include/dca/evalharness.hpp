// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dca/toy_model.hpp"

namespace dca {

/// Threads parallel_for may use: DCA_THREADS when set (floored at 1), else 1.
int64_t thread_budget();

/// Runs fn(0..n-1), sharded across up to thread_budget() threads. Each index
/// must write only its own slot of any shared output so results do not depend
/// on the schedule.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

uint64_t fnv1a64(std::span<const uint8_t> bytes);

/// Deterministic English-like sample text: seeded sentences over a fixed
/// vocabulary, zipf-weighted, grouped into paragraphs. Stands in for a
/// public-domain corpus so runs need no external data.
std::vector<uint8_t> make_sample_corpus(int64_t n_bytes, uint64_t seed);

// ---------------------------------------------------------------------------
// Sliding-window perplexity
// ---------------------------------------------------------------------------

/// Anything that maps a token window to next-token logits. The harness is
/// written against this instead of the model so its math can be pinned with
/// hand-built scorers.
class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;
  virtual int64_t vocab() const = 0;
  virtual RowMatrix<float> logits(std::span<const uint8_t> tokens) const = 0;
};

class ModelScorer final : public SequenceScorer {
 public:
  ModelScorer(const ModelCheckpoint& ckpt, AttentionMode mode, const ChunkConfig* cfg = nullptr);
  int64_t vocab() const override { return ckpt_.config.vocab; }
  RowMatrix<float> logits(std::span<const uint8_t> tokens) const override;

 private:
  const ModelCheckpoint& ckpt_;
  AttentionMode mode_;
  ChunkConfig cfg_{};
  bool has_cfg_ = false;
};

/// Emits all-zero logits: the uniform distribution, whose perplexity is
/// exactly the vocab size.
class UniformScorer final : public SequenceScorer {
 public:
  explicit UniformScorer(int64_t vocab = 256) : vocab_(vocab) {}
  int64_t vocab() const override { return vocab_; }
  RowMatrix<float> logits(std::span<const uint8_t> tokens) const override {
    return RowMatrix<float>(static_cast<int64_t>(tokens.size()), vocab_);
  }

 private:
  int64_t vocab_;
};

struct PPLResult {
  double ppl = 0.0;
  int64_t tokens_scored = 0;
  /// Negative log-likelihood per scored token, in position order (positions
  /// 1..len-1). Kept so causality can be audited token by token.
  std::vector<double> token_nll;
};

/// exp of mean NLL where every position from 1 to len-1 is scored exactly
/// once, each with up to eval_len preceding tokens of context: the first
/// window feeds tokens [0, eval_len), every later window feeds the
/// eval_len + 1 tokens ending at its last scored position and scores the
/// stride newest ones. Requires 2 <= eval_len, 1 <= stride <= eval_len, and
/// tokens.size() >= eval_len. Windows are sharded by parallel_for; the
/// reduction order is fixed.
PPLResult sliding_window_ppl(const SequenceScorer& scorer, std::span<const uint8_t> tokens,
                             int64_t eval_len, int64_t stride);

// ---------------------------------------------------------------------------
// Passkey retrieval
// ---------------------------------------------------------------------------

struct PasskeyCase {
  std::string passkey;  // 5 decimal digits, appears exactly once in prompt
  double depth = 0.0;   // requested placement as a fraction of the filler
  int64_t total_len = 0;
  std::vector<uint8_t> prompt;
  std::string expected;  // the answer continuation, equal to passkey
};

/// Builds one prompt of exactly total_len bytes: instruction preamble, neutral
/// filler, the single passkey sentence at the requested depth, and the final
/// question. Deterministic given the rng state.
PasskeyCase gen_passkey_case(int64_t total_len, double depth, std::mt19937_64& rng);

/// Anything that continues a prompt by count tokens.
class TokenGenerator {
 public:
  virtual ~TokenGenerator() = default;
  virtual std::vector<uint8_t> generate(std::span<const uint8_t> prompt, int64_t count) = 0;
};

class ModelGenerator final : public TokenGenerator {
 public:
  ModelGenerator(const ModelCheckpoint& ckpt, AttentionMode mode,
                 const ChunkConfig* cfg = nullptr);
  std::vector<uint8_t> generate(std::span<const uint8_t> prompt, int64_t count) override;

 private:
  const ModelCheckpoint& ckpt_;
  AttentionMode mode_;
  ChunkConfig cfg_{};
  bool has_cfg_ = false;
};

/// Sanity stub that answers by copying the first 5-digit run it can find in
/// the prompt. Scores 1.0 by construction.
class CopyOracleGenerator final : public TokenGenerator {
 public:
  std::vector<uint8_t> generate(std::span<const uint8_t> prompt, int64_t count) override;
};

/// Sanity stub that answers with a fixed byte. Scores 0.0 against any digit
/// key when the byte is not a digit.
class ConstantGenerator final : public TokenGenerator {
 public:
  explicit ConstantGenerator(uint8_t byte) : byte_(byte) {}
  std::vector<uint8_t> generate(std::span<const uint8_t> prompt, int64_t count) override;

 private:
  uint8_t byte_;
};

struct PasskeyCell {
  int64_t total_len = 0;
  double depth = 0.0;
  int64_t trials = 0;
  int64_t hits = 0;
  double accuracy() const { return trials ? static_cast<double>(hits) / trials : 0.0; }
};

struct PasskeyReport {
  double overall = 0.0;
  /// One cell per (total_len, depth) pair seen, ordered by first appearance.
  std::vector<PasskeyCell> cells;
};

/// Exact-match accuracy of gen on the cases: generate expected.size() tokens
/// after each prompt, compare byte for byte. Cases run under parallel_for;
/// aggregation order is fixed.
PasskeyReport passkey_accuracy(TokenGenerator& gen, std::span<const PasskeyCase> cases);

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct AblationRow {
  AttentionMode mode;
  int64_t length = 0;
  double ppl = 0.0;
  std::optional<double> passkey;  // unset when passkey_trials == 0
};

/// One row per (mode in {IntraOnly, IntraInter, FullDCA}, length): sliding
/// window perplexity on eval_tokens at eval_len = length, plus passkey
/// accuracy over passkey_trials cases at depths {0, 0.5, 1} when trials > 0.
std::vector<AblationRow> ablation_run(const ModelCheckpoint& ckpt,
                                      std::span<const uint8_t> eval_tokens,
                                      std::span<const int64_t> lengths, const ChunkConfig& cfg,
                                      int64_t stride, int64_t passkey_trials, uint64_t seed);

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// Writes "# <config_comment>", the header row, then data rows, atomically
/// (temp file + rename).
void write_csv(const std::string& path, const std::string& config_comment,
               const std::string& header, std::span<const std::string> rows);

struct PPLCsvRow {
  std::string mode;
  int64_t length = 0;
  double ppl = 0.0;
};

struct PasskeyCsvRow {
  std::string mode;
  int64_t length = 0;
  double depth = 0.0;
  double accuracy = 0.0;
};

void write_ppl_csv(const std::string& path, const std::string& config_comment,
                   std::span<const PPLCsvRow> rows);
void write_passkey_csv(const std::string& path, const std::string& config_comment,
                       std::span<const PasskeyCsvRow> rows);
void write_ablation_csv(const std::string& path, const std::string& config_comment,
                        std::span<const AblationRow> rows);

}  // namespace dca
