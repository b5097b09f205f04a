// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dca/attention.hpp"
#include "dca/matrix.hpp"
#include "dca/schedules.hpp"

namespace dca {

/// Byte-level decoder-only transformer, sized for CPU minutes. The attention
/// mode is a forward-time argument, never baked into the weights: training is
/// always Vanilla at length <= train_context, everything else is inference.
struct ModelConfig {
  int64_t vocab = 256;
  int64_t model_dim = 128;
  int64_t heads = 4;
  int64_t layers = 4;
  int64_t train_context = 128;
  uint64_t seed = 0;

  int64_t head_dim() const { return model_dim / heads; }
  int64_t ffn_dim() const { return 4 * model_dim; }
};

std::optional<std::string> validate_config(const ModelConfig& cfg);
void require_valid(const ModelConfig& cfg);

/// Closed-form parameter count for cfg (embedding + blocks + final norm + head).
int64_t parameter_count(const ModelConfig& cfg);

/// One pre-norm block: x += attn(rmsnorm(x)); x += ffn(rmsnorm(x)), SiLU 4x ffn.
struct LayerParams {
  std::vector<float> attn_norm;
  MatF wq, wk, wv, wo;
  std::vector<float> ffn_norm;
  MatF w1, w2;
};

struct ModelCheckpoint {
  ModelConfig config;
  int64_t step_count = 0;
  uint64_t corpus_fingerprint = 0;

  MatF embedding;
  std::vector<LayerParams> layers;
  std::vector<float> final_norm;
  MatF output;
};

/// Deterministic scaled-uniform init: every weight drawn U(-a, a) with
/// a = 1/sqrt(fan_in) from one seeded stream (raw generator bits, so the
/// result does not depend on a library's distribution internals); norm gains
/// start at 1.
ModelCheckpoint init_model(const ModelConfig& cfg);

/// Next-token logits, one row per input position. cfg is required for modes
/// that remap positions. Deterministic given (ckpt, tokens, mode, cfg).
RowMatrix<float> forward(const ModelCheckpoint& ckpt, std::span<const uint8_t> tokens,
                         AttentionMode mode, const ChunkConfig* cfg = nullptr,
                         AttentionEngine engine = AttentionEngine::Fast);

/// Same network evaluated end to end in double; the reference path golden
/// tests and gradient checks compare against.
RowMatrix<double> forward_f64(const ModelCheckpoint& ckpt, std::span<const uint8_t> tokens,
                              AttentionMode mode, const ChunkConfig* cfg = nullptr,
                              AttentionEngine engine = AttentionEngine::Fast);

struct TrainOptions {
  int64_t steps = 2000;
  int64_t batch = 4;
  int64_t seq_len = 0;  // 0 means train_context
  double lr = 2e-3;
  int64_t warmup_steps = 50;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t log_every = 100;
};

/// Adam on mean next-byte cross-entropy over seeded corpus windows. Attention
/// is Vanilla and seq_len <= train_context; the long-context behavior under
/// the chunked modes is never trained in. Deterministic given (ckpt, corpus,
/// opts). on_log, when set, receives (step, mean batch loss) every log_every
/// steps and at the last step.
ModelCheckpoint train(const ModelCheckpoint& ckpt, std::span<const uint8_t> corpus,
                      const TrainOptions& opts,
                      const std::function<void(int64_t, double)>& on_log = nullptr);

/// The trainer's fused forward (the one that caches activations for backward),
/// exposed so tests can pin it to forward(). Vanilla mode, float math.
RowMatrix<float> train_path_logits(const ModelCheckpoint& ckpt, std::span<const uint8_t> tokens);

/// Mean next-byte NLL of one window (window.size() - 1 scored tokens) and its
/// gradient, flattened in checkpoint tensor order: embedding, then per layer
/// attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2, then final_norm, output.
/// The seam finite-difference gradient tests drive.
std::pair<double, std::vector<float>> loss_and_gradient(const ModelCheckpoint& ckpt,
                                                        std::span<const uint8_t> window);

/// Mean cross-entropy (nats per byte) of tokens[1..] given logits from
/// forward(); the training objective measured on one window.
double sequence_nll(const ModelCheckpoint& ckpt, std::span<const uint8_t> tokens,
                    AttentionMode mode, const ChunkConfig* cfg = nullptr);

/// Little-endian container: magic "DCA1", version word, config, step count,
/// corpus fingerprint, then a named shape table followed by the raw float
/// payloads in table order. Saves are atomic (temp file + rename).
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

/// Incremental decoding over raw (unrotated) per-layer KV caches: prefill
/// once, then one token per step. Positions are fixed per cache index, so
/// chunked modes never re-rotate history.
class DecodeSession {
 public:
  DecodeSession(const ModelCheckpoint& ckpt, AttentionMode mode, const ChunkConfig* cfg = nullptr);

  /// Runs the prompt through the block forward, filling the caches; keeps the
  /// last position's logits.
  void prefill(std::span<const uint8_t> tokens);
  /// Appends argmax(last logits) and advances one step. Needs a prefill first.
  uint8_t greedy_step();

  const std::vector<float>& last_logits() const { return last_logits_; }
  int64_t length() const { return len_; }

 private:
  void step_token(uint8_t token);

  const ModelCheckpoint& ckpt_;
  AttentionMode mode_;
  ChunkConfig cfg_{};
  bool has_cfg_ = false;
  RotaryTable table_;
  std::vector<MatF> k_cache_, v_cache_;  // per layer, rows = tokens seen
  std::vector<float> last_logits_;
  int64_t len_ = 0;
};

}  // namespace dca
