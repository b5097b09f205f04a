// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace dca {

/// Chunking parameters shared by every position schedule.
///
/// chunk_size:    tokens per chunk, must fit strictly inside the pretraining
///                window.
/// pretrain_ctx:  context length the model was trained with; remapped
///                position indices never leave [0, pretrain_ctx - 1].
/// local_window:  number of neighboring tokens whose exact relative distance
///                is preserved across a chunk boundary.
struct ChunkConfig {
  int64_t chunk_size = 0;
  int64_t pretrain_ctx = 0;
  int64_t local_window = 0;

  /// Config with the default local window pretrain_ctx - chunk_size.
  static ChunkConfig with_default_window(int64_t chunk_size, int64_t pretrain_ctx);
};

/// Default local window: the slack between pretraining window and chunk.
int64_t default_window(int64_t chunk_size, int64_t pretrain_ctx);

/// nullopt when valid, otherwise a message naming the violated constraint.
std::optional<std::string> validate_config(const ChunkConfig& cfg);

/// Throws std::invalid_argument with the validate_config message.
void require_valid(const ChunkConfig& cfg);

enum class ScheduleKind { Keys, IntraQ, InterQ, SuccQ, Vanilla, PIScaled };

/// A per-token list of position indices handed to the rotary embedding.
/// Integer-valued for every kind except PIScaled.
struct PositionSchedule {
  ScheduleKind kind = ScheduleKind::Vanilla;
  std::variant<std::vector<int64_t>, std::vector<double>> values;

  int64_t size() const;
  bool is_real() const { return std::holds_alternative<std::vector<double>>(values); }

  /// Position index i as a real number, whichever representation is stored.
  double pos(int64_t i) const;

  const std::vector<int64_t>& ints() const { return std::get<std::vector<int64_t>>(values); }
  const std::vector<double>& reals() const { return std::get<std::vector<double>>(values); }
};

/// Key positions: [0..len-1] mod chunk_size.
PositionSchedule key_positions(int64_t len, int64_t chunk_size);

/// Query positions for intra-chunk attention; identical to key_positions.
PositionSchedule intra_query_positions(int64_t len, int64_t chunk_size);

/// Query positions for inter-chunk attention: the constant pretrain_ctx - 1.
PositionSchedule inter_query_positions(int64_t len, int64_t pretrain_ctx);

/// Query positions for successive-chunk attention: within each chunk the
/// first local_window offsets map to chunk_size..chunk_size+local_window-1,
/// the rest to pretrain_ctx - 1.
PositionSchedule succ_query_positions(int64_t len, const ChunkConfig& cfg);

/// Plain RoPE positions [0..len-1].
PositionSchedule vanilla_positions(int64_t len);

/// Scaling factor used by position interpolation: max(1, ceil(len / ctx)).
int64_t pi_scale_factor(int64_t len, int64_t pretrain_ctx);

/// Position-interpolation schedule: i / pi_scale_factor(len, ctx), real-valued.
PositionSchedule pi_scaled_positions(int64_t len, int64_t pretrain_ctx);

/// Lower-triangular matrix of effective relative distances. Entries with
/// j > i are stored but meaningless.
struct RelPosMatrix {
  int64_t side = 0;
  std::vector<int64_t> entries;

  RelPosMatrix() = default;
  explicit RelPosMatrix(int64_t n) : side(n), entries(static_cast<size_t>(n * n), 0) {}

  int64_t at(int64_t i, int64_t j) const { return entries[i * side + j]; }
  int64_t& at(int64_t i, int64_t j) { return entries[i * side + j]; }
};

/// Effective query position for query i attending key j: intra, successive
/// or inter schedule value selected by chunk distance.
int64_t query_position_for(int64_t i, int64_t j, const ChunkConfig& cfg);

/// The piecewise relative-position matrix: M[i][j] = Pq_region(i,j) - Pk[j].
RelPosMatrix relative_position_matrix(int64_t len, const ChunkConfig& cfg);

}  // namespace dca
