// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#include "dca/schedules.hpp"

#include <stdexcept>

namespace dca {

ChunkConfig ChunkConfig::with_default_window(int64_t chunk_size, int64_t pretrain_ctx) {
  return ChunkConfig{chunk_size, pretrain_ctx, default_window(chunk_size, pretrain_ctx)};
}

int64_t default_window(int64_t chunk_size, int64_t pretrain_ctx) {
  ChunkConfig probe{chunk_size, pretrain_ctx, 0};
  if (auto err = validate_config(probe)) throw std::invalid_argument(*err);
  return pretrain_ctx - chunk_size;
}

std::optional<std::string> validate_config(const ChunkConfig& cfg) {
  if (cfg.chunk_size <= 0) return "s must be > 0";
  if (cfg.chunk_size >= cfg.pretrain_ctx) return "s must be < c";
  if (cfg.local_window < 0) return "w must be >= 0";
  if (cfg.local_window > cfg.pretrain_ctx - cfg.chunk_size) return "w must be <= c - s";
  if (cfg.local_window > cfg.chunk_size) return "w must be <= s";
  return std::nullopt;
}

void require_valid(const ChunkConfig& cfg) {
  if (auto err = validate_config(cfg)) throw std::invalid_argument(*err);
}

int64_t PositionSchedule::size() const {
  return std::visit([](const auto& v) { return static_cast<int64_t>(v.size()); }, values);
}

double PositionSchedule::pos(int64_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, values);
}

namespace {

void check_len(int64_t len) {
  if (len < 1) throw std::invalid_argument("l must be >= 1");
}

}  // namespace

PositionSchedule key_positions(int64_t len, int64_t chunk_size) {
  check_len(len);
  if (chunk_size < 1) throw std::invalid_argument("s must be > 0");
  std::vector<int64_t> p(len);
  for (int64_t i = 0; i < len; ++i) p[i] = i % chunk_size;
  return {ScheduleKind::Keys, std::move(p)};
}

PositionSchedule intra_query_positions(int64_t len, int64_t chunk_size) {
  auto sched = key_positions(len, chunk_size);
  sched.kind = ScheduleKind::IntraQ;
  return sched;
}

PositionSchedule inter_query_positions(int64_t len, int64_t pretrain_ctx) {
  check_len(len);
  if (pretrain_ctx < 1) throw std::invalid_argument("c must be > 0");
  return {ScheduleKind::InterQ, std::vector<int64_t>(len, pretrain_ctx - 1)};
}

PositionSchedule succ_query_positions(int64_t len, const ChunkConfig& cfg) {
  check_len(len);
  require_valid(cfg);
  std::vector<int64_t> p(len);
  for (int64_t i = 0; i < len; ++i) {
    const int64_t offset = i % cfg.chunk_size;
    p[i] = offset < cfg.local_window ? cfg.chunk_size + offset : cfg.pretrain_ctx - 1;
  }
  return {ScheduleKind::SuccQ, std::move(p)};
}

PositionSchedule vanilla_positions(int64_t len) {
  check_len(len);
  std::vector<int64_t> p(len);
  for (int64_t i = 0; i < len; ++i) p[i] = i;
  return {ScheduleKind::Vanilla, std::move(p)};
}

int64_t pi_scale_factor(int64_t len, int64_t pretrain_ctx) {
  check_len(len);
  if (pretrain_ctx < 1) throw std::invalid_argument("c must be > 0");
  const int64_t factor = (len + pretrain_ctx - 1) / pretrain_ctx;
  return factor < 1 ? 1 : factor;
}

PositionSchedule pi_scaled_positions(int64_t len, int64_t pretrain_ctx) {
  const double factor = static_cast<double>(pi_scale_factor(len, pretrain_ctx));
  std::vector<double> p(len);
  for (int64_t i = 0; i < len; ++i) p[i] = static_cast<double>(i) / factor;
  return {ScheduleKind::PIScaled, std::move(p)};
}

int64_t query_position_for(int64_t i, int64_t j, const ChunkConfig& cfg) {
  const int64_t dist = i / cfg.chunk_size - j / cfg.chunk_size;
  if (dist == 0) return i % cfg.chunk_size;
  if (dist == 1) {
    const int64_t offset = i % cfg.chunk_size;
    return offset < cfg.local_window ? cfg.chunk_size + offset : cfg.pretrain_ctx - 1;
  }
  return cfg.pretrain_ctx - 1;
}

RelPosMatrix relative_position_matrix(int64_t len, const ChunkConfig& cfg) {
  check_len(len);
  require_valid(cfg);
  RelPosMatrix m(len);
  for (int64_t i = 0; i < len; ++i) {
    for (int64_t j = 0; j <= i; ++j) {
      m.at(i, j) = query_position_for(i, j, cfg) - j % cfg.chunk_size;
    }
  }
  return m;
}

}  // namespace dca
