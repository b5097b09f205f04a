// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#include "dca/attention.hpp"

#include <algorithm>

namespace dca {

bool is_chunked_mode(AttentionMode mode) {
  return mode == AttentionMode::IntraOnly || mode == AttentionMode::IntraInter ||
         mode == AttentionMode::FullDCA;
}

bool mode_needs_config(AttentionMode mode) {
  return is_chunked_mode(mode) || mode == AttentionMode::PI;
}

std::string_view mode_name(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::Vanilla: return "vanilla";
    case AttentionMode::PI: return "pi";
    case AttentionMode::IntraOnly: return "intra";
    case AttentionMode::IntraInter: return "intra-inter";
    case AttentionMode::FullDCA: return "dca";
  }
  return "?";
}

std::optional<AttentionMode> parse_mode(std::string_view name) {
  for (AttentionMode m : {AttentionMode::Vanilla, AttentionMode::PI, AttentionMode::IntraOnly,
                          AttentionMode::IntraInter, AttentionMode::FullDCA})
    if (name == mode_name(m)) return m;
  return std::nullopt;
}

std::string valid_mode_names() { return "vanilla, pi, intra, intra-inter, dca"; }

std::vector<double> merge_partials(std::span<const AttentionPartial> parts) {
  double global_max = -std::numeric_limits<double>::infinity();
  size_t dim = 0;
  for (const auto& p : parts) {
    dim = std::max(dim, p.weighted.size());
    if (!p.empty()) global_max = std::max(global_max, p.max_score);
  }
  if (global_max == -std::numeric_limits<double>::infinity())
    throw std::runtime_error("no attended keys");

  std::vector<double> out(dim, 0.0);
  double mass = 0.0;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    const double rescale = std::exp(p.max_score - global_max);
    mass += p.mass * rescale;
    for (size_t t = 0; t < p.weighted.size(); ++t) out[t] += p.weighted[t] * rescale;
  }
  for (double& x : out) x /= mass;
  return out;
}

PassRanges dca_pass_ranges(int64_t query_index, int64_t chunk_size) {
  const int64_t n = query_index / chunk_size;
  PassRanges r;
  r.intra = {n * chunk_size, query_index + 1};
  r.succ = n >= 1 ? KeyRange{(n - 1) * chunk_size, n * chunk_size} : KeyRange{0, 0};
  r.inter = n >= 2 ? KeyRange{0, (n - 1) * chunk_size} : KeyRange{0, 0};
  return r;
}

namespace detail {

const ChunkConfig& checked_config(AttentionMode mode, const ChunkConfig* cfg) {
  if (cfg == nullptr) throw std::invalid_argument("mode requires a ChunkConfig");
  if (mode == AttentionMode::PI) {
    if (cfg->pretrain_ctx < 1) throw std::invalid_argument("c must be > 0");
  } else {
    require_valid(*cfg);
  }
  return *cfg;
}

}  // namespace detail

}  // namespace dca
