#pragma once

// Analytic cost of one activation of each macro dataflow kernel. All
// functions are pure in (work, HardwareConfig); times are seconds.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string_view>
#include <vector>

#include "looplynx/config.hpp"

namespace looplynx {

enum class KernelKind { kMp, kMha, kLnRes, kAux };

inline std::string_view kernel_name(KernelKind k) {
  switch (k) {
    case KernelKind::kMp: return "MP";
    case KernelKind::kMha: return "MHA";
    case KernelKind::kLnRes: return "LN_RES";
    case KernelKind::kAux: return "AUX";
  }
  return "?";
}

struct KernelCost {
  KernelKind kind = KernelKind::kMp;
  std::uint64_t compute_cycles = 0;
  double memory_time = 0.0;
  std::uint64_t pipeline_fill_cycles = 0;
  std::uint64_t drain_cycles = 0;  // MP only: quantization unit tail
  double total_time = 0.0;
};

/// One row block of a weight matrix handled by a single MP pass.
struct TileSpec {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline constexpr std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

inline double cycles_to_seconds(std::uint64_t cycles, const HardwareConfig& hw) { return double(cycles) / hw.freq_hz; }

/// MAC phase of an MP tile: n_channel slices of n_group MACs, each slice fed
/// by its own HBM channel. The phase is bounded by whichever of compute and
/// weight streaming is slower.
inline double mp_mac_time(const KernelCost& c, const HardwareConfig& hw) {
  return std::max(cycles_to_seconds(c.compute_cycles, hw), c.memory_time);
}

inline double mp_drain_time(const KernelCost& c, const HardwareConfig& hw) {
  return cycles_to_seconds(c.drain_cycles, hw);
}

inline KernelCost mp_tile_cost(TileSpec tile, const HardwareConfig& hw) {
  const std::uint64_t macs = std::uint64_t(tile.rows) * tile.cols;
  const std::uint64_t lanes = std::uint64_t(hw.n_channel) * hw.n_group;
  KernelCost c;
  c.kind = KernelKind::kMp;
  c.pipeline_fill_cycles = hw.mp_fill_cycles;
  c.compute_cycles = ceil_div(macs, lanes) + hw.mp_fill_cycles;
  c.memory_time = double(macs) / (double(hw.n_channel) * hw.hbm_bw_per_channel);  // int8: 1 byte per weight
  // Requantized outputs leave in n_group-wide datapacks. While tiles stream
  // back to back this overlaps the next tile; only the last tail shows.
  c.drain_cycles = ceil_div(tile.rows, hw.n_group);
  c.total_time = mp_mac_time(c, hw) + mp_drain_time(c, hw);
  return c;
}

/// Splits `rows` into at most `tiles` blocks, sizes differing by at most one.
inline std::vector<TileSpec> split_tiles(std::size_t rows, std::size_t cols, std::size_t tiles) {
  std::vector<TileSpec> out;
  const std::size_t n = std::max<std::size_t>(1, std::min(tiles, rows));
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = (i + 1) * rows / n - i * rows / n;
    out.push_back({r, cols});
  }
  return out;
}

// Fused MHA kernel: score MAC -> mask -> softmax -> value MAC, per head.
enum class MhaStage : std::size_t { kScore = 0, kMask = 1, kSoftmax = 2, kValue = 3 };
inline constexpr std::size_t kMhaStages = 4;

inline std::string_view mha_stage_name(std::size_t s) {
  static constexpr std::array<std::string_view, kMhaStages> names{"score_mac", "mask", "softmax", "value_mac"};
  return names.at(s);
}

/// Time of each of the four stages for one head over t cached tokens.
inline std::array<double, kMhaStages> mha_stage_times(std::size_t t, std::size_t head_dim, const HardwareConfig& hw) {
  const std::uint64_t macs = std::uint64_t(t) * head_dim;
  const double fill = cycles_to_seconds(hw.mha_fill_cycles, hw);
  const double mac = cycles_to_seconds(ceil_div(macs, hw.mha_parallelism), hw);
  const double k_mem = double(macs) / (double(hw.mha_k_channels) * hw.hbm_bw_per_channel);
  const double v_mem = double(macs) / (double(hw.mha_v_channels) * hw.hbm_bw_per_channel);
  const double elementwise = cycles_to_seconds(ceil_div(t, hw.softmax_parallelism), hw);
  return {std::max(mac, k_mem) + fill, elementwise + fill, elementwise + fill, std::max(mac, v_mem) + fill};
}

/// Makespan of `heads` jobs through a linear pipeline with per-stage times
/// `st`: the first head pays every stage, each later head one bottleneck stage.
inline double head_pipeline_makespan(const std::array<double, kMhaStages>& st, std::size_t heads) {
  if (heads == 0) return 0.0;
  const double sum = std::accumulate(st.begin(), st.end(), 0.0);
  const double mx = *std::max_element(st.begin(), st.end());
  return sum + double(heads - 1) * mx;
}

inline KernelCost mha_cost(std::size_t t, std::size_t local_heads, const HardwareConfig& hw, std::size_t head_dim,
                           bool headwise_pipeline = true) {
  const auto st = mha_stage_times(t, head_dim, hw);
  const double sum = std::accumulate(st.begin(), st.end(), 0.0);
  const std::uint64_t macs = std::uint64_t(t) * head_dim;
  KernelCost c;
  c.kind = KernelKind::kMha;
  c.pipeline_fill_cycles = kMhaStages * hw.mha_fill_cycles;
  c.compute_cycles = local_heads * (2 * ceil_div(macs, hw.mha_parallelism) +
                                    2 * ceil_div(t, hw.softmax_parallelism) + kMhaStages * hw.mha_fill_cycles);
  c.memory_time = double(local_heads) * double(macs) *
                  (1.0 / double(hw.mha_k_channels) + 1.0 / double(hw.mha_v_channels)) / hw.hbm_bw_per_channel;
  c.total_time = headwise_pipeline ? head_pipeline_makespan(st, local_heads) : double(local_heads) * sum;
  return c;
}

/// Cycles of one pass (residual add, LN statistics, or LN normalize) over d.
inline std::uint64_t ln_pass_cycles(std::size_t d, const HardwareConfig& hw, bool fused) {
  return ceil_div(d, fused ? hw.ln_parallelism : hw.ln_parallelism_unfused);
}

/// Fused: the residual add and the LN statistics pass run side by side, then
/// the normalize pass. Unfused: three serial passes on the baseline units.
inline KernelCost ln_res_cost(std::size_t d, const HardwareConfig& hw, bool fused = true) {
  const std::uint64_t residual = ln_pass_cycles(d, hw, fused);
  const std::uint64_t stats = residual;
  const std::uint64_t normalize = residual;
  KernelCost c;
  c.kind = KernelKind::kLnRes;
  c.compute_cycles = fused ? std::max(residual, stats) + normalize : residual + stats + normalize;
  c.total_time = cycles_to_seconds(c.compute_cycles, hw);
  return c;
}

enum class AuxKind { kGelu };

inline KernelCost aux_cost(AuxKind /*kind*/, std::size_t size, const HardwareConfig& hw) {
  KernelCost c;
  c.kind = KernelKind::kAux;
  c.compute_cycles = ceil_div(size, hw.aux_parallelism);
  c.total_time = cycles_to_seconds(c.compute_cycles, hw);
  return c;
}

/// One ring round moving `bytes` over one link.
inline double sync_cost(std::size_t bytes, const HardwareConfig& hw) {
  return double(bytes) / hw.net_bw + hw.net_hop_latency;
}

/// Full all-gather of equal chunks: one round per node.
inline double all_gather_time(std::size_t chunk_bytes, const HardwareConfig& hw) {
  if (hw.n_nodes <= 1) return 0.0;
  return double(hw.n_nodes) * sync_cost(chunk_bytes, hw);
}

}  // namespace looplynx
