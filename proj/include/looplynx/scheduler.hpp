#pragma once

// Temporal half of the design: the fixed stage sequence that drives one
// transformer block through the four macro kernels. The three MP stages
// reuse the same kernel instance.

#include <cstddef>
#include <string>
#include <vector>

#include "looplynx/config.hpp"
#include "looplynx/engine.hpp"
#include "looplynx/shard.hpp"
#include "looplynx/timing.hpp"

namespace looplynx {

enum class Phase { kPrefill, kDecode };

inline std::string_view phase_name(Phase p) { return p == Phase::kPrefill ? "prefill" : "decode"; }

struct Stage {
  std::size_t id = 0;  // 1-based position in the block
  StageOp op = StageOp::kLnResAttn;
  KernelKind kind = KernelKind::kMp;
  std::vector<TileSpec> tiles;  // MP
  std::size_t mha_tokens = 0;   // MHA: cached tokens attended over
  std::size_t local_heads = 0;  // MHA
  std::size_t width = 0;        // LN&Res and AUX vector length
  std::vector<std::size_t> depends_on;
  bool sync_after = false;
  // Bytes each node contributes to the gather, per block. MP stages gather
  // one block per tile; MHA gathers once.
  std::vector<std::size_t> sync_block_bytes;
};

struct BlockPlan {
  std::vector<Stage> stages;
  std::size_t loop_count = 0;  // blocks per token
  Phase mode = Phase::kDecode;
  std::size_t t = 0;
};

/// `t` is the number of cached tokens the MHA stage attends over, including
/// the current one.
inline BlockPlan build_block_plan(const ModelConfig& model, const HardwareConfig& hw, const ShardPlan& shard,
                                  Phase mode, std::size_t t) {
  require_valid(model, hw);
  const auto& me = shard.node(0);  // shards are equal; node 0 is representative
  const std::size_t d = model.l_embed;
  const std::size_t heads = me.heads.size();
  const std::size_t tiles = hw.mp_tiles;

  BlockPlan plan;
  plan.mode = mode;
  plan.t = t;
  plan.loop_count = model.n_layers;

  auto mp_stage = [&](StageOp op, std::size_t rows, std::size_t cols, bool sync) {
    Stage s;
    s.op = op;
    s.kind = KernelKind::kMp;
    s.tiles = split_tiles(rows, cols, tiles);
    s.sync_after = sync;
    if (sync) {
      for (const auto& tile : s.tiles) s.sync_block_bytes.push_back(tile.rows);
    }
    return s;
  };

  Stage ln1;
  ln1.op = StageOp::kLnResAttn;
  ln1.kind = KernelKind::kLnRes;
  ln1.width = d;
  plan.stages.push_back(ln1);

  // Head-aligned q, k and v rows: everything MHA needs stays on this node.
  plan.stages.push_back(mp_stage(StageOp::kQkv, 3 * heads * model.head_dim, d, false));

  Stage mha;
  mha.op = StageOp::kMha;
  mha.kind = KernelKind::kMha;
  mha.mha_tokens = t;
  mha.local_heads = heads;
  mha.sync_after = true;
  mha.sync_block_bytes = {heads * model.head_dim};
  plan.stages.push_back(mha);

  plan.stages.push_back(mp_stage(StageOp::kOutProj, me.embed_rows.size(), d, true));

  Stage ln2 = ln1;
  ln2.op = StageOp::kLnResFfn;
  plan.stages.push_back(ln2);

  plan.stages.push_back(mp_stage(StageOp::kFc1, me.ffn_rows.size(), d, true));

  Stage act;
  act.op = StageOp::kGelu;
  act.kind = KernelKind::kAux;
  act.width = model.ffn_dim;
  plan.stages.push_back(act);

  plan.stages.push_back(mp_stage(StageOp::kFc2, me.embed_rows.size(), model.ffn_dim, true));

  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    plan.stages[i].id = i + 1;
    if (i > 0) plan.stages[i].depends_on = {i};
  }
  return plan;
}

}  // namespace looplynx
