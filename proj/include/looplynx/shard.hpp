#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "looplynx/config.hpp"

namespace looplynx {

/// Half-open index interval [begin, end).
struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const Range&) const = default;
};

/// Which linear layer a row range refers to.
enum class LinearLayer { kQkv, kOut, kFc1, kFc2 };

/// What one node owns. Every linear layer is split along its output
/// dimension; the KV cache is split by attention head.
struct NodeShard {
  std::size_t node_id = 0;
  Range embed_rows;  // out-proj and FFN-2 rows, also the gathered chunk of l_embed vectors
  Range ffn_rows;    // FFN-1 rows
  Range heads;

  bool operator==(const NodeShard&) const = default;
};

struct ShardPlan {
  std::size_t n_nodes = 1;
  std::size_t head_dim = 0;
  std::size_t l_embed = 0;
  std::vector<NodeShard> nodes;

  const NodeShard& node(std::size_t id) const { return nodes.at(id); }

  /// Output rows of `layer` owned by `node_id`. QKV rows are head-aligned, so
  /// they form three disjoint slices (q, k, v) of the fused 3*l_embed output;
  /// this returns the q slice and callers offset by l_embed for k and v.
  Range rows(LinearLayer layer, std::size_t node_id) const {
    const auto& n = node(node_id);
    switch (layer) {
      case LinearLayer::kQkv:
        return {n.heads.begin * head_dim, n.heads.end * head_dim};
      case LinearLayer::kOut:
      case LinearLayer::kFc2:
        return n.embed_rows;
      case LinearLayer::kFc1:
        return n.ffn_rows;
    }
    return {};
  }

  bool operator==(const ShardPlan&) const = default;
};

inline Range equal_block(std::size_t total, std::size_t parts, std::size_t i) {
  return {i * total / parts, (i + 1) * total / parts};
}

/// Equal contiguous partition of every sharded dimension.
inline ShardPlan make_shard_plan(const ModelConfig& model, const HardwareConfig& hw) {
  const std::size_t n = hw.n_nodes;
  if (n == 0) throw ConfigError("hardware.n_nodes must be >= 1");
  auto check = [n](std::size_t dim, const char* name) {
    if (dim % n != 0) {
      throw ConfigError(std::string("cannot shard ") + name + " (" + std::to_string(dim) + ") across " +
                        std::to_string(n) + " nodes");
    }
  };
  check(model.l_embed, "l_embed");
  check(model.n_heads, "n_heads");
  check(model.ffn_dim, "ffn_dim");

  ShardPlan plan;
  plan.n_nodes = n;
  plan.head_dim = model.head_dim;
  plan.l_embed = model.l_embed;
  plan.nodes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    plan.nodes.push_back({i, equal_block(model.l_embed, n, i), equal_block(model.ffn_dim, n, i),
                          equal_block(model.n_heads, n, i)});
  }
  return plan;
}

}  // namespace looplynx
