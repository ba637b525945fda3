#pragma once

// Simplex ring all-gather. Node i only ever sends to (i + 1) mod N and
// receives from (i - 1) mod N. In every round each node forwards the chunk it
// received in the previous round (its own chunk in round 0), and the receiver
// writes the datapacks at an offset derived from the chunk's origin node.
// After N rounds every node has received every chunk, the last one being its
// own chunk coming back around.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "looplynx/error.hpp"

namespace looplynx {

struct Datapack {
  std::size_t origin_node = 0;
  std::size_t seq_no = 0;
  std::vector<std::int8_t> payload;  // always datapack_bytes long; the chunk tail is zero padded
};

/// One (round, link) transfer.
struct NetTransfer {
  std::size_t round = 0;
  std::size_t src = 0;
  std::size_t dst = 0;
  std::size_t bytes = 0;

  bool operator==(const NetTransfer&) const = default;
};

inline std::vector<Datapack> pack_chunk(std::span<const std::int8_t> chunk, std::size_t origin,
                                        std::size_t datapack_bytes) {
  std::vector<Datapack> packs;
  for (std::size_t off = 0, seq = 0; off < chunk.size(); off += datapack_bytes, ++seq) {
    Datapack p{origin, seq, std::vector<std::int8_t>(datapack_bytes, 0)};
    const std::size_t n = std::min(datapack_bytes, chunk.size() - off);
    std::copy_n(chunk.begin() + off, n, p.payload.begin());
    packs.push_back(std::move(p));
  }
  return packs;
}

class RouterState {
 public:
  RouterState(std::size_t node_id, std::size_t n_nodes, std::size_t chunk_bytes, std::size_t datapack_bytes)
      : node_id_(node_id),
        n_nodes_(n_nodes),
        chunk_bytes_(chunk_bytes),
        datapack_bytes_(datapack_bytes),
        buffer_(n_nodes * chunk_bytes, 0),
        filled_(n_nodes, false) {
    if (datapack_bytes == 0) throw Error("router: datapack size must be >= 1");
  }

  std::size_t node_id() const { return node_id_; }
  std::size_t round() const { return round_; }
  std::size_t write_offset(std::size_t origin) const { return origin * chunk_bytes_; }
  std::span<const std::int8_t> buffer() const { return buffer_; }
  bool holds(std::size_t origin) const { return filled_.at(origin); }

  /// Places this node's own chunk before round 0.
  void load_own(std::span<const std::int8_t> chunk) {
    if (chunk.size() != chunk_bytes_) throw Error("router: chunk length mismatch");
    std::copy(chunk.begin(), chunk.end(), buffer_.begin() + write_offset(node_id_));
    filled_[node_id_] = true;
    outbox_ = pack_chunk(chunk, node_id_, datapack_bytes_);
  }

  /// Datapacks this node writes to its successor in the current round.
  const std::vector<Datapack>& outbox() const { return outbox_; }

  /// Accepts one round's worth of datapacks from the predecessor; they become
  /// the next round's outbox.
  void receive(std::vector<Datapack> packs) {
    for (const auto& p : packs) {
      if (p.payload.size() != datapack_bytes_) throw Error("router: malformed datapack");
      const std::size_t base = write_offset(p.origin_node) + p.seq_no * datapack_bytes_;
      const std::size_t n = std::min(datapack_bytes_, write_offset(p.origin_node) + chunk_bytes_ - base);
      auto dst = buffer_.begin() + base;
      if (p.origin_node == node_id_) {
        // Own chunk returning on the final round: must match what is there.
        if (!std::equal(p.payload.begin(), p.payload.begin() + n, dst)) {
          throw Error("router: node " + std::to_string(node_id_) + " own chunk came back corrupted");
        }
      } else {
        std::copy_n(p.payload.begin(), n, dst);
      }
      filled_[p.origin_node] = true;
    }
    outbox_ = std::move(packs);
    ++round_;
  }

 private:
  std::size_t node_id_;
  std::size_t n_nodes_;
  std::size_t chunk_bytes_;
  std::size_t datapack_bytes_;
  std::size_t round_ = 0;
  std::vector<std::int8_t> buffer_;
  std::vector<bool> filled_;
  std::vector<Datapack> outbox_;
};

struct GatherResult {
  std::vector<std::vector<std::int8_t>> buffers;  // per node, chunks in node-ID order
  std::vector<NetTransfer> transfers;             // one per (round, link)
  std::size_t rounds = 0;
};

inline GatherResult all_gather(std::span<const std::vector<std::int8_t>> chunks, std::size_t datapack_bytes) {
  const std::size_t n = chunks.size();
  if (n == 0) throw Error("all_gather: no nodes");
  const std::size_t len = chunks[0].size();
  for (std::size_t i = 0; i < n; ++i) {
    if (chunks[i].size() != len) {
      throw Error("all_gather: chunk " + std::to_string(i) + " has " + std::to_string(chunks[i].size()) +
                  " bytes, expected " + std::to_string(len));
    }
  }

  std::vector<RouterState> routers;
  routers.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    routers.emplace_back(i, n, len, datapack_bytes);
    routers[i].load_own(chunks[i]);
  }

  GatherResult res;
  if (n > 1) {
    for (std::size_t r = 0; r < n; ++r) {
      // All writes of a round are taken from the outboxes as they stood at the
      // start of the round.
      std::vector<std::vector<Datapack>> in_flight(n);
      for (std::size_t src = 0; src < n; ++src) {
        const std::size_t dst = (src + 1) % n;
        in_flight[dst] = routers[src].outbox();
        res.transfers.push_back({r, src, dst, len});
      }
      for (std::size_t dst = 0; dst < n; ++dst) routers[dst].receive(std::move(in_flight[dst]));
    }
    res.rounds = n;
  }
  for (auto& rt : routers) {
    auto b = rt.buffer();
    res.buffers.emplace_back(b.begin(), b.end());
  }
  return res;
}

struct SyncSchedule {
  double total = 0.0;
  double exposed_sync = 0.0;
};

/// Two-stage flow: blocks compute back to back, each block's sync starts once
/// the block is computed and the previous sync has finished.
inline SyncSchedule overlapped_sync_schedule(std::span<const double> compute, std::span<const double> sync) {
  if (compute.size() != sync.size() || compute.empty()) {
    throw Error("overlapped_sync_schedule: need equal, non-empty block lists");
  }
  double compute_end = 0.0;
  double sync_end = 0.0;
  for (std::size_t i = 0; i < compute.size(); ++i) {
    compute_end += compute[i];
    sync_end = std::max(compute_end, sync_end) + sync[i];
  }
  const double total_compute = std::accumulate(compute.begin(), compute.end(), 0.0);
  return {sync_end, sync_end - total_compute};
}

}  // namespace looplynx
