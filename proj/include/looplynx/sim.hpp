#pragma once

// Discrete-event execution of all nodes on one virtual clock. Each node runs
// the block plan stage by stage; kernel activity is laid out from the timing
// model, ring transfers are events, and functional math runs eagerly when a
// stage is dispatched.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "looplynx/config.hpp"
#include "looplynx/engine.hpp"
#include "looplynx/error.hpp"
#include "looplynx/ring.hpp"
#include "looplynx/scheduler.hpp"
#include "looplynx/shard.hpp"
#include "looplynx/timing.hpp"

namespace looplynx {

// Hardware unit an activity occupies. Several units make up one kernel.
enum class Unit : std::uint8_t {
  kMpMac,
  kMpQuant,
  kMhaScore,
  kMhaMask,
  kMhaSoftmax,
  kMhaValue,
  kLnResidual,
  kLnStats,
  kLnNorm,
  kAuxGelu,
  kLink,
  kStage,
};
inline constexpr std::size_t kUnitCount = 12;

inline std::string_view unit_name(Unit u) {
  static constexpr std::array<std::string_view, kUnitCount> names{
      "mp_mac", "mp_quant", "mha_score", "mha_mask", "mha_softmax", "mha_value",
      "ln_residual", "ln_stats", "ln_norm", "aux_gelu", "ring_link", "stage"};
  return names.at(std::size_t(u));
}

enum class ActivityType : std::uint8_t { kKernel, kNet, kStage };

struct Activity {
  double start = 0.0;
  double end = 0.0;
  ActivityType type = ActivityType::kKernel;
  KernelKind kernel = KernelKind::kMp;
  Unit unit = Unit::kMpMac;
  std::uint8_t stage = 0;  // 1..8
  std::uint16_t block = 0;  // tile or head index
  std::uint16_t round = 0;  // ring round
  std::uint32_t node = 0;   // sender for network activity
  std::uint32_t peer = 0;   // receiver for network activity
  std::uint32_t token = 0;
  std::uint32_t layer = 0;
  std::uint32_t bytes = 0;

  double duration() const { return end - start; }
  bool operator==(const Activity&) const = default;
};

enum class EventKind : std::uint8_t {
  kKernelEnd,
  kNetEnd,
  kStageEnd,
  kTokenDone,
  kStageBegin,
  kKernelStart,
  kNetStart,
};

inline std::string_view event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::kKernelStart: return "kernel_start";
    case EventKind::kKernelEnd: return "kernel_end";
    case EventKind::kNetStart: return "net_start";
    case EventKind::kNetEnd: return "net_end";
    case EventKind::kStageBegin: return "stage_begin";
    case EventKind::kStageEnd: return "stage_end";
    case EventKind::kTokenDone: return "token_done";
  }
  return "?";
}

struct Event {
  double time = 0.0;
  EventKind kind = EventKind::kKernelStart;
  std::size_t node = 0;
  std::size_t stage_ordinal = 0;  // layer * 8 + stage id; 0 for token_done
  std::string tag;
};

/// Busy time of one node during one token, by category. Each category is a
/// union of intervals, so overlapped time inside a category counts once.
struct CategoryTimes {
  double mp = 0.0;
  double mha = 0.0;
  double ln_res = 0.0;
  double aux = 0.0;
  double linear_mha = 0.0;  // |MP ∪ MHA|
  double busy = 0.0;        // union of all kernel activity
  double network = 0.0;     // union of this node's outgoing link activity
};

struct TokenRecord {
  std::size_t index = 0;
  Phase phase = Phase::kDecode;
  std::size_t position = 0;
  double start = 0.0;
  double end = 0.0;
  std::vector<CategoryTimes> nodes;

  double latency() const { return end - start; }
};

using Interval = std::pair<double, double>;

inline double union_length(std::vector<Interval> iv) {
  std::sort(iv.begin(), iv.end());
  double total = 0.0;
  double cur_s = 0.0;
  double cur_e = 0.0;
  bool open = false;
  for (const auto& [s, e] : iv) {
    if (!open || s > cur_e) {
      if (open) total += cur_e - cur_s;
      cur_s = s;
      cur_e = e;
      open = true;
    } else {
      cur_e = std::max(cur_e, e);
    }
  }
  if (open) total += cur_e - cur_s;
  return total;
}

class Timeline {
 public:
  void record(const Activity& a) {
    if (a.end < a.start || a.start < 0.0) throw Error("timeline: activity ends before it starts");
    acts_.push_back(a);
  }

  /// Closes the current token: computes its aggregates from the activities
  /// recorded since the previous close, and drops them unless `retain`.
  void close_token(std::size_t index, Phase phase, std::size_t position, double start, double end,
                   std::size_t n_nodes, bool retain) {
    if (!tokens_.empty() && !(end > tokens_.back().end)) throw Error("timeline: token_done times must increase");
    TokenRecord rec{index, phase, position, start, end, std::vector<CategoryTimes>(n_nodes)};
    std::vector<std::array<std::vector<Interval>, 4>> per_kind(n_nodes);
    std::vector<std::vector<Interval>> net(n_nodes);
    for (std::size_t i = token_begin_; i < acts_.size(); ++i) {
      const auto& a = acts_[i];
      if (a.node >= n_nodes) throw Error("timeline: activity on unknown node");
      if (a.type == ActivityType::kKernel) per_kind[a.node][std::size_t(a.kernel)].push_back({a.start, a.end});
      if (a.type == ActivityType::kNet) net[a.node].push_back({a.start, a.end});
    }
    for (std::size_t n = 0; n < n_nodes; ++n) {
      auto& c = rec.nodes[n];
      const auto& k = per_kind[n];
      c.mp = union_length(k[0]);
      c.mha = union_length(k[1]);
      c.ln_res = union_length(k[2]);
      c.aux = union_length(k[3]);
      std::vector<Interval> lin(k[0]);
      lin.insert(lin.end(), k[1].begin(), k[1].end());
      c.linear_mha = union_length(lin);
      std::vector<Interval> all(lin);
      all.insert(all.end(), k[2].begin(), k[2].end());
      all.insert(all.end(), k[3].begin(), k[3].end());
      c.busy = union_length(std::move(all));
      c.network = union_length(std::move(net[n]));
    }
    tokens_.push_back(std::move(rec));
    if (!retain) acts_.resize(token_begin_);
    token_begin_ = acts_.size();
  }

  const std::vector<Activity>& activities() const { return acts_; }
  const std::vector<TokenRecord>& tokens() const { return tokens_; }
  bool empty() const { return tokens_.empty(); }

  /// Start/end events for every retained activity plus token_done for every
  /// token, ordered by (time, node, stage, kind).
  std::vector<Event> events() const {
    std::vector<Event> ev;
    ev.reserve(acts_.size() * 2 + tokens_.size());
    for (const auto& a : acts_) {
      const std::size_t ord = std::size_t(a.layer) * kStagesPerBlock + a.stage;
      std::string tag = std::string(stage_name(StageOp(a.stage - 1)));
      switch (a.type) {
        case ActivityType::kKernel:
          tag += ":" + std::string(unit_name(a.unit));
          ev.push_back({a.start, EventKind::kKernelStart, a.node, ord, tag});
          ev.push_back({a.end, EventKind::kKernelEnd, a.node, ord, tag});
          break;
        case ActivityType::kNet:
          tag += ":round" + std::to_string(a.round) + "->" + std::to_string(a.peer);
          ev.push_back({a.start, EventKind::kNetStart, a.node, ord, tag});
          ev.push_back({a.end, EventKind::kNetEnd, a.node, ord, tag});
          break;
        case ActivityType::kStage:
          ev.push_back({a.start, EventKind::kStageBegin, a.node, ord, tag});
          ev.push_back({a.end, EventKind::kStageEnd, a.node, ord, tag});
          break;
      }
    }
    for (const auto& t : tokens_) ev.push_back({t.end, EventKind::kTokenDone, 0, 0, "token" + std::to_string(t.index)});
    std::stable_sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) {
      return std::tie(a.time, a.node, a.stage_ordinal, a.kind) < std::tie(b.time, b.node, b.stage_ordinal, b.kind);
    });
    return ev;
  }

  bool operator==(const Timeline& o) const {
    if (acts_ != o.acts_ || tokens_.size() != o.tokens_.size()) return false;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].start != o.tokens_[i].start || tokens_[i].end != o.tokens_[i].end) return false;
    }
    return true;
  }

 private:
  std::vector<Activity> acts_;
  std::vector<TokenRecord> tokens_;
  std::size_t token_begin_ = 0;
};

struct Breakdown {
  std::size_t tokens = 0;
  double latency = 0.0;  // summed over tokens and nodes
  double linear_mha_pct = 0.0;
  double critical_pct = 0.0;  // LN&Res and AUX
  double exposed_sync_pct = 0.0;
  double mp = 0.0;
  double mha = 0.0;
  double ln_res = 0.0;
  double aux = 0.0;
};

/// Category shares of wall time for one phase. Linear+MHA is the union of MP
/// and MHA activity, critical-path ops the remaining busy time, and exposed
/// sync whatever is left of the token latency.
inline Breakdown breakdown(const Timeline& tl, Phase phase) {
  if (tl.empty()) throw Error("breakdown: empty timeline");
  Breakdown b;
  double lin = 0.0;
  double busy = 0.0;
  for (const auto& t : tl.tokens()) {
    if (t.phase != phase) continue;
    ++b.tokens;
    for (const auto& c : t.nodes) {
      b.latency += t.latency();
      lin += c.linear_mha;
      busy += c.busy;
      b.mp += c.mp;
      b.mha += c.mha;
      b.ln_res += c.ln_res;
      b.aux += c.aux;
    }
  }
  if (b.tokens == 0 || !(b.latency > 0.0)) throw Error("breakdown: no " + std::string(phase_name(phase)) + " tokens");
  b.linear_mha_pct = 100.0 * lin / b.latency;
  b.critical_pct = 100.0 * (busy - lin) / b.latency;
  b.exposed_sync_pct = 100.0 * (b.latency - busy) / b.latency;
  return b;
}

/// One stage activation on one node with its idle (exposed) time.
struct StageRecord {
  std::size_t token = 0;
  std::size_t layer = 0;
  std::size_t stage = 0;
  std::size_t node = 0;
  double begin = 0.0;
  double end = 0.0;
  double busy = 0.0;
  double exposed() const { return (end - begin) - busy; }
};

inline std::vector<StageRecord> stage_records(const Timeline& tl) {
  using Key = std::tuple<std::uint32_t, std::uint32_t, std::uint8_t, std::uint32_t>;
  std::map<Key, std::vector<Interval>> busy;
  std::vector<StageRecord> out;
  for (const auto& a : tl.activities()) {
    if (a.type == ActivityType::kKernel) busy[{a.token, a.layer, a.stage, a.node}].push_back({a.start, a.end});
  }
  for (const auto& a : tl.activities()) {
    if (a.type != ActivityType::kStage) continue;
    auto it = busy.find({a.token, a.layer, a.stage, a.node});
    const double b = it == busy.end() ? 0.0 : union_length(it->second);
    out.push_back({a.token, a.layer, a.stage, a.node, a.start, a.end, b});
  }
  return out;
}

/// Pairs of kernel activations of the same kind on one node that overlap in
/// time. An activation is the span of one stage on its kernel.
inline std::vector<std::string> exclusivity_violations(const Timeline& tl) {
  std::map<std::pair<std::uint32_t, KernelKind>, std::vector<const Activity*>> groups;
  for (const auto& a : tl.activities()) {
    if (a.type == ActivityType::kStage) groups[{a.node, a.kernel}].push_back(&a);
  }
  std::vector<std::string> bad;
  for (auto& [key, v] : groups) {
    std::sort(v.begin(), v.end(), [](const Activity* x, const Activity* y) { return x->start < y->start; });
    for (std::size_t i = 1; i < v.size(); ++i) {
      if (v[i]->start < v[i - 1]->end) {
        bad.push_back("node " + std::to_string(key.first) + " " + std::string(kernel_name(key.second)) +
                      " activations overlap at t=" + std::to_string(v[i]->start));
      }
    }
  }
  return bad;
}

// Ordered by (time, node, stage ordinal, kind, insertion).
class EventQueue {
 public:
  using Action = std::function<void(double)>;

  void at(double time, std::size_t node, std::size_t stage_ordinal, int kind, Action a) {
    if (time < now_) throw Error("event queue: scheduling into the past");
    q_.push({time, node, stage_ordinal, kind, seq_++, std::move(a)});
  }

  bool step() {
    if (q_.empty()) return false;
    Item it = q_.top();
    q_.pop();
    now_ = it.time;
    it.action(it.time);
    return true;
  }

  void run() {
    while (step()) {
    }
  }

  double now() const { return now_; }
  std::size_t processed() const { return seq_; }

 private:
  struct Item {
    double time;
    std::size_t node;
    std::size_t stage;
    int kind;
    std::uint64_t seq;
    Action action;
  };
  struct Later {
    bool operator()(const Item& a, const Item& b) const {
      return std::tie(a.time, a.node, a.stage, a.kind, a.seq) > std::tie(b.time, b.node, b.stage, b.kind, b.seq);
    }
  };
  std::priority_queue<Item, std::vector<Item>, Later> q_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;
};

inline std::vector<std::size_t> prompt_tokens(const ModelConfig& cfg, std::uint64_t seed, std::size_t len) {
  std::mt19937_64 gen(seed);
  std::vector<std::size_t> toks(len);
  for (auto& t : toks) t = std::size_t(gen() % cfg.vocab_size);
  return toks;
}

struct SimResult {
  Timeline timeline;
  std::size_t prefill_tokens = 0;
  std::size_t decode_tokens = 0;
  std::vector<std::size_t> generated;       // functional runs only
  std::vector<std::vector<float>> logits;   // functional runs with keep_logits
  std::uint64_t events_processed = 0;
};

class Simulator {
 public:
  /// `model` may be null for a timing-only run.
  Simulator(SimConfig cfg, const QuantModel* model = nullptr)
      : cfg_(std::move(cfg)), model_(model), shard_(make_shard_plan(cfg_.model, cfg_.hardware)) {
    require_valid(cfg_.model, cfg_.hardware);
    if (model_ && !(model_->cfg == cfg_.model)) throw ConfigError("weights do not match the model config");
  }

  void keep_logits(bool on) { keep_logits_ = on; }

  SimResult run() { return run(prompt_tokens(cfg_.model, cfg_.run.seed, cfg_.run.prompt_len)); }

  SimResult run(std::vector<std::size_t> prompt) {
    const auto& run = cfg_.run;
    if (prompt.empty()) throw ConfigError("run.prompt_len must be >= 1");
    if (prompt.size() + run.gen_len > cfg_.model.max_seq_len) {
      throw ConfigError("prompt_len + gen_len (" + std::to_string(prompt.size() + run.gen_len) +
                        ") exceeds model.max_seq_len (" + std::to_string(cfg_.model.max_seq_len) + ")");
    }
    prompt_ = std::move(prompt);
    const std::size_t n = cfg_.hardware.n_nodes;
    res_ = SimResult{};
    q_ = EventQueue{};
    engines_.clear();
    if (model_) {
      for (std::size_t i = 0; i < n; ++i) engines_.emplace_back(*model_, shard_, i);
    }
    nodes_.assign(n, NodeRt{});
    gathers_.clear();
    slots_.clear();
    gather_seq_.assign(n, 0);
    finished_nodes_ = 0;
    next_input_ = 0;
    token_ = 0;
    start_token(0.0);
    q_.run();
    res_.events_processed = q_.processed();
    return std::move(res_);
  }

  const ShardPlan& shard() const { return shard_; }

 private:
  enum Kind : int { kEvEnd = 0, kEvReady = 1, kEvStart = 2 };

  struct NodeRt {
    std::size_t layer = 0;
    std::size_t stage = 0;  // index into plan
    double stage_begin = 0.0;
    std::size_t next_tile = 0;
    double mac_free = 0.0;
    double quant_free = 0.0;
    std::size_t blocks_done = 0;
    std::size_t blocks_total = 0;
    bool waiting_gather = false;  // MP without overlap: next tile waits
    // Outgoing ring link.
    bool link_busy = false;
    std::deque<std::pair<std::uint64_t, std::size_t>> link_queue;  // (gather id, round)
    std::size_t tokens_done = 0;
  };

  struct GatherRt {
    std::size_t bytes = 0;
    std::size_t stage = 0;  // plan index
    std::size_t layer = 0;
    std::size_t block = 0;
    std::vector<std::size_t> received;  // rounds received per node
    std::vector<std::size_t> queued;    // rounds handed to the node's link
    std::vector<bool> own_ready;
    std::size_t finished = 0;
  };

  // Functional chunks of one gathering stage instance, one per node.
  struct Slot {
    std::vector<std::vector<std::int8_t>> chunks;
    std::size_t present = 0;
    std::vector<std::vector<std::int8_t>> gathered;
    std::size_t accepted = 0;
  };

  bool is_prefill() const { return token_ < prompt_.size(); }
  std::size_t position() const { return token_; }

  std::size_t ordinal(const NodeRt& rt) const { return rt.layer * kStagesPerBlock + rt.stage + 1; }

  Activity base(std::size_t node, const NodeRt& rt) const {
    Activity a;
    a.node = std::uint32_t(node);
    a.token = std::uint32_t(token_);
    a.layer = std::uint32_t(rt.layer);
    a.stage = std::uint8_t(rt.stage + 1);
    return a;
  }

  void kernel(std::size_t node, const NodeRt& rt, KernelKind k, Unit u, double s, double e, std::size_t block = 0) {
    Activity a = base(node, rt);
    a.type = ActivityType::kKernel;
    a.kernel = k;
    a.unit = u;
    a.start = s;
    a.end = e;
    a.block = std::uint16_t(block);
    res_.timeline.record(a);
  }

  void start_token(double t) {
    const std::size_t total = prompt_.size() + cfg_.run.gen_len;
    if (token_ >= total) return;
    const Phase phase = is_prefill() ? Phase::kPrefill : Phase::kDecode;
    plan_ = build_block_plan(cfg_.model, cfg_.hardware, shard_, phase, position() + 1);
    token_start_ = t;
    const std::size_t input = is_prefill() ? prompt_[token_] : next_input_;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      auto& rt = nodes_[i];
      rt.layer = 0;
      rt.stage = 0;
      if (!engines_.empty()) engines_[i].begin_token(input, position());
      q_.at(t, i, ordinal(rt), kEvStart, [this, i](double now) { dispatch(i, now); });
    }
  }

  void dispatch(std::size_t node, double t) {
    auto& rt = nodes_[node];
    const Stage& st = plan_.stages[rt.stage];
    const auto& hw = cfg_.hardware;
    const auto& fl = cfg_.flags;
    rt.stage_begin = t;
    rt.blocks_done = 0;
    rt.waiting_gather = false;

    if (!engines_.empty()) {
      auto chunk = engines_[node].execute(st.op, rt.layer);
      if (chunk) {
        auto& slot = slots_[slot_key(rt)];
        if (slot.chunks.empty()) slot.chunks.resize(nodes_.size());
        slot.chunks[node] = std::move(*chunk);
        ++slot.present;
      }
    }

    switch (st.kind) {
      case KernelKind::kLnRes: {
        const double p = cycles_to_seconds(ln_pass_cycles(st.width, hw, fl.fused_ln_res), hw);
        double end;
        if (fl.fused_ln_res) {
          kernel(node, rt, st.kind, Unit::kLnResidual, t, t + p);
          kernel(node, rt, st.kind, Unit::kLnStats, t, t + p);
          kernel(node, rt, st.kind, Unit::kLnNorm, t + p, t + 2 * p);
          end = t + 2 * p;
        } else {
          kernel(node, rt, st.kind, Unit::kLnResidual, t, t + p);
          kernel(node, rt, st.kind, Unit::kLnStats, t + p, t + 2 * p);
          kernel(node, rt, st.kind, Unit::kLnNorm, t + 2 * p, t + 3 * p);
          end = t + 3 * p;
        }
        rt.blocks_total = 0;
        q_.at(end, node, ordinal(rt), kEvEnd, [this, node](double now) { stage_end(node, now); });
        break;
      }
      case KernelKind::kAux: {
        const double end = t + aux_cost(AuxKind::kGelu, st.width, hw).total_time;
        kernel(node, rt, st.kind, Unit::kAuxGelu, t, end);
        rt.blocks_total = 0;
        q_.at(end, node, ordinal(rt), kEvEnd, [this, node](double now) { stage_end(node, now); });
        break;
      }
      case KernelKind::kMha: {
        const auto times = mha_stage_times(st.mha_tokens, cfg_.model.head_dim, hw);
        static constexpr std::array<Unit, kMhaStages> units{Unit::kMhaScore, Unit::kMhaMask, Unit::kMhaSoftmax,
                                                            Unit::kMhaValue};
        std::array<double, kMhaStages> prev_head{};
        prev_head.fill(t);
        double cursor = t;
        for (std::size_t h = 0; h < st.local_heads; ++h) {
          double ready = fl.headwise_pipeline ? t : cursor;
          for (std::size_t s = 0; s < kMhaStages; ++s) {
            const double begin = std::max(ready, prev_head[s]);
            const double end = begin + times[s];
            kernel(node, rt, st.kind, units[s], begin, end, h);
            prev_head[s] = end;
            ready = end;
          }
          cursor = ready;
        }
        rt.blocks_total = 1;
        q_.at(cursor, node, ordinal(rt), kEvReady, [this, node](double now) { block_ready(node, 0, now); });
        break;
      }
      case KernelKind::kMp: {
        rt.blocks_total = st.tiles.size();
        rt.next_tile = 0;
        rt.mac_free = t;
        rt.quant_free = t;
        start_tile(node, t);
        break;
      }
    }
  }

  void start_tile(std::size_t node, double t) {
    auto& rt = nodes_[node];
    const Stage& st = plan_.stages[rt.stage];
    const std::size_t i = rt.next_tile++;
    const auto cost = mp_tile_cost(st.tiles[i], cfg_.hardware);
    const double end = t + mp_mac_time(cost, cfg_.hardware);
    kernel(node, rt, KernelKind::kMp, Unit::kMpMac, t, end, i);
    q_.at(end, node, ordinal(rt), kEvEnd, [this, node, i, cost](double now) { mac_done(node, i, cost, now); });
  }

  bool tiles_wait_for_gather(const Stage& st) const {
    return st.sync_after && nodes_.size() > 1 && !cfg_.flags.sync_overlap;
  }

  void mac_done(std::size_t node, std::size_t tile, const KernelCost& cost, double t) {
    auto& rt = nodes_[node];
    const Stage& st = plan_.stages[rt.stage];
    // The quantization unit drains this tile while the MAC array moves on.
    const double ds = std::max(t, rt.quant_free);
    const double de = ds + mp_drain_time(cost, cfg_.hardware);
    rt.quant_free = de;
    kernel(node, rt, KernelKind::kMp, Unit::kMpQuant, ds, de, tile);
    q_.at(de, node, ordinal(rt), kEvReady, [this, node, tile](double now) { block_ready(node, tile, now); });
    if (rt.next_tile < st.tiles.size()) {
      if (tiles_wait_for_gather(st)) {
        rt.waiting_gather = true;
      } else {
        start_tile(node, t);
      }
    }
  }

  void block_ready(std::size_t node, std::size_t block, double t) {
    const auto& rt = nodes_[node];
    const Stage& st = plan_.stages[rt.stage];
    if (!st.sync_after || nodes_.size() == 1) {
      block_done(node, t);
      return;
    }
    // Every node walks the same block sequence, so the k-th gather on one
    // node is the k-th gather on all of them.
    const std::uint64_t id = gather_seq_[node]++;
    auto& g = gathers_[id];
    if (g.received.empty()) {
      g.received.assign(nodes_.size(), 0);
      g.queued.assign(nodes_.size(), 0);
      g.own_ready.assign(nodes_.size(), false);
      g.bytes = st.sync_block_bytes.at(block);
      g.stage = rt.stage;
      g.layer = rt.layer;
      g.block = block;
    }
    g.own_ready[node] = true;
    pump(node, id, t);
  }

  // Round r leaves a node once its own chunk is out (r = 0) and it holds
  // the chunk received in round r - 1.
  void pump(std::size_t node, std::uint64_t id, double t) {
    auto& g = gathers_.at(id);
    auto& rt = nodes_[node];
    while (g.own_ready[node] && g.queued[node] < nodes_.size() && g.received[node] >= g.queued[node]) {
      rt.link_queue.emplace_back(id, g.queued[node]++);
    }
    if (!rt.link_busy) start_send(node, t);
  }

  void start_send(std::size_t node, double t) {
    auto& rt = nodes_[node];
    if (rt.link_queue.empty()) return;
    const auto [id, round] = rt.link_queue.front();
    rt.link_queue.pop_front();
    rt.link_busy = true;
    const auto& g = gathers_.at(id);
    const std::size_t dst = (node + 1) % nodes_.size();
    const double end = t + sync_cost(g.bytes, cfg_.hardware);
    Activity a;
    a.type = ActivityType::kNet;
    a.unit = Unit::kLink;
    a.kernel = KernelKind::kMp;
    a.start = t;
    a.end = end;
    a.node = std::uint32_t(node);
    a.peer = std::uint32_t(dst);
    a.token = std::uint32_t(token_);
    a.layer = std::uint32_t(g.layer);
    a.stage = std::uint8_t(g.stage + 1);
    a.block = std::uint16_t(g.block);
    a.round = std::uint16_t(round);
    a.bytes = std::uint32_t(g.bytes);
    res_.timeline.record(a);
    const std::size_t ord = g.layer * kStagesPerBlock + g.stage + 1;
    q_.at(end, node, ord, kEvEnd, [this, node, dst, id, round](double now) { send_done(node, dst, id, round, now); });
  }

  void send_done(std::size_t src, std::size_t dst, std::uint64_t id, std::size_t round, double t) {
    nodes_[src].link_busy = false;
    auto& g = gathers_.at(id);
    const std::size_t got = ++g.received[dst];
    if (got != round + 1) throw Error("ring: round order violated");
    start_send(src, t);
    if (got < nodes_.size()) {
      pump(dst, id, t);
    } else {
      if (++g.finished == nodes_.size()) gathers_.erase(id);
      block_done(dst, t);
    }
  }

  void block_done(std::size_t node, double t) {
    auto& rt = nodes_[node];
    const Stage& st = plan_.stages[rt.stage];
    ++rt.blocks_done;
    if (rt.waiting_gather && rt.next_tile < st.tiles.size()) {
      rt.waiting_gather = false;
      start_tile(node, t);
    }
    if (rt.blocks_done == rt.blocks_total) stage_end(node, t);
  }

  std::uint64_t slot_key(const NodeRt& rt) const { return rt.layer * kStagesPerBlock + rt.stage; }

  void stage_end(std::size_t node, double t) {
    auto& rt = nodes_[node];
    const Stage& st = plan_.stages[rt.stage];
    Activity a = base(node, rt);
    a.type = ActivityType::kStage;
    a.kernel = st.kind;
    a.unit = Unit::kStage;
    a.start = rt.stage_begin;
    a.end = t;
    res_.timeline.record(a);

    if (!engines_.empty() && stage_gathers(st.op)) {
      auto it = slots_.find(slot_key(rt));
      if (it == slots_.end() || it->second.present != nodes_.size()) {
        throw Error("sim: gather finished before every node produced its chunk");
      }
      auto& slot = it->second;
      if (slot.gathered.empty()) slot.gathered = all_gather(slot.chunks, cfg_.hardware.datapack_bytes).buffers;
      engines_[node].accept(st.op, rt.layer, std::move(slot.gathered[node]));
      if (++slot.accepted == nodes_.size()) slots_.erase(it);
    }

    if (++rt.stage == plan_.stages.size()) {
      rt.stage = 0;
      ++rt.layer;
    }
    if (rt.layer == plan_.loop_count) {
      node_token_done(t);
      return;
    }
    q_.at(t, node, ordinal(rt), kEvStart, [this, node](double now) { dispatch(node, now); });
  }

  void node_token_done(double t) {
    if (++finished_nodes_ < nodes_.size()) return;
    finished_nodes_ = 0;
    const bool prefill = is_prefill();
    const auto& run = cfg_.run;
    const bool retain = run.trace_tokens < 0 || std::int64_t(token_) < run.trace_tokens;
    res_.timeline.close_token(token_, prefill ? Phase::kPrefill : Phase::kDecode, position(), token_start_, t,
                              nodes_.size(), retain);
    if (prefill) {
      ++res_.prefill_tokens;
    } else {
      ++res_.decode_tokens;
    }
    // Host: logits only where a next token is needed.
    const bool last_prompt = token_ + 1 == prompt_.size();
    if (!engines_.empty() && (last_prompt || !prefill)) {
      auto lg = engines_.front().logits();
      next_input_ = argmax(lg);
      if (!prefill) res_.generated.push_back(next_input_);
      if (keep_logits_) res_.logits.push_back(std::move(lg));
    }
    ++token_;
    start_token(t);
  }

  SimConfig cfg_;
  const QuantModel* model_;
  ShardPlan shard_;
  bool keep_logits_ = false;

  std::vector<std::size_t> prompt_;
  SimResult res_;
  EventQueue q_;
  BlockPlan plan_;
  std::vector<NodeEngine> engines_;
  std::vector<NodeRt> nodes_;
  std::map<std::uint64_t, GatherRt> gathers_;
  std::map<std::uint64_t, Slot> slots_;
  std::vector<std::uint64_t> gather_seq_;
  std::size_t finished_nodes_ = 0;
  std::size_t next_input_ = 0;
  std::size_t token_ = 0;
  double token_start_ = 0.0;
};

inline SimResult simulate(const SimConfig& cfg, const QuantModel* model = nullptr) {
  return Simulator(cfg, model).run();
}

}  // namespace looplynx
