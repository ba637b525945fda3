#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "looplynx/sim.hpp"
#include "looplynx/verify.hpp"

using namespace looplynx;

namespace {

// One GPT-2-medium layer: full-width kernels, quick to simulate.
SimConfig one_layer(std::size_t nodes, OptFlags flags = {}) {
  SimConfig c;
  c.model.n_layers = 1;
  c.hardware.n_nodes = nodes;
  c.flags = flags;
  c.run.prompt_len = 1;
  c.run.gen_len = 2;
  return c;
}

SimConfig desk(std::size_t nodes) {
  SimConfig c;
  c.model = desk_model();
  c.hardware.n_nodes = nodes;
  c.run.prompt_len = 3;
  c.run.gen_len = 4;
  return c;
}

double decode_latency(const SimConfig& c) {
  auto r = simulate(c);
  double s = 0.0;
  for (const auto& t : r.timeline.tokens()) {
    if (t.phase == Phase::kDecode) s += t.latency();
  }
  return s;
}

std::vector<OptFlags> all_flags() {
  std::vector<OptFlags> out;
  for (int m = 0; m < 8; ++m) out.push_back({bool(m & 1), bool(m & 2), bool(m & 4)});
  return out;
}

}  // namespace

TEST(EventQueue, OrdersByTimeNodeStageKind) {
  EventQueue q;
  std::vector<int> order;
  q.at(2.0, 0, 0, 0, [&](double) { order.push_back(4); });
  q.at(1.0, 1, 0, 0, [&](double) { order.push_back(3); });
  q.at(1.0, 0, 5, 0, [&](double) { order.push_back(2); });
  q.at(1.0, 0, 1, 2, [&](double) { order.push_back(1); });
  q.at(1.0, 0, 1, 0, [&](double) { order.push_back(0); });
  q.run();
  EXPECT_EQ(order, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_THROW(q.at(0.5, 0, 0, 0, [](double) {}), Error);
}

TEST(Sim, ZeroGenLenHasNoDecodeTokens) {
  auto c = one_layer(1);
  c.run.gen_len = 0;
  auto r = simulate(c);
  EXPECT_EQ(r.decode_tokens, 0u);
  EXPECT_EQ(r.prefill_tokens, 1u);
  EXPECT_THROW(breakdown(r.timeline, Phase::kDecode), Error);
}

TEST(Sim, EmptyPromptAndOverflowRejected) {
  auto c = one_layer(1);
  c.run.prompt_len = 0;
  EXPECT_THROW(simulate(c), ConfigError);
  c.run.prompt_len = c.model.max_seq_len;
  c.run.gen_len = 1;
  EXPECT_THROW(simulate(c), ConfigError);
}

TEST(Sim, Deterministic) {
  auto c = one_layer(4);
  auto a = simulate(c);
  auto b = simulate(c);
  EXPECT_TRUE(a.timeline == b.timeline);
  EXPECT_EQ(a.events_processed, b.events_processed);
}

TEST(Sim, TokenCountsAndIncreasingTokenDone) {
  auto c = one_layer(2);
  c.run.prompt_len = 3;
  c.run.gen_len = 5;
  auto r = simulate(c);
  EXPECT_EQ(r.prefill_tokens, 3u);
  EXPECT_EQ(r.decode_tokens, 5u);
  const auto& toks = r.timeline.tokens();
  ASSERT_EQ(toks.size(), 8u);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    EXPECT_EQ(toks[i].index, i);
    EXPECT_EQ(toks[i].position, i);
    EXPECT_EQ(toks[i].phase, i < 3 ? Phase::kPrefill : Phase::kDecode);
    if (i) {
      EXPECT_GT(toks[i].end, toks[i - 1].end);
      EXPECT_EQ(toks[i].start, toks[i - 1].end);
    }
  }
}

TEST(Sim, EventsSortedAndCausal) {
  auto r = simulate(one_layer(4));
  auto ev = r.timeline.events();
  for (std::size_t i = 1; i < ev.size(); ++i) EXPECT_LE(ev[i - 1].time, ev[i].time);
  for (const auto& a : r.timeline.activities()) EXPECT_LE(a.start, a.end);
  // Per node and token, stage k+1 begins no earlier than stage k ends.
  std::map<std::tuple<std::size_t, std::size_t>, std::vector<StageRecord>> by;
  for (const auto& s : stage_records(r.timeline)) by[{s.node, s.token}].push_back(s);
  for (auto& [key, v] : by) {
    std::sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.layer * 8 + a.stage < b.layer * 8 + b.stage; });
    for (std::size_t i = 1; i < v.size(); ++i) EXPECT_GE(v[i].begin, v[i - 1].end);
  }
}

TEST(Sim, OneActivationPerStageForOneLayer) {
  auto c = one_layer(1);
  c.run.gen_len = 1;
  auto r = simulate(c);
  std::map<std::pair<std::size_t, std::size_t>, int> count;
  for (const auto& s : stage_records(r.timeline)) ++count[{s.token, s.stage}];
  EXPECT_EQ(count.size(), 2u * kStagesPerBlock);
  for (auto& [k, v] : count) EXPECT_EQ(v, 1);
}

TEST(Sim, TwoLayersTakeTwiceAsLong) {
  auto c = one_layer(2);
  const double one = decode_latency(c);
  c.model.n_layers = 2;
  const double two = decode_latency(c);
  EXPECT_NEAR(two / one, 2.0, 0.02);
}

TEST(Sim, NoNetworkBetweenQkvAndMha) {
  auto r = simulate(one_layer(4));
  for (const auto& a : r.timeline.activities()) {
    if (a.type == ActivityType::kNet) {
      EXPECT_NE(a.stage, 2) << "QKV output is head-local";
    }
  }
}

TEST(Sim, KernelExclusivityAcrossFlagsAndNodes) {
  for (std::size_t n : {1, 2, 4}) {
    for (auto f : all_flags()) {
      auto r = simulate(one_layer(n, f));
      auto bad = exclusivity_violations(r.timeline);
      EXPECT_TRUE(bad.empty()) << n << " nodes: " << (bad.empty() ? "" : bad.front());
    }
  }
}

TEST(Sim, FlagsNeverSlowDown) {
  for (std::size_t n : {1, 2, 4}) {
    for (auto f : all_flags()) {
      const double base = decode_latency(one_layer(n, f));
      for (int bit = 0; bit < 3; ++bit) {
        OptFlags g = f;
        bool* fields[] = {&g.fused_ln_res, &g.headwise_pipeline, &g.sync_overlap};
        if (*fields[bit]) continue;
        *fields[bit] = true;
        EXPECT_LE(decode_latency(one_layer(n, g)), base * (1 + 1e-12)) << n << " bit " << bit;
      }
    }
  }
  EXPECT_LT(decode_latency(one_layer(1, {true, false, false})), decode_latency(one_layer(1, OptFlags::all_off())));
}

TEST(Sim, MoreNodesFaster) {
  double prev = decode_latency(one_layer(1));
  for (std::size_t n : {2, 4}) {
    const double cur = decode_latency(one_layer(n));
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(Sim, BreakdownSumsToHundred) {
  for (std::size_t n : {1, 4}) {
    auto r = simulate(one_layer(n, OptFlags::all_off()));
    auto b = breakdown(r.timeline, Phase::kDecode);
    EXPECT_NEAR(b.linear_mha_pct + b.critical_pct + b.exposed_sync_pct, 100.0, 1e-9);
    EXPECT_GE(b.exposed_sync_pct, -1e-9);
    if (n == 1) {
      EXPECT_NEAR(b.exposed_sync_pct, 0.0, 1e-9);
    }
  }
}

TEST(Breakdown, SyntheticSingleMpActivity) {
  for (double scale : {1.0, 1e-6, 37.5}) {
    Timeline tl;
    Activity a;
    a.kernel = KernelKind::kMp;
    a.start = 0.0;
    a.end = 2.0 * scale;
    tl.record(a);
    tl.close_token(0, Phase::kDecode, 0, 0.0, 2.0 * scale, 1, true);
    auto b = breakdown(tl, Phase::kDecode);
    EXPECT_DOUBLE_EQ(b.linear_mha_pct, 100.0);
    EXPECT_DOUBLE_EQ(b.critical_pct, 0.0);
    EXPECT_DOUBLE_EQ(b.exposed_sync_pct, 0.0);
  }
}

TEST(Breakdown, RescalingInvariant) {
  auto make = [](double k) {
    Timeline tl;
    auto add = [&](KernelKind kind, double s, double e) {
      Activity a;
      a.kernel = kind;
      a.start = s * k;
      a.end = e * k;
      tl.record(a);
    };
    add(KernelKind::kMp, 0, 3);
    add(KernelKind::kMha, 2, 5);
    add(KernelKind::kLnRes, 6, 7);
    tl.close_token(0, Phase::kDecode, 0, 0.0, 10 * k, 1, true);
    return breakdown(tl, Phase::kDecode);
  };
  auto a = make(1.0);
  EXPECT_DOUBLE_EQ(a.linear_mha_pct, 50.0);
  EXPECT_DOUBLE_EQ(a.critical_pct, 10.0);
  EXPECT_DOUBLE_EQ(a.exposed_sync_pct, 40.0);
  auto b = make(1e-7);
  EXPECT_NEAR(a.linear_mha_pct, b.linear_mha_pct, 1e-9);
  EXPECT_NEAR(a.critical_pct, b.critical_pct, 1e-9);
  EXPECT_NEAR(a.exposed_sync_pct, b.exposed_sync_pct, 1e-9);
}

TEST(Breakdown, EmptyTimelineRejected) {
  Timeline tl;
  EXPECT_THROW(breakdown(tl, Phase::kDecode), Error);
}

TEST(Timeline, RejectsBackwardsActivityAndTokenTime) {
  Timeline tl;
  Activity a;
  a.start = 2.0;
  a.end = 1.0;
  EXPECT_THROW(tl.record(a), Error);
  tl.close_token(0, Phase::kDecode, 0, 0.0, 1.0, 1, true);
  EXPECT_THROW(tl.close_token(1, Phase::kDecode, 1, 1.0, 1.0, 1, true), Error);
}

TEST(Timeline, TraceTokensLimitsRetention) {
  auto c = one_layer(2);
  c.run.gen_len = 3;
  c.run.trace_tokens = 1;
  auto r = simulate(c);
  EXPECT_EQ(r.timeline.tokens().size(), 4u);
  for (const auto& a : r.timeline.activities()) EXPECT_EQ(a.token, 0u);
  c.run.trace_tokens = -1;
  auto full = simulate(c);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r.timeline.tokens()[i].end, full.timeline.tokens()[i].end);
  }
}

// Per-block sync no longer than the next block's compute: only the final
// block's gather is left on each MP stage.
TEST(Sim, OverlappedSyncExposesOneBlock) {
  auto c = one_layer(2);
  c.run.gen_len = 1;
  const auto plan = build_block_plan(c.model, c.hardware, make_shard_plan(c.model, c.hardware), Phase::kDecode, 2);
  auto r = simulate(c);
  std::size_t checked = 0;
  for (const auto& s : stage_records(r.timeline)) {
    const Stage& st = plan.stages[s.stage - 1];
    if (st.kind != KernelKind::kMp || !st.sync_after) continue;
    for (std::size_t i = 0; i + 1 < st.tiles.size(); ++i) {
      const auto next = mp_tile_cost(st.tiles[i + 1], c.hardware);
      ASSERT_LE(all_gather_time(st.sync_block_bytes[i], c.hardware), mp_mac_time(next, c.hardware));
    }
    EXPECT_NEAR(s.exposed(), all_gather_time(st.sync_block_bytes.back(), c.hardware), 1e-12) << "stage " << s.stage;
    ++checked;
  }
  EXPECT_EQ(checked, 2u * 2 * 3);  // tokens x nodes x gathering MP stages
}

TEST(Sim, SerialSyncExposesEveryBlock) {
  auto c = one_layer(2, {true, true, false});
  c.run.gen_len = 1;
  const auto plan = build_block_plan(c.model, c.hardware, make_shard_plan(c.model, c.hardware), Phase::kDecode, 2);
  auto r = simulate(c);
  for (const auto& s : stage_records(r.timeline)) {
    const Stage& st = plan.stages[s.stage - 1];
    if (st.kind != KernelKind::kMp || !st.sync_after) continue;
    double expect = 0.0;
    for (auto b : st.sync_block_bytes) expect += all_gather_time(b, c.hardware);
    EXPECT_NEAR(s.exposed(), expect, 1e-12) << "stage " << s.stage;
  }
}

TEST(Sim, FunctionalMatchesDirectPipeline) {
  auto qm = generate_weights(desk_model(), 9);
  for (std::size_t n : {1, 2, 4}) {
    auto c = desk(n);
    Simulator sim(c, &qm);
    sim.keep_logits(true);
    auto r = sim.run();
    DirectPipeline direct(qm, make_shard_plan(c.model, c.hardware));
    std::vector<std::vector<float>> logits;
    auto toks = direct.generate(prompt_tokens(c.model, c.run.seed, c.run.prompt_len), c.run.gen_len, &logits);
    EXPECT_EQ(r.generated, toks) << n;
    EXPECT_EQ(r.logits, logits) << n;
  }
}

TEST(Sim, TimingKnobsDoNotChangeOutputs) {
  auto qm = generate_weights(desk_model(), 3);
  auto base = desk(2);
  Simulator ref_sim(base, &qm);
  const auto ref = ref_sim.run().generated;
  ASSERT_EQ(ref.size(), base.run.gen_len);
  for (auto f : all_flags()) {
    auto c = base;
    c.flags = f;
    c.hardware.net_hop_latency = 3e-6;
    c.hardware.mp_tiles = 1;
    Simulator sim(c, &qm);
    EXPECT_EQ(sim.run().generated, ref);
  }
}

TEST(Sim, WeightsMustMatchModel) {
  auto qm = generate_weights(desk_model(), 1);
  auto c = desk(1);
  c.model.n_layers = 3;
  EXPECT_THROW(Simulator(c, &qm), ConfigError);
}
