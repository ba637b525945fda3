#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "looplynx/report.hpp"

using namespace looplynx;

namespace {

SimConfig small(std::size_t nodes) {
  SimConfig c;
  c.model.n_layers = 1;
  c.hardware.n_nodes = nodes;
  c.run.prompt_len = 2;
  c.run.gen_len = 3;
  return c;
}

}  // namespace

TEST(Report, PercentileNearestRank) {
  std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  EXPECT_EQ(percentile(v, 50), 5);
  EXPECT_EQ(percentile(v, 90), 9);
  EXPECT_EQ(percentile(v, 99), 10);
  EXPECT_EQ(percentile(v, 0), 1);
  EXPECT_EQ(percentile({}, 50), 0);
}

TEST(Report, TokensPerSecondIsDecodeTokensOverDecodeTime) {
  auto c = small(2);
  auto r = simulate(c);
  auto j = make_report(c, r);
  double total = 0.0;
  for (const auto& t : r.timeline.tokens()) {
    if (t.phase == Phase::kDecode) total += t.latency();
  }
  EXPECT_NEAR(j["tokens_per_sec"].get<double>(), 3.0 / total, 1e-9 * (3.0 / total));
  EXPECT_EQ(j["decode"]["tokens"], 3);
  EXPECT_EQ(j["prefill"]["tokens"], 2);
  EXPECT_NEAR(j["decode"]["total_ms"].get<double>(), total * 1e3, 1e-12);
  EXPECT_FALSE(j["functional"].get<bool>());
  for (const char* k : {"linear_mha_pct", "critical_path_pct", "exposed_sync_pct"}) {
    EXPECT_TRUE(j["breakdown"]["decode"].contains(k)) << k;
  }
}

TEST(Report, IdenticalRunsDifferOnlyInTimestamp) {
  auto c = small(4);
  auto a = make_report(c, simulate(c));
  auto b = make_report(c, simulate(c));
  a.erase("generated_at");
  b.erase("generated_at");
  EXPECT_EQ(a, b);
}

TEST(Report, ConfigHashTracksConfig) {
  auto c = small(1);
  const auto h = config_hash(c);
  EXPECT_EQ(h.size(), 8u);
  EXPECT_EQ(config_hash(c), h);
  c.hardware.n_nodes = 2;
  EXPECT_NE(config_hash(c), h);
}

TEST(Report, SpeedupIsThroughputRatio) {
  auto c1 = small(1);
  auto c2 = small(2);
  auto base = make_report(c1, simulate(c1));
  auto mine = make_report(c2, simulate(c2));
  attach_speedup(mine, base);
  const double expect = mine["tokens_per_sec"].get<double>() / base["tokens_per_sec"].get<double>();
  EXPECT_NEAR(mine["speedup"].get<double>(), expect, 1e-9);
  EXPECT_GT(mine["speedup"].get<double>(), 1.0);
  EXPECT_EQ(mine["baseline"]["n_nodes"], 1);
  base["tokens_per_sec"] = 0.0;
  EXPECT_THROW(attach_speedup(mine, base), Error);
}

TEST(Report, TraceSchema) {
  auto c = small(2);
  auto r = simulate(c);
  std::ostringstream os;
  write_trace(os, r.timeline, 2);
  auto j = nlohmann::json::parse(os.str());
  ASSERT_TRUE(j.is_array());
  std::size_t x = 0;
  std::set<std::string> cats;
  for (const auto& e : j) {
    for (const char* k : {"name", "ph", "ts", "dur", "pid", "tid"}) ASSERT_TRUE(e.contains(k)) << k;
    EXPECT_GE(e["dur"].get<double>(), 0.0);
    EXPECT_LT(e["pid"].get<int>(), 2);
    if (e["ph"] == "X") {
      ++x;
      ASSERT_TRUE(e.contains("cat"));
      cats.insert(e["cat"].get<std::string>());
      EXPECT_GE(e["tid"].get<int>(), 1);
    } else {
      EXPECT_EQ(e["ph"], "M");
    }
  }
  EXPECT_EQ(x, r.timeline.activities().size());
  EXPECT_EQ(cats, (std::set<std::string>{"MP", "MHA", "LN_RES", "AUX", "NET", "STAGE"}));
  // Timestamps are microseconds.
  const auto& last = r.timeline.activities().back();
  bool found = false;
  for (const auto& e : j) {
    if (e["ph"] == "X" && std::abs(e["ts"].get<double>() - last.start * 1e6) < 1e-9) found = true;
  }
  EXPECT_TRUE(found);
}

TEST(Report, TokenCsvOneRowPerToken) {
  auto c = small(2);
  auto r = simulate(c);
  std::ostringstream os;
  write_token_csv(os, r.timeline);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line.rfind("token,phase,position", 0), 0u);
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 10);
  }
  EXPECT_EQ(rows, 5u);
}
