#pragma once

// Run report (JSON), trace-event timeline and per-token latency table.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "looplynx/config.hpp"
#include "looplynx/sim.hpp"
#include "looplynx/weights_io.hpp"

namespace looplynx {

struct LatencyStats {
  std::size_t tokens = 0;
  double total = 0.0;
  double mean = 0.0;
  double p50 = 0.0;
  double p90 = 0.0;
  double p99 = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// Nearest-rank percentile of an ascending sample.
inline double percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const std::size_t rank = std::size_t(std::ceil(p / 100.0 * double(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

inline LatencyStats latency_stats(const Timeline& tl, Phase phase) {
  std::vector<double> lat;
  for (const auto& t : tl.tokens()) {
    if (t.phase == phase) lat.push_back(t.latency());
  }
  LatencyStats s;
  s.tokens = lat.size();
  if (lat.empty()) return s;
  for (double v : lat) s.total += v;
  s.mean = s.total / double(lat.size());
  std::sort(lat.begin(), lat.end());
  s.p50 = percentile(lat, 50);
  s.p90 = percentile(lat, 90);
  s.p99 = percentile(lat, 99);
  s.min = lat.front();
  s.max = lat.back();
  return s;
}

inline std::string config_hash(const SimConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x",
                unsigned(detail::crc32(reinterpret_cast<const unsigned char*>(text.data()), text.size())));
  return buf;
}

inline nlohmann::json to_json(const LatencyStats& s) {
  return {{"tokens", s.tokens},         {"total_ms", s.total * 1e3}, {"mean_ms", s.mean * 1e3},
          {"p50_ms", s.p50 * 1e3},      {"p90_ms", s.p90 * 1e3},     {"p99_ms", s.p99 * 1e3},
          {"min_ms", s.min * 1e3},      {"max_ms", s.max * 1e3}};
}

inline nlohmann::json to_json(const Breakdown& b) {
  return {{"tokens", b.tokens},
          {"linear_mha_pct", b.linear_mha_pct},
          {"critical_path_pct", b.critical_pct},
          {"exposed_sync_pct", b.exposed_sync_pct},
          {"mp_ms", b.mp * 1e3},
          {"mha_ms", b.mha * 1e3},
          {"ln_res_ms", b.ln_res * 1e3},
          {"aux_ms", b.aux * 1e3}};
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Decode tokens per second of simulated time.
inline double tokens_per_sec(const LatencyStats& decode) {
  return decode.total > 0.0 ? double(decode.tokens) / decode.total : 0.0;
}

inline nlohmann::json make_report(const SimConfig& cfg, const SimResult& r) {
  const auto pre = latency_stats(r.timeline, Phase::kPrefill);
  const auto dec = latency_stats(r.timeline, Phase::kDecode);
  nlohmann::json j;
  j["generated_at"] = utc_timestamp();
  j["config"] = to_json(cfg);
  j["config_hash"] = config_hash(cfg);
  j["n_nodes"] = cfg.hardware.n_nodes;
  j["prefill"] = to_json(pre);
  j["decode"] = to_json(dec);
  j["tokens_per_sec"] = tokens_per_sec(dec);
  j["events_processed"] = r.events_processed;
  nlohmann::json bd = nlohmann::json::object();
  if (pre.tokens) bd["prefill"] = to_json(breakdown(r.timeline, Phase::kPrefill));
  if (dec.tokens) bd["decode"] = to_json(breakdown(r.timeline, Phase::kDecode));
  j["breakdown"] = bd;
  j["functional"] = !cfg.run.weights.empty();
  if (!r.generated.empty()) j["generated_tokens"] = r.generated;
  return j;
}

/// Adds the speed-up of `report` over `baseline` (both RunReport JSON).
inline void attach_speedup(nlohmann::json& report, const nlohmann::json& baseline) {
  const double base = baseline.at("tokens_per_sec").get<double>();
  const double mine = report.at("tokens_per_sec").get<double>();
  if (!(base > 0.0)) throw Error("baseline report has no decode throughput");
  report["baseline"] = {{"config_hash", baseline.value("config_hash", "")},
                        {"n_nodes", baseline.value("n_nodes", 0)},
                        {"tokens_per_sec", base}};
  report["speedup"] = mine / base;
}

// Trace thread ids: one per hardware unit, plus stage spans.
inline int trace_tid(const Activity& a) { return int(a.unit) + 1; }

inline std::string trace_name(const Activity& a) {
  const auto stage = std::string(stage_name(StageOp(a.stage - 1)));
  switch (a.type) {
    case ActivityType::kKernel: return stage + "." + std::string(unit_name(a.unit));
    case ActivityType::kNet: return stage + ".round" + std::to_string(a.round);
    case ActivityType::kStage: return stage;
  }
  return stage;
}

inline std::string trace_cat(const Activity& a) {
  switch (a.type) {
    case ActivityType::kKernel: return std::string(kernel_name(a.kernel));
    case ActivityType::kNet: return "NET";
    case ActivityType::kStage: return "STAGE";
  }
  return "?";
}

/// Writes a JSON array of complete ("X") events; timestamps are virtual
/// microseconds.
inline void write_trace(std::ostream& os, const Timeline& tl, std::size_t n_nodes) {
  os << "[\n";
  bool first = true;
  auto emit = [&](const nlohmann::json& e) {
    if (!first) os << ",\n";
    first = false;
    os << e.dump();
  };
  for (std::size_t n = 0; n < n_nodes; ++n) {
    emit({{"name", "process_name"}, {"ph", "M"}, {"ts", 0}, {"dur", 0}, {"pid", n}, {"tid", 0},
          {"args", {{"name", "node " + std::to_string(n)}}}});
    for (std::size_t u = 0; u < kUnitCount; ++u) {
      emit({{"name", "thread_name"}, {"ph", "M"}, {"ts", 0}, {"dur", 0}, {"pid", n}, {"tid", u + 1},
            {"args", {{"name", std::string(unit_name(Unit(u)))}}}});
    }
  }
  for (const auto& a : tl.activities()) {
    nlohmann::json args = {{"token", a.token}, {"layer", a.layer}, {"stage", a.stage}, {"block", a.block}};
    if (a.type == ActivityType::kNet) {
      args["dst"] = a.peer;
      args["bytes"] = a.bytes;
    }
    emit({{"name", trace_name(a)},
          {"cat", trace_cat(a)},
          {"ph", "X"},
          {"ts", a.start * 1e6},
          {"dur", a.duration() * 1e6},
          {"pid", a.node},
          {"tid", trace_tid(a)},
          {"args", args}});
  }
  os << "\n]\n";
}

inline void write_token_csv(std::ostream& os, const Timeline& tl) {
  os << "token,phase,position,start_us,end_us,latency_us,mp_us,mha_us,ln_res_us,aux_us,exposed_us\n";
  char buf[256];
  for (const auto& t : tl.tokens()) {
    // Nodes are symmetric; node 0 stands for the ring.
    const auto& c = t.nodes.front();
    std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", t.index,
                  std::string(phase_name(t.phase)).c_str(), t.position, t.start * 1e6, t.end * 1e6,
                  t.latency() * 1e6, c.mp * 1e6, c.mha * 1e6, c.ln_res * 1e6, c.aux * 1e6,
                  (t.latency() - c.busy) * 1e6);
    os << buf;
  }
}

}  // namespace looplynx
