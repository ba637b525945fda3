// looplynx: run, verify, genweights, sweep.
//
// Exit codes: 0 ok, 1 usage, 2 config/IO, 3 verification failure.

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "looplynx/looplynx.hpp"
#include "looplynx/verify.hpp"

namespace fs = std::filesystem;
using namespace looplynx;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

constexpr const char* kOutDirEnv = "LOOPLYNX_OUT_DIR";

struct Overrides {
  std::string config;
  std::optional<std::size_t> nodes;
  std::optional<std::size_t> prompt_len;
  std::optional<std::size_t> gen_len;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> trace_tokens;
  std::optional<std::string> weights;
  std::optional<bool> fused_ln_res;
  std::optional<bool> headwise_pipeline;
  std::optional<bool> sync_overlap;
  bool all_off = false;

  void add_to(CLI::App* app, bool with_nodes = true) {
    app->add_option("config", config, "Config file (JSON)")->required()->check(CLI::ExistingFile);
    if (with_nodes) app->add_option("-n,--nodes", nodes, "Override hardware.n_nodes");
    app->add_option("--prompt-len", prompt_len, "Override run.prompt_len");
    app->add_option("--gen-len", gen_len, "Override run.gen_len");
    app->add_option("--seed", seed, "Override run.seed");
    app->add_option("--trace-tokens", trace_tokens, "Tokens kept in the trace (negative: all)");
    app->add_option("-w,--weights", weights, "Weight file; enables functional execution");
    app->add_option("--fused-ln-res", fused_ln_res, "Override flags.fused_ln_res");
    app->add_option("--headwise-pipeline", headwise_pipeline, "Override flags.headwise_pipeline");
    app->add_option("--sync-overlap", sync_overlap, "Override flags.sync_overlap");
    app->add_flag("--flags-off", all_off, "Disable every optimization flag before overrides");
  }

  SimConfig load() const {
    SimConfig c = load_config(config);
    if (nodes) c.hardware.n_nodes = *nodes;
    if (prompt_len) c.run.prompt_len = *prompt_len;
    if (gen_len) c.run.gen_len = *gen_len;
    if (seed) c.run.seed = *seed;
    if (trace_tokens) c.run.trace_tokens = *trace_tokens;
    if (weights) c.run.weights = *weights;
    if (all_off) c.flags = OptFlags::all_off();
    if (fused_ln_res) c.flags.fused_ln_res = *fused_ln_res;
    if (headwise_pipeline) c.flags.headwise_pipeline = *headwise_pipeline;
    if (sync_overlap) c.flags.sync_overlap = *sync_overlap;
    require_valid(c.model, c.hardware);
    return c;
  }
};

std::string resolve_out_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return "looplynx_out";
}

std::unique_ptr<QuantModel> load_model(const SimConfig& c) {
  if (c.run.weights.empty()) return nullptr;
  auto m = std::make_unique<QuantModel>(load_weights(c.run.weights));
  if (!(m->cfg == c.model)) throw ConfigError("weight file " + c.run.weights + " was built for a different model shape");
  return m;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << text;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void print_summary(const nlohmann::json& r) {
  std::printf("nodes %zu  decode %.4f ms/token (p50 %.4f, p99 %.4f)  %.2f tokens/s",
              r["n_nodes"].get<std::size_t>(), r["decode"]["mean_ms"].get<double>(),
              r["decode"]["p50_ms"].get<double>(), r["decode"]["p99_ms"].get<double>(),
              r["tokens_per_sec"].get<double>());
  if (r.contains("speedup")) std::printf("  speedup %.3fx", r["speedup"].get<double>());
  std::printf("\n");
  if (r["breakdown"].contains("decode")) {
    const auto& b = r["breakdown"]["decode"];
    std::printf("decode breakdown: linear+MHA %.1f%%  critical-path %.1f%%  exposed sync %.1f%%\n",
                b["linear_mha_pct"].get<double>(), b["critical_path_pct"].get<double>(),
                b["exposed_sync_pct"].get<double>());
  }
}

int cmd_run(const Overrides& ov, const std::string& out_flag, const std::string& baseline) {
  const SimConfig cfg = ov.load();
  auto model = load_model(cfg);
  const fs::path out = resolve_out_dir(out_flag);
  fs::create_directories(out);

  auto result = simulate(cfg, model.get());
  auto report = make_report(cfg, result);
  if (!baseline.empty()) attach_speedup(report, read_json(baseline));

  write_file(out / "report.json", report.dump(2) + "\n");
  {
    std::ofstream tr(out / "trace.json");
    if (!tr) throw ConfigError("cannot write " + (out / "trace.json").string());
    write_trace(tr, result.timeline, cfg.hardware.n_nodes);
  }
  {
    std::ofstream csv(out / "tokens.csv");
    if (!csv) throw ConfigError("cannot write " + (out / "tokens.csv").string());
    write_token_csv(csv, result.timeline);
  }
  print_summary(report);
  std::printf("wrote %s/{report.json,trace.json,tokens.csv}\n", out.string().c_str());
  return kExitOk;
}

int cmd_verify(const Overrides& ov) {
  const SimConfig cfg = ov.load();
  auto model = load_model(cfg);
  QuantModel generated;
  if (!model) generated = generate_weights(cfg.model, cfg.run.seed);
  const QuantModel& qm = model ? *model : generated;

  int failed = 0;
  for (const auto& r : run_verify(cfg, qm)) {
    std::printf("[%s] %s%s%s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.pass ? "" : ": ",
                r.pass ? "" : r.detail.c_str());
    failed += r.pass ? 0 : 1;
  }
  std::printf("%s (%d failed)\n", failed ? "verification FAILED" : "all checks passed", failed);
  return failed ? kExitVerify : kExitOk;
}

int cmd_genweights(const Overrides& ov, const std::string& out_path) {
  const SimConfig cfg = ov.load();
  auto qm = generate_weights(cfg.model, cfg.run.seed);
  save_weights(qm, out_path);
  std::printf("wrote %s (seed %llu)\n", out_path.c_str(), static_cast<unsigned long long>(cfg.run.seed));
  return kExitOk;
}

struct SweepPoint {
  std::size_t nodes;
  OptFlags flags;
  std::string label;
};

std::string flag_label(const OptFlags& f) {
  return std::string("ln") + (f.fused_ln_res ? "1" : "0") + "_hw" + (f.headwise_pipeline ? "1" : "0") + "_so" +
         (f.sync_overlap ? "1" : "0");
}

int cmd_sweep(const Overrides& ov, const std::string& out_flag, std::vector<std::size_t> node_list,
              bool flag_grid, std::size_t threads) {
  const SimConfig base = ov.load();
  auto model = load_model(base);
  const fs::path out = fs::path(resolve_out_dir(out_flag)) / "sweep";
  fs::create_directories(out);

  std::vector<OptFlags> flag_sets{base.flags};
  if (flag_grid) {
    flag_sets.clear();
    for (int m = 0; m < 8; ++m) flag_sets.push_back({bool(m & 1), bool(m & 2), bool(m & 4)});
  }
  std::vector<SweepPoint> points;
  for (auto n : node_list) {
    for (const auto& f : flag_sets) points.push_back({n, f, "n" + std::to_string(n) + "_" + flag_label(f)});
  }
  // Validate every point before spending time on any.
  for (const auto& p : points) {
    HardwareConfig hw = base.hardware;
    hw.n_nodes = p.nodes;
    require_valid(base.model, hw);
  }

  std::vector<nlohmann::json> reports(points.size());
  std::vector<std::string> errors(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        SimConfig c = base;
        c.hardware.n_nodes = points[i].nodes;
        c.flags = points[i].flags;
        reports[i] = make_report(c, simulate(c, model.get()));
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t nthreads = std::max<std::size_t>(1, std::min(threads, points.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::ofstream summary(out / "summary.csv");
  summary << "nodes,fused_ln_res,headwise_pipeline,sync_overlap,decode_ms,tokens_per_sec,linear_mha_pct,"
             "critical_path_pct,exposed_sync_pct\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!errors[i].empty()) throw ConfigError("sweep point " + points[i].label + ": " + errors[i]);
    const auto& r = reports[i];
    write_file(out / (points[i].label + ".json"), r.dump(2) + "\n");
    const auto& f = points[i].flags;
    const auto& b = r["breakdown"].value("decode", nlohmann::json::object());
    summary << points[i].nodes << "," << f.fused_ln_res << "," << f.headwise_pipeline << "," << f.sync_overlap << ","
            << r["decode"]["mean_ms"].get<double>() << "," << r["tokens_per_sec"].get<double>() << ","
            << b.value("linear_mha_pct", 0.0) << "," << b.value("critical_path_pct", 0.0) << ","
            << b.value("exposed_sync_pct", 0.0) << "\n";
    std::printf("%-24s %.4f ms/token  %.2f tokens/s\n", points[i].label.c_str(), r["decode"]["mean_ms"].get<double>(),
                r["tokens_per_sec"].get<double>());
  }
  std::printf("wrote %zu reports and summary.csv to %s\n", points.size(), out.string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LoopLynx multi-node accelerator simulator"};
  app.require_subcommand(1);

  Overrides run_ov;
  std::string run_out;
  std::string baseline;
  auto* run = app.add_subcommand("run", "Simulate prefill + decode and write report, trace and token table");
  run_ov.add_to(run);
  run->add_option("-o,--out-dir", run_out, std::string("Output directory (env ") + kOutDirEnv + ")");
  run->add_option("--baseline", baseline, "Baseline report.json for the speed-up field")->check(CLI::ExistingFile);

  Overrides ver_ov;
  auto* ver = app.add_subcommand("verify", "Run the oracle-equivalence checks on a desk-scale config");
  ver_ov.add_to(ver);

  Overrides gen_ov;
  std::string gen_out = "weights.llxw";
  auto* gen = app.add_subcommand("genweights", "Generate deterministic random W8A8 weights");
  gen_ov.add_to(gen, false);
  gen->add_option("-o,--out", gen_out, "Weight file to write");

  Overrides sw_ov;
  std::string sw_out;
  std::vector<std::size_t> sw_nodes{1, 2, 4};
  bool sw_flag_grid = false;
  std::size_t sw_threads = std::max(1u, std::thread::hardware_concurrency());
  auto* sweep = app.add_subcommand("sweep", "Run the cartesian product of node counts and flag sets");
  sw_ov.add_to(sweep, false);
  sweep->add_option("-o,--out-dir", sw_out, std::string("Output directory (env ") + kOutDirEnv + ")");
  sweep->add_option("--node-list", sw_nodes, "Node counts")->delimiter(',');
  sweep->add_flag("--flag-grid", sw_flag_grid, "Sweep all 8 flag combinations");
  sweep->add_option("-j,--threads", sw_threads, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (run->parsed()) return cmd_run(run_ov, run_out, baseline);
    if (ver->parsed()) return cmd_verify(ver_ov);
    if (gen->parsed()) return cmd_genweights(gen_ov, gen_out);
    if (sweep->parsed()) return cmd_sweep(sw_ov, sw_out, sw_nodes, sw_flag_grid, sw_threads);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const WeightFileError& e) {
    std::fprintf(stderr, "weight file error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitUsage;
}
