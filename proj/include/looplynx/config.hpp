#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "looplynx/error.hpp"

namespace looplynx {

/// Transformer shape. Defaults are the public GPT-2 medium (345M) dimensions.
struct ModelConfig {
  std::size_t n_layers = 24;
  std::size_t l_embed = 1024;
  std::size_t n_heads = 16;
  std::size_t head_dim = 64;
  std::size_t ffn_dim = 4096;
  std::size_t vocab_size = 50257;
  std::size_t max_seq_len = 1024;
  double ln_eps = 1e-5;

  bool operator==(const ModelConfig&) const = default;
};

/// Accelerator knobs. Parallelism and fill values are calibration knobs; the
/// defaults are the shipped calibration (configs/gpt2_medium.json).
struct HardwareConfig {
  std::size_t n_nodes = 1;
  std::size_t n_channel = 16;  // MP slices, one HBM channel each
  std::size_t n_group = 32;    // MAC units per MP slice
  double freq_hz = 285e6;
  double hbm_bw_per_channel = 8.49e9;  // bytes/s
  double net_bw = 8.49e9;              // bytes/s per ring link
  double net_hop_latency = 0.15e-6;    // seconds per ring round
  std::size_t datapack_bytes = 32;

  // Fused MP kernel
  std::size_t mp_tiles = 4;  // row blocks per MP activation
  std::size_t mp_fill_cycles = 16;

  // Fused MHA kernel
  std::size_t mha_parallelism = 256;  // MACs/cycle per MAC unit
  std::size_t softmax_parallelism = 16;
  std::size_t mha_fill_cycles = 8;
  std::size_t mha_k_channels = 8;
  std::size_t mha_v_channels = 8;

  // Critical-path units
  std::size_t ln_parallelism = 2;           // fused LN&Res kernel
  std::size_t ln_parallelism_unfused = 1;   // baseline residual/LN units
  std::size_t aux_parallelism = 2;

  bool operator==(const HardwareConfig&) const = default;
};

struct OptFlags {
  bool fused_ln_res = true;
  bool headwise_pipeline = true;
  bool sync_overlap = true;

  static OptFlags all_off() { return {false, false, false}; }
  bool operator==(const OptFlags&) const = default;
};

struct RunConfig {
  std::size_t prompt_len = 64;
  std::size_t gen_len = 512;
  std::uint64_t seed = 1;
  // Number of leading tokens whose full activity is kept in the timeline;
  // negative keeps everything. Aggregates always cover every token.
  std::int64_t trace_tokens = -1;
  std::string weights;  // empty: timing-only simulation

  bool operator==(const RunConfig&) const = default;
};

struct SimConfig {
  ModelConfig model;
  HardwareConfig hardware;
  RunConfig run;
  OptFlags flags;

  bool operator==(const SimConfig&) const = default;
};

inline bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

/// Every invariant violation of the pair, in a stable order. Empty means ok.
inline std::vector<std::string> validate_config(const ModelConfig& m, const HardwareConfig& hw) {
  std::vector<std::string> errs;
  auto positive = [&](std::size_t v, const char* name) {
    if (v == 0) errs.push_back(std::string(name) + " must be >= 1");
  };
  positive(m.n_layers, "model.n_layers");
  positive(m.l_embed, "model.l_embed");
  positive(m.n_heads, "model.n_heads");
  positive(m.head_dim, "model.head_dim");
  positive(m.ffn_dim, "model.ffn_dim");
  positive(m.vocab_size, "model.vocab_size");
  positive(m.max_seq_len, "model.max_seq_len");
  if (!(m.ln_eps >= 0.0)) errs.push_back("model.ln_eps must be >= 0");
  if (m.n_heads * m.head_dim != m.l_embed) {
    errs.push_back("model.n_heads * model.head_dim (" + std::to_string(m.n_heads * m.head_dim) +
                   ") != model.l_embed (" + std::to_string(m.l_embed) + ")");
  }

  if (!is_power_of_two(hw.n_nodes)) {
    errs.push_back("hardware.n_nodes must be a power of two, got " + std::to_string(hw.n_nodes));
  } else {
    auto divides = [&](std::size_t dim, const char* name) {
      if (dim != 0 && dim % hw.n_nodes != 0) {
        errs.push_back("hardware.n_nodes (" + std::to_string(hw.n_nodes) + ") does not divide " + name +
                       " (" + std::to_string(dim) + ")");
      }
    };
    divides(m.n_heads, "model.n_heads");
    divides(m.l_embed, "model.l_embed");
    divides(m.ffn_dim, "model.ffn_dim");
  }
  positive(hw.n_channel, "hardware.n_channel");
  positive(hw.n_group, "hardware.n_group");
  if (hw.n_group != 0 && hw.datapack_bytes != hw.n_group) {
    errs.push_back("hardware.datapack_bytes (" + std::to_string(hw.datapack_bytes) +
                   ") must equal hardware.n_group (" + std::to_string(hw.n_group) + ") for int8 payloads");
  }
  if (!(hw.freq_hz > 0.0)) errs.push_back("hardware.freq_hz must be > 0");
  if (!(hw.hbm_bw_per_channel > 0.0)) errs.push_back("hardware.hbm_bw_per_channel must be > 0");
  if (!(hw.net_bw > 0.0)) errs.push_back("hardware.net_bw must be > 0");
  if (!(hw.net_hop_latency >= 0.0)) errs.push_back("hardware.net_hop_latency must be >= 0");
  positive(hw.mp_tiles, "hardware.mp_tiles");
  positive(hw.mha_parallelism, "hardware.mha_parallelism");
  positive(hw.softmax_parallelism, "hardware.softmax_parallelism");
  positive(hw.mha_k_channels, "hardware.mha_k_channels");
  positive(hw.mha_v_channels, "hardware.mha_v_channels");
  positive(hw.ln_parallelism, "hardware.ln_parallelism");
  positive(hw.ln_parallelism_unfused, "hardware.ln_parallelism_unfused");
  positive(hw.aux_parallelism, "hardware.aux_parallelism");
  if (hw.ln_parallelism < hw.ln_parallelism_unfused) {
    errs.push_back("hardware.ln_parallelism must be >= hardware.ln_parallelism_unfused");
  }
  return errs;
}

inline void require_valid(const ModelConfig& m, const HardwareConfig& hw) {
  auto errs = validate_config(m, hw);
  if (errs.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw ConfigError(msg);
}

/// Small desk-scale model used by verification and property tests.
inline ModelConfig desk_model() {
  ModelConfig m;
  m.n_layers = 2;
  m.l_embed = 64;
  m.n_heads = 4;
  m.head_dim = 16;
  m.ffn_dim = 256;
  m.vocab_size = 256;
  m.max_seq_len = 64;
  return m;
}

// ---------------------------------------------------------------------------
// JSON config file: sections model / hardware / run / flags. Unknown keys are
// rejected so a typo never silently falls back to a default.
// ---------------------------------------------------------------------------
namespace detail {

class SectionReader {
 public:
  SectionReader(const nlohmann::json& root, std::string name) : name_(std::move(name)) {
    if (!root.contains(name_)) return;
    section_ = &root.at(name_);
    if (!section_->is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.push_back(key);
    if (section_ == nullptr || !section_->contains(key)) return;
    const auto& v = section_->at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected boolean");
        out = v.get<bool>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        out = v.get<std::string>();
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError("expected non-negative integer");
        out = v.get<T>();
      } else {
        if (!v.is_number()) throw ConfigError("expected number");
        out = v.get<T>();
      }
    } catch (const std::exception& e) {
      throw ConfigError("config key " + name_ + "." + key + ": " + e.what());
    }
  }

  void reject_unknown() const {
    if (section_ == nullptr) return;
    for (const auto& [key, _] : section_->items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        throw ConfigError("unknown config key " + name_ + "." + key);
      }
    }
  }

 private:
  std::string name_;
  const nlohmann::json* section_ = nullptr;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline SimConfig parse_config(const nlohmann::json& root, SimConfig cfg = {}) {
  if (!root.is_object()) throw ConfigError("config root must be an object");
  for (const auto& [key, _] : root.items()) {
    if (key != "model" && key != "hardware" && key != "run" && key != "flags") {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  bool head_dim_given = root.contains("model") && root["model"].is_object() && root["model"].contains("head_dim");

  detail::SectionReader m(root, "model");
  m.read("n_layers", cfg.model.n_layers);
  m.read("l_embed", cfg.model.l_embed);
  m.read("n_heads", cfg.model.n_heads);
  m.read("head_dim", cfg.model.head_dim);
  m.read("ffn_dim", cfg.model.ffn_dim);
  m.read("vocab_size", cfg.model.vocab_size);
  m.read("max_seq_len", cfg.model.max_seq_len);
  m.read("ln_eps", cfg.model.ln_eps);
  m.reject_unknown();
  if (!head_dim_given && cfg.model.n_heads != 0) cfg.model.head_dim = cfg.model.l_embed / cfg.model.n_heads;

  detail::SectionReader h(root, "hardware");
  auto& hw = cfg.hardware;
  h.read("n_nodes", hw.n_nodes);
  h.read("n_channel", hw.n_channel);
  h.read("n_group", hw.n_group);
  h.read("freq_hz", hw.freq_hz);
  h.read("hbm_bw_per_channel", hw.hbm_bw_per_channel);
  h.read("net_bw", hw.net_bw);
  h.read("net_hop_latency", hw.net_hop_latency);
  h.read("datapack_bytes", hw.datapack_bytes);
  h.read("mp_tiles", hw.mp_tiles);
  h.read("mp_fill_cycles", hw.mp_fill_cycles);
  h.read("mha_parallelism", hw.mha_parallelism);
  h.read("softmax_parallelism", hw.softmax_parallelism);
  h.read("mha_fill_cycles", hw.mha_fill_cycles);
  h.read("mha_k_channels", hw.mha_k_channels);
  h.read("mha_v_channels", hw.mha_v_channels);
  h.read("ln_parallelism", hw.ln_parallelism);
  h.read("ln_parallelism_unfused", hw.ln_parallelism_unfused);
  h.read("aux_parallelism", hw.aux_parallelism);
  h.reject_unknown();

  detail::SectionReader r(root, "run");
  r.read("prompt_len", cfg.run.prompt_len);
  r.read("gen_len", cfg.run.gen_len);
  r.read("seed", cfg.run.seed);
  r.read("trace_tokens", cfg.run.trace_tokens);
  r.read("weights", cfg.run.weights);
  r.reject_unknown();

  detail::SectionReader f(root, "flags");
  f.read("fused_ln_res", cfg.flags.fused_ln_res);
  f.read("headwise_pipeline", cfg.flags.headwise_pipeline);
  f.read("sync_overlap", cfg.flags.sync_overlap);
  f.reject_unknown();
  return cfg;
}

inline SimConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return parse_config(root);
}

inline nlohmann::json to_json(const SimConfig& c) {
  const auto& m = c.model;
  const auto& hw = c.hardware;
  return {
      {"model",
       {{"n_layers", m.n_layers},
        {"l_embed", m.l_embed},
        {"n_heads", m.n_heads},
        {"head_dim", m.head_dim},
        {"ffn_dim", m.ffn_dim},
        {"vocab_size", m.vocab_size},
        {"max_seq_len", m.max_seq_len},
        {"ln_eps", m.ln_eps}}},
      {"hardware",
       {{"n_nodes", hw.n_nodes},
        {"n_channel", hw.n_channel},
        {"n_group", hw.n_group},
        {"freq_hz", hw.freq_hz},
        {"hbm_bw_per_channel", hw.hbm_bw_per_channel},
        {"net_bw", hw.net_bw},
        {"net_hop_latency", hw.net_hop_latency},
        {"datapack_bytes", hw.datapack_bytes},
        {"mp_tiles", hw.mp_tiles},
        {"mp_fill_cycles", hw.mp_fill_cycles},
        {"mha_parallelism", hw.mha_parallelism},
        {"softmax_parallelism", hw.softmax_parallelism},
        {"mha_fill_cycles", hw.mha_fill_cycles},
        {"mha_k_channels", hw.mha_k_channels},
        {"mha_v_channels", hw.mha_v_channels},
        {"ln_parallelism", hw.ln_parallelism},
        {"ln_parallelism_unfused", hw.ln_parallelism_unfused},
        {"aux_parallelism", hw.aux_parallelism}}},
      {"run",
       {{"prompt_len", c.run.prompt_len},
        {"gen_len", c.run.gen_len},
        {"seed", c.run.seed},
        {"trace_tokens", c.run.trace_tokens},
        {"weights", c.run.weights}}},
      {"flags",
       {{"fused_ln_res", c.flags.fused_ln_res},
        {"headwise_pipeline", c.flags.headwise_pipeline},
        {"sync_overlap", c.flags.sync_overlap}}},
  };
}

}  // namespace looplynx
