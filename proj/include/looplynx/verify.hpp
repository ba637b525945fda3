#pragma once

// Oracle-equivalence checks behind `looplynx verify`. Each check compares a
// production path against an independent, simpler computation.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "looplynx/attention.hpp"
#include "looplynx/config.hpp"
#include "looplynx/engine.hpp"
#include "looplynx/model.hpp"
#include "looplynx/quant.hpp"
#include "looplynx/ring.hpp"
#include "looplynx/shard.hpp"
#include "looplynx/sim.hpp"

namespace looplynx {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline double cosine(std::span<const float> a, std::span<const float> b) {
  double ab = 0.0;
  double aa = 0.0;
  double bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return aa == bb ? 1.0 : 0.0;
  return ab / std::sqrt(aa * bb);
}

/// Cosine similarity between the quantized and float outputs of block 0
/// for one token at position 0. Compares the block's FFN output, which is
/// what quantization touches; the residual passthrough would inflate it.
inline double block_cosine(const ModelConfig& cfg, std::uint64_t seed) {
  auto fm = generate_float_model(cfg, seed);
  auto calib = calibration_tokens(cfg, seed);
  auto qm = quantize_model(fm, calib);
  const std::size_t token = std::size_t(std::mt19937_64(seed + 17)() % cfg.vocab_size);

  FloatState st(cfg);
  st.x = embed(fm.wte, fm.wpe, token, 0);
  float_block(fm.layers[0], cfg, st.caches[0], st);

  HardwareConfig hw;
  auto plan = make_shard_plan(cfg, hw);
  NodeEngine eng(qm, plan, 0);
  eng.begin_token(token, 0);
  for (std::size_t s = 0; s < kStagesPerBlock; ++s) {
    auto chunk = eng.execute(StageOp(s), 0);
    if (chunk) eng.accept(StageOp(s), 0, std::move(*chunk));
  }
  return cosine(eng.pending(), st.x);
}

inline std::vector<std::int32_t> brute_matvec(std::span<const std::int8_t> w, std::size_t rows, std::size_t cols,
                                              std::span<const std::int8_t> v) {
  std::vector<std::int32_t> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::int64_t acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::int64_t(w[r * cols + c]) * std::int64_t(v[c]);
    out[r] = std::int32_t(acc);
  }
  return out;
}

inline std::vector<CheckResult> run_verify(const SimConfig& base, const QuantModel& qm) {
  std::vector<CheckResult> out;
  auto check = [&](std::string name, const std::function<std::string()>& fn) {
    try {
      std::string fail = fn();
      out.push_back({std::move(name), fail.empty(), fail.empty() ? "ok" : fail});
    } catch (const std::exception& e) {
      out.push_back({std::move(name), false, std::string("exception: ") + e.what()});
    }
  };
  const auto& cfg = base.model;

  check("matvec_i8 vs brute force (2000 instances)", [] {
    std::mt19937_64 gen(7);
    std::uniform_int_distribution<int> val(-127, 127);
    std::uniform_int_distribution<std::size_t> dim(1, 24);
    for (int trial = 0; trial < 2000; ++trial) {
      const std::size_t r = dim(gen);
      const std::size_t c = dim(gen);
      std::vector<std::int8_t> w(r * c);
      std::vector<std::int8_t> v(c);
      for (auto& x : w) x = std::int8_t(val(gen));
      for (auto& x : v) x = std::int8_t(val(gen));
      if (matvec_i8_rows(w, c, v, 0, r) != brute_matvec(w, r, c, v)) return "mismatch at trial " + std::to_string(trial);
    }
    return std::string();
  });

  check("quantized block vs float block (cosine >= 0.99, 10 seeds)", [&] {
    double worst = 1.0;
    for (std::uint64_t s = 1; s <= 10; ++s) worst = std::min(worst, block_cosine(cfg, s));
    if (worst < 0.99) return "worst cosine " + std::to_string(worst);
    return std::string();
  });

  check("sharded attention vs unsharded", [&] {
    std::mt19937_64 gen(11);
    std::normal_distribution<float> nd;
    const std::size_t t = 9;
    const std::size_t hd = cfg.head_dim;
    KVCache full(cfg.n_heads, hd, t);
    std::vector<float> q(cfg.l_embed);
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<float> k(cfg.l_embed);
      std::vector<float> v(cfg.l_embed);
      for (auto& x : k) x = nd(gen);
      for (auto& x : v) x = nd(gen);
      full.append(k, v);
    }
    for (auto& x : q) x = nd(gen);
    const auto ref = mha_decode(full, q, default_attn_scale(hd));
    for (std::size_t n : {2, 4}) {
      if (cfg.n_heads % n) continue;
      std::vector<float> cat;
      const std::size_t per = cfg.n_heads / n;
      for (std::size_t node = 0; node < n; ++node) {
        KVCache part(per, hd, t);
        for (std::size_t i = 0; i < t; ++i) {
          std::vector<float> k;
          std::vector<float> v;
          for (std::size_t h = node * per; h < (node + 1) * per; ++h) {
            auto kh = full.keys(h).subspan(i * hd, hd);
            auto vh = full.values(h).subspan(i * hd, hd);
            k.insert(k.end(), kh.begin(), kh.end());
            v.insert(v.end(), vh.begin(), vh.end());
          }
          part.append(k, v);
        }
        auto qs = std::span<const float>(q).subspan(node * per * hd, per * hd);
        auto o = mha_decode(part, qs, default_attn_scale(hd));
        cat.insert(cat.end(), o.begin(), o.end());
      }
      if (cat != ref) return "mismatch at " + std::to_string(n) + " nodes";
    }
    return std::string();
  });

  check("ring all_gather vs concatenation", [] {
    std::mt19937_64 gen(5);
    for (std::size_t n : {1, 2, 4, 8}) {
      std::vector<std::vector<std::int8_t>> chunks(n, std::vector<std::int8_t>(100));
      std::vector<std::int8_t> cat;
      for (auto& c : chunks) {
        for (auto& x : c) x = std::int8_t(gen());
        cat.insert(cat.end(), c.begin(), c.end());
      }
      auto g = all_gather(chunks, 32);
      for (const auto& b : g.buffers) {
        if (b != cat) return "buffer differs at " + std::to_string(n) + " nodes";
      }
    }
    return std::string();
  });

  SimConfig desk = base;
  desk.run.prompt_len = std::min<std::size_t>(desk.run.prompt_len, 6);
  desk.run.gen_len = std::min<std::size_t>(desk.run.gen_len, 6);
  const auto prompt = prompt_tokens(cfg, desk.run.seed, desk.run.prompt_len);

  std::vector<std::vector<float>> ref_logits;
  std::vector<std::size_t> ref_tokens;
  check("1-node direct path runs", [&] {
    HardwareConfig hw = desk.hardware;
    hw.n_nodes = 1;
    DirectPipeline direct(qm, make_shard_plan(cfg, hw));
    ref_tokens = direct.generate(prompt, desk.run.gen_len, &ref_logits);
    return std::string();
  });

  for (std::size_t n : {1, 2, 4}) {
    if (cfg.n_heads % n || cfg.l_embed % n || cfg.ffn_dim % n) continue;
    SimConfig c = desk;
    c.hardware.n_nodes = n;
    check("simulated " + std::to_string(n) + "-node logits equal the 1-node direct path bitwise", [&] {
      Simulator sim(c, &qm);
      sim.keep_logits(true);
      auto r = sim.run(prompt);
      if (r.logits != ref_logits) return std::string("logits differ");
      if (r.generated != ref_tokens) return std::string("generated tokens differ");
      return std::string();
    });
  }
  return out;
}

}  // namespace looplynx
