#pragma once

// GPT-2 style decoder weights in two forms: the float model (the oracle
// side) and its W8A8 quantization (what the accelerator executes). Also the
// float forward pass, which both serves as oracle and calibrates the static
// activation scales.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "looplynx/attention.hpp"
#include "looplynx/config.hpp"
#include "looplynx/quant.hpp"

namespace looplynx {

/// Static activation scales of one block, in datapath order.
struct ActScales {
  float ln1 = 1.0f;   // LN1 output, input of the QKV projection
  float q = 1.0f;
  float k = 1.0f;
  float v = 1.0f;
  float attn = 1.0f;  // MHA output, input of the output projection
  float out = 1.0f;   // output projection result
  float ln2 = 1.0f;
  float fc1 = 1.0f;
  float gelu = 1.0f;  // GELU output, input of FFN-2
  float fc2 = 1.0f;

  static constexpr std::size_t kCount = 10;
  std::array<float, kCount> to_array() const { return {ln1, q, k, v, attn, out, ln2, fc1, gelu, fc2}; }
  static ActScales from_array(std::span<const float> a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8], a[9]};
  }
  bool operator==(const ActScales&) const = default;
};

struct FloatLayer {
  FTensor ln1_g, ln1_b;
  FTensor w_qkv, b_qkv;  // [3d x d]: q rows, then k rows, then v rows
  FTensor w_out, b_out;  // [d x d]
  FTensor ln2_g, ln2_b;
  FTensor w_fc1, b_fc1;  // [ffn x d]
  FTensor w_fc2, b_fc2;  // [d x ffn]
};

struct FloatModel {
  ModelConfig cfg;
  FTensor wte;  // [vocab x d]
  FTensor wpe;  // [max_seq x d]
  std::vector<FloatLayer> layers;
  FTensor lnf_g, lnf_b;
  FTensor lm_head;  // [vocab x d]
};

struct QuantLayer {
  FTensor ln1_g, ln1_b;
  QTensor w_qkv;
  FTensor b_qkv;
  QTensor w_out;
  FTensor b_out;
  FTensor ln2_g, ln2_b;
  QTensor w_fc1;
  FTensor b_fc1;
  QTensor w_fc2;
  FTensor b_fc2;
  ActScales act;

  bool operator==(const QuantLayer&) const = default;
};

struct QuantModel {
  ModelConfig cfg;
  FTensor wte;
  FTensor wpe;
  std::vector<QuantLayer> layers;
  FTensor lnf_g, lnf_b;
  QTensor lm_head;
  float lnf_scale = 1.0f;  // final LN output, input of the LM head

  bool operator==(const QuantModel&) const = default;
};

// ---------------------------------------------------------------------------
// Deterministic generation. Uniform draws come straight from mt19937_64 bits
// so files are reproducible across standard libraries.
// ---------------------------------------------------------------------------
class WeightRng {
 public:
  explicit WeightRng(std::uint64_t seed) : gen_(seed) {}
  float uniform(float lo, float hi) {
    const double u = double(gen_() >> 11) * 0x1.0p-53;
    return float(lo + (hi - lo) * u);
  }
  FTensor tensor(Shape shape, float lo, float hi) {
    std::vector<float> d(shape_size(shape));
    for (auto& v : d) v = uniform(lo, hi);
    return {std::move(shape), std::move(d)};
  }
  std::uint64_t next() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

inline FloatModel generate_float_model(const ModelConfig& cfg, std::uint64_t seed) {
  WeightRng rng(seed);
  const std::size_t d = cfg.l_embed;
  const std::size_t f = cfg.ffn_dim;
  // Unit-variance fan-in init keeps activations O(1) at any width.
  auto linear = [&](std::size_t rows, std::size_t cols) {
    const float b = float(std::sqrt(3.0 / double(cols)));
    return rng.tensor({rows, cols}, -b, b);
  };
  auto gamma = [&](std::size_t n) { return rng.tensor({n}, 0.9f, 1.1f); };
  auto small = [&](std::size_t n) { return rng.tensor({n}, -0.1f, 0.1f); };

  FloatModel m;
  m.cfg = cfg;
  m.wte = rng.tensor({cfg.vocab_size, d}, -1.0f, 1.0f);
  m.wpe = rng.tensor({cfg.max_seq_len, d}, -0.1f, 0.1f);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    FloatLayer L;
    L.ln1_g = gamma(d);
    L.ln1_b = small(d);
    L.w_qkv = linear(3 * d, d);
    L.b_qkv = small(3 * d);
    L.w_out = linear(d, d);
    L.b_out = small(d);
    L.ln2_g = gamma(d);
    L.ln2_b = small(d);
    L.w_fc1 = linear(f, d);
    L.b_fc1 = small(f);
    L.w_fc2 = linear(d, f);
    L.b_fc2 = small(d);
    m.layers.push_back(std::move(L));
  }
  m.lnf_g = gamma(d);
  m.lnf_b = small(d);
  m.lm_head = linear(cfg.vocab_size, d);
  return m;
}

/// Per-tensor symmetric weight quantization with a max-abs scale.
inline QTensor quantize_weight(const FTensor& w) { return quantize(w, maxabs_scale(w.data)); }

// ---------------------------------------------------------------------------
// Float forward pass (oracle). Keeps a float KV cache per layer.
// ---------------------------------------------------------------------------
inline std::vector<float> float_matvec(const FTensor& w, std::span<const float> x, std::span<const float> bias) {
  const std::size_t rows = w.shape.at(0);
  const std::size_t cols = w.shape.at(1);
  if (x.size() != cols || bias.size() != rows) throw ShapeError("float_matvec: shape mismatch");
  std::vector<float> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += double(w.data[r * cols + c]) * double(x[c]);
    out[r] = float(acc + bias[r]);
  }
  return out;
}

/// Running max |activation| per calibration point.
struct ActStats {
  std::vector<std::array<float, ActScales::kCount>> layer_max;
  float lnf_max = 0.0f;

  explicit ActStats(std::size_t layers) : layer_max(layers) {
    for (auto& a : layer_max) a.fill(0.0f);
  }
  void observe(std::size_t layer, std::size_t point, std::span<const float> x) {
    float& m = layer_max.at(layer)[point];
    for (float v : x) m = std::max(m, std::fabs(v));
  }
};

struct FloatState {
  std::vector<float> x;    // pending block input (embedding or previous block output delta)
  std::vector<float> res;  // residual stream
  std::vector<KVCache> caches;

  explicit FloatState(const ModelConfig& cfg)
      : x(cfg.l_embed, 0.0f), res(cfg.l_embed, 0.0f) {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) caches.emplace_back(cfg.n_heads, cfg.head_dim, cfg.max_seq_len);
  }
};

inline std::vector<float> embed(const FTensor& wte, const FTensor& wpe, std::size_t token, std::size_t pos) {
  const std::size_t d = wte.shape.at(1);
  if (token >= wte.shape[0]) throw ShapeError("token id out of vocabulary");
  if (pos >= wpe.shape[0]) throw CapacityError("position exceeds max_seq_len");
  std::vector<float> x(d);
  for (std::size_t i = 0; i < d; ++i) x[i] = wte.data[token * d + i] + wpe.data[pos * d + i];
  return x;
}

/// One float block. Consumes st.x/st.res and leaves the block's FFN output in
/// st.x (the residual add happens at the start of the next block).
inline void float_block(const FloatLayer& L, const ModelConfig& cfg, KVCache& cache, FloatState& st,
                        ActStats* stats = nullptr, std::size_t layer = 0) {
  const std::size_t d = cfg.l_embed;
  auto obs = [&](std::size_t point, std::span<const float> v) {
    if (stats) stats->observe(layer, point, v);
  };
  auto ln1 = fused_ln_res(FTensor::vec(st.x), FTensor::vec(st.res), L.ln1_g, L.ln1_b, cfg.ln_eps);
  obs(0, ln1.normed.data);
  auto qkv = float_matvec(L.w_qkv, ln1.normed.data, L.b_qkv.data);
  std::span<const float> q(qkv.data(), d), k(qkv.data() + d, d), v(qkv.data() + 2 * d, d);
  obs(1, q);
  obs(2, k);
  obs(3, v);
  cache.append(k, v);
  auto attn = mha_decode(cache, q, default_attn_scale(cfg.head_dim));
  obs(4, attn);
  auto o = float_matvec(L.w_out, attn, L.b_out.data);
  obs(5, o);
  auto ln2 = fused_ln_res(FTensor::vec(o), ln1.new_res, L.ln2_g, L.ln2_b, cfg.ln_eps);
  obs(6, ln2.normed.data);
  auto h = float_matvec(L.w_fc1, ln2.normed.data, L.b_fc1.data);
  obs(7, h);
  auto g = gelu_values(h);
  obs(8, g);
  auto y = float_matvec(L.w_fc2, g, L.b_fc2.data);
  obs(9, y);
  st.res = std::move(ln2.new_res.data);
  st.x = std::move(y);
}

/// Runs one token through every block and returns the float logits.
inline std::vector<float> float_forward_token(const FloatModel& m, FloatState& st, std::size_t token, std::size_t pos,
                                              ActStats* stats = nullptr) {
  st.x = embed(m.wte, m.wpe, token, pos);
  std::fill(st.res.begin(), st.res.end(), 0.0f);
  for (std::size_t l = 0; l < m.layers.size(); ++l) float_block(m.layers[l], m.cfg, st.caches[l], st, stats, l);
  auto fin = fused_ln_res(FTensor::vec(st.x), FTensor::vec(st.res), m.lnf_g, m.lnf_b, m.cfg.ln_eps);
  if (stats) {
    for (float v : fin.normed.data) stats->lnf_max = std::max(stats->lnf_max, std::fabs(v));
  }
  std::vector<float> zero(m.cfg.vocab_size, 0.0f);
  return float_matvec(m.lm_head, fin.normed.data, zero);
}

inline float scale_from_max(float m) { return m > 0.0f ? m / float(kQMax) : 1.0f; }

inline constexpr std::size_t kCalibSeqLen = 8;

/// Quantizes weights and calibrates activation scales (max-abs / 127) by
/// running the float model over `calib_tokens`, restarting the sequence
/// every `seq_len` tokens so early positions are well covered.
inline QuantModel quantize_model(const FloatModel& fm, std::span<const std::size_t> calib_tokens,
                                 std::size_t seq_len = kCalibSeqLen) {
  if (seq_len == 0 || seq_len > fm.cfg.max_seq_len) throw ConfigError("calibration sequence length out of range");
  ActStats stats(fm.cfg.n_layers);
  for (std::size_t begin = 0; begin < calib_tokens.size(); begin += seq_len) {
    FloatState st(fm.cfg);
    const std::size_t end = std::min(calib_tokens.size(), begin + seq_len);
    for (std::size_t i = begin; i < end; ++i) float_forward_token(fm, st, calib_tokens[i], i - begin, &stats);
  }
  // Attention output is a convex combination of cached V rows, so the V
  // range bounds it at every position.
  for (auto& m : stats.layer_max) m[4] = std::max(m[4], m[3]);

  QuantModel qm;
  qm.cfg = fm.cfg;
  qm.wte = fm.wte;
  qm.wpe = fm.wpe;
  qm.lnf_g = fm.lnf_g;
  qm.lnf_b = fm.lnf_b;
  qm.lm_head = quantize_weight(fm.lm_head);
  qm.lnf_scale = scale_from_max(stats.lnf_max);
  for (std::size_t l = 0; l < fm.layers.size(); ++l) {
    const auto& F = fm.layers[l];
    QuantLayer Q;
    Q.ln1_g = F.ln1_g;
    Q.ln1_b = F.ln1_b;
    Q.w_qkv = quantize_weight(F.w_qkv);
    Q.b_qkv = F.b_qkv;
    Q.w_out = quantize_weight(F.w_out);
    Q.b_out = F.b_out;
    Q.ln2_g = F.ln2_g;
    Q.ln2_b = F.ln2_b;
    Q.w_fc1 = quantize_weight(F.w_fc1);
    Q.b_fc1 = F.b_fc1;
    Q.w_fc2 = quantize_weight(F.w_fc2);
    Q.b_fc2 = F.b_fc2;
    std::array<float, ActScales::kCount> s{};
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = scale_from_max(stats.layer_max[l][i]);
    Q.act = ActScales::from_array(s);
    qm.layers.push_back(std::move(Q));
  }
  return qm;
}

/// Calibration prompt drawn from the same seed as the weights.
inline std::vector<std::size_t> calibration_tokens(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 gen(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> toks(64);
  for (auto& t : toks) t = std::size_t(gen() % cfg.vocab_size);
  return toks;
}

inline QuantModel generate_weights(const ModelConfig& cfg, std::uint64_t seed) {
  auto fm = generate_float_model(cfg, seed);
  auto toks = calibration_tokens(cfg, seed);
  return quantize_model(fm, toks);
}

}  // namespace looplynx
