#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "looplynx/error.hpp"
#include "looplynx/quant.hpp"

namespace looplynx {

/// Additive causal mask value, applied between the score MAC and softmax.
inline constexpr float kMaskValue = -1e30f;

/// Key/value cache for the heads one node owns. Layout per head is
/// [t x head_dim], rows appended in token order.
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t local_heads, std::size_t head_dim, std::size_t capacity)
      : heads_(local_heads), head_dim_(head_dim), capacity_(capacity), k_(local_heads), v_(local_heads) {
    for (std::size_t h = 0; h < heads_; ++h) {
      k_[h].reserve(capacity * head_dim);
      v_[h].reserve(capacity * head_dim);
    }
  }

  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t tokens() const { return t_; }

  /// Append one token; k and v are [local_heads x head_dim].
  void append(std::span<const float> k, std::span<const float> v) { append_many(k, v, 1); }

  /// Append `seq` tokens; k and v are [seq x local_heads x head_dim].
  void append_many(std::span<const float> k, std::span<const float> v, std::size_t seq) {
    const std::size_t row = heads_ * head_dim_;
    if (k.size() != seq * row || v.size() != seq * row) throw ShapeError("KVCache: k/v shape does not match cache");
    if (t_ + seq > capacity_) {
      throw CapacityError("KVCache full: " + std::to_string(t_) + " + " + std::to_string(seq) + " tokens exceeds " +
                          std::to_string(capacity_));
    }
    for (std::size_t s = 0; s < seq; ++s) {
      for (std::size_t h = 0; h < heads_; ++h) {
        auto off = s * row + h * head_dim_;
        k_[h].insert(k_[h].end(), k.begin() + off, k.begin() + off + head_dim_);
        v_[h].insert(v_[h].end(), v.begin() + off, v.begin() + off + head_dim_);
      }
    }
    t_ += seq;
  }

  std::span<const float> keys(std::size_t h) const { return k_.at(h); }
  std::span<const float> values(std::size_t h) const { return v_.at(h); }

 private:
  std::size_t heads_ = 0;
  std::size_t head_dim_ = 0;
  std::size_t capacity_ = 0;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> k_;
  std::vector<std::vector<float>> v_;
};

inline KVCache append_kv(KVCache cache, std::span<const float> k, std::span<const float> v) {
  cache.append(k, v);
  return cache;
}

inline float default_attn_scale(std::size_t head_dim) { return float(1.0 / std::sqrt(double(head_dim))); }

namespace detail {

// One query row against the first `visible` cached rows of head h; rows past
// `visible` (up to `t`) get the mask value.
inline void attend_row(const KVCache& cache, std::size_t h, std::span<const float> q, std::size_t t,
                       std::size_t visible, float scale, std::span<float> out) {
  const std::size_t hd = cache.head_dim();
  auto keys = cache.keys(h);
  auto vals = cache.values(h);
  std::vector<float> scores(t);
  for (std::size_t j = 0; j < t; ++j) {
    double dot = 0.0;
    for (std::size_t c = 0; c < hd; ++c) dot += double(q[c]) * double(keys[j * hd + c]);
    float s = float(dot) * scale;
    scores[j] = j < visible ? s : s + kMaskValue;
  }
  auto p = softmax_2pass_values(scores);
  for (std::size_t c = 0; c < hd; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < t; ++j) acc += double(p[j]) * double(vals[j * hd + c]);
    out[c] = float(acc);
  }
}

}  // namespace detail

/// Attention of one query token ([local_heads x head_dim]) against every
/// cached token. The current token's K/V must already be appended.
inline std::vector<float> mha_decode(const KVCache& cache, std::span<const float> q, float scale) {
  if (cache.tokens() == 0) throw ShapeError("mha_decode: empty KV cache");
  const std::size_t hd = cache.head_dim();
  if (q.size() != cache.heads() * hd) throw ShapeError("mha_decode: query does not match cache heads");
  std::vector<float> out(q.size());
  const std::size_t t = cache.tokens();
  for (std::size_t h = 0; h < cache.heads(); ++h) {
    detail::attend_row(cache, h, q.subspan(h * hd, hd), t, t, scale, std::span<float>(out).subspan(h * hd, hd));
  }
  return out;
}

/// Appends `seq` tokens of K/V, then computes causal attention for each of
/// them. q/k/v are [seq x local_heads x head_dim]; so is the result.
inline std::vector<float> mha_prefill(KVCache& cache, std::span<const float> q, std::span<const float> k,
                                      std::span<const float> v, std::size_t seq, float scale) {
  const std::size_t row = cache.heads() * cache.head_dim();
  if (seq == 0 || q.size() != seq * row) throw ShapeError("mha_prefill: query shape mismatch");
  const std::size_t t0 = cache.tokens();
  cache.append_many(k, v, seq);
  const std::size_t t = cache.tokens();
  const std::size_t hd = cache.head_dim();
  std::vector<float> out(seq * row);
  for (std::size_t s = 0; s < seq; ++s) {
    for (std::size_t h = 0; h < cache.heads(); ++h) {
      auto off = s * row + h * hd;
      detail::attend_row(cache, h, q.subspan(off, hd), t, t0 + s + 1, scale,
                         std::span<float>(out).subspan(off, hd));
    }
  }
  return out;
}

}  // namespace looplynx
