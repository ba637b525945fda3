#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "looplynx/attention.hpp"

using namespace looplynx;

namespace {

std::vector<float> randn(std::size_t n, std::mt19937_64& gen) {
  std::normal_distribution<float> nd;
  std::vector<float> v(n);
  for (auto& x : v) x = nd(gen);
  return v;
}

// Dense masked attention for one head in long double: Q [seq x hd] against
// K, V [t x hd]; query row s sees keys 0..first_pos+s.
std::vector<long double> dense_attention(const std::vector<float>& q, const std::vector<float>& k,
                                         const std::vector<float>& v, std::size_t seq, std::size_t t,
                                         std::size_t hd, std::size_t first_pos, float scale) {
  std::vector<long double> out(seq * hd, 0.0L);
  for (std::size_t s = 0; s < seq; ++s) {
    std::vector<long double> w(t, 0.0L);
    long double mx = -INFINITY;
    for (std::size_t j = 0; j <= first_pos + s; ++j) {
      long double d = 0;
      for (std::size_t c = 0; c < hd; ++c) d += (long double)q[s * hd + c] * k[j * hd + c];
      w[j] = d * scale;
      mx = std::max(mx, w[j]);
    }
    long double sum = 0;
    for (std::size_t j = 0; j <= first_pos + s; ++j) sum += (w[j] = std::exp(w[j] - mx));
    for (std::size_t j = 0; j <= first_pos + s; ++j)
      for (std::size_t c = 0; c < hd; ++c) out[s * hd + c] += w[j] / sum * v[j * hd + c];
  }
  return out;
}

}  // namespace

TEST(KVCache, AppendCountsAndCapacity) {
  KVCache c(2, 4, 9);
  EXPECT_EQ(c.tokens(), 0u);
  std::vector<float> row(8, 1.0f);
  c = append_kv(c, row, row);
  EXPECT_EQ(c.tokens(), 1u);
  KVCache p(2, 4, 9);
  std::vector<float> eight(8 * 8, 0.5f);
  p.append_many(eight, eight, 8);
  p.append(row, row);
  EXPECT_EQ(p.tokens(), 9u);
  EXPECT_THROW(p.append(row, row), CapacityError);
  EXPECT_THROW(c.append(std::vector<float>(3), std::vector<float>(3)), ShapeError);
}

TEST(KVCache, EarlierEntriesUnchanged) {
  std::mt19937_64 gen(1);
  KVCache c(1, 4, 4);
  auto k0 = randn(4, gen);
  c.append(k0, k0);
  auto snapshot = std::vector<float>(c.keys(0).begin(), c.keys(0).end());
  auto k1 = randn(4, gen);
  c.append(k1, k1);
  EXPECT_TRUE(std::equal(snapshot.begin(), snapshot.end(), c.keys(0).begin()));
}

TEST(MhaDecode, SingleTokenReturnsValueRow) {
  std::mt19937_64 gen(2);
  KVCache c(2, 8, 4);
  auto k = randn(16, gen);
  auto v = randn(16, gen);
  c.append(k, v);
  auto out = mha_decode(c, randn(16, gen), 0.3f);
  EXPECT_EQ(out, v);
}

TEST(MhaDecode, IdenticalKeysAverageValues) {
  std::mt19937_64 gen(3);
  KVCache c(1, 4, 8);
  auto k = randn(4, gen);
  std::vector<std::vector<float>> vs;
  for (int i = 0; i < 5; ++i) {
    vs.push_back(randn(4, gen));
    c.append(k, vs.back());
  }
  auto out = mha_decode(c, randn(4, gen), 0.5f);
  for (std::size_t d = 0; d < 4; ++d) {
    float mean = 0;
    for (auto& v : vs) mean += v[d];
    EXPECT_NEAR(out[d], mean / 5, 1e-6);
  }
}

TEST(MhaDecode, EmptyCacheThrows) {
  KVCache c(1, 4, 4);
  EXPECT_THROW(mha_decode(c, std::vector<float>(4), 1.0f), ShapeError);
}

TEST(MhaDecode, MatchesDenseOracle) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 4;
    const std::size_t hd = 4;
    KVCache c(1, hd, t);
    std::vector<float> K;
    std::vector<float> V;
    for (std::size_t i = 0; i < t; ++i) {
      auto k = randn(hd, gen);
      auto v = randn(hd, gen);
      K.insert(K.end(), k.begin(), k.end());
      V.insert(V.end(), v.begin(), v.end());
      c.append(k, v);
    }
    auto q = randn(hd, gen);
    auto out = mha_decode(c, q, 0.5f);
    auto ref = dense_attention(q, K, V, 1, t, hd, t - 1, 0.5f);
    for (std::size_t i = 0; i < hd; ++i) ASSERT_NEAR(out[i], double(ref[i]), 1e-5);
  }
}

TEST(MhaPrefill, SeqOneEqualsDecode) {
  std::mt19937_64 gen(5);
  auto q = randn(8, gen);
  auto k = randn(8, gen);
  auto v = randn(8, gen);
  KVCache a(2, 4, 4);
  KVCache b(2, 4, 4);
  auto pre = mha_prefill(a, q, k, v, 1, 0.5f);
  b.append(k, v);
  EXPECT_EQ(pre, mha_decode(b, q, 0.5f));
}

TEST(MhaPrefill, RowZeroIgnoresLaterTokens) {
  std::mt19937_64 gen(6);
  const std::size_t seq = 5;
  auto q = randn(seq * 4, gen);
  auto k = randn(seq * 4, gen);
  auto v = randn(seq * 4, gen);
  KVCache a(1, 4, seq);
  auto base = mha_prefill(a, q, k, v, seq, 0.5f);
  for (std::size_t i = 4; i < seq * 4; ++i) {
    k[i] += 3.0f;
    v[i] -= 2.0f;
  }
  KVCache b(1, 4, seq);
  auto pert = mha_prefill(b, q, k, v, seq, 0.5f);
  EXPECT_TRUE(std::equal(base.begin(), base.begin() + 4, pert.begin()));
}

TEST(MhaPrefill, MatchesDenseOracle) {
  std::mt19937_64 gen(7);
  const std::size_t seq = 5;
  const std::size_t hd = 8;
  auto q = randn(seq * hd, gen);
  auto k = randn(seq * hd, gen);
  auto v = randn(seq * hd, gen);
  KVCache c(1, hd, seq);
  auto out = mha_prefill(c, q, k, v, seq, 0.35f);
  auto ref = dense_attention(q, k, v, seq, seq, hd, 0, 0.35f);
  for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], double(ref[i]), 1e-5);
}

TEST(MhaPrefill, PrefillThenDecodeEqualsFullPrefill) {
  std::mt19937_64 gen(8);
  const std::size_t heads = 2;
  const std::size_t hd = 4;
  const std::size_t row = heads * hd;
  for (std::size_t n = 1; n <= 16; ++n) {
    auto q = randn((n + 1) * row, gen);
    auto k = randn((n + 1) * row, gen);
    auto v = randn((n + 1) * row, gen);
    KVCache full(heads, hd, n + 1);
    auto all = mha_prefill(full, q, k, v, n + 1, 0.5f);
    KVCache split(heads, hd, n + 1);
    mha_prefill(split, std::span(q).first(n * row), std::span(k).first(n * row), std::span(v).first(n * row), n,
                0.5f);
    split.append(std::span(k).subspan(n * row), std::span(v).subspan(n * row));
    auto last = mha_decode(split, std::span(q).subspan(n * row), 0.5f);
    for (std::size_t i = 0; i < row; ++i) ASSERT_NEAR(last[i], all[n * row + i], 1e-5) << n;
  }
}

// Concatenating per-node head ranges equals full-head attention bitwise.
TEST(MhaDecode, HeadShardingIsExact) {
  std::mt19937_64 gen(9);
  const std::size_t heads = 8;
  const std::size_t hd = 4;
  const std::size_t t = 6;
  KVCache full(heads, hd, t);
  std::vector<std::vector<float>> ks;
  std::vector<std::vector<float>> vs;
  for (std::size_t i = 0; i < t; ++i) {
    ks.push_back(randn(heads * hd, gen));
    vs.push_back(randn(heads * hd, gen));
    full.append(ks.back(), vs.back());
  }
  auto q = randn(heads * hd, gen);
  auto ref = mha_decode(full, q, 0.5f);
  for (std::size_t n : {2, 4, 8}) {
    const std::size_t per = heads / n;
    std::vector<float> cat;
    for (std::size_t node = 0; node < n; ++node) {
      KVCache part(per, hd, t);
      const std::size_t off = node * per * hd;
      for (std::size_t i = 0; i < t; ++i) {
        part.append(std::span(ks[i]).subspan(off, per * hd), std::span(vs[i]).subspan(off, per * hd));
      }
      auto o = mha_decode(part, std::span(q).subspan(off, per * hd), 0.5f);
      cat.insert(cat.end(), o.begin(), o.end());
    }
    EXPECT_EQ(cat, ref) << n;
  }
}
