#include <gtest/gtest.h>

#include <cmath>

#include "looplynx/model.hpp"
#include "looplynx/verify.hpp"

using namespace looplynx;

TEST(Model, GenerationIsDeterministic) {
  auto a = generate_weights(desk_model(), 3);
  auto b = generate_weights(desk_model(), 3);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == generate_weights(desk_model(), 4));
}

TEST(Model, WeightScalesAreMaxAbsOver127) {
  auto fm = generate_float_model(desk_model(), 2);
  auto q = quantize_weight(fm.layers[0].w_fc1);
  float mx = 0;
  for (float v : fm.layers[0].w_fc1.data) mx = std::max(mx, std::fabs(v));
  EXPECT_FLOAT_EQ(q.scale, mx / 127.0f);
  int qmax = 0;
  for (auto v : q.data) qmax = std::max(qmax, std::abs(int(v)));
  EXPECT_EQ(qmax, 127);
}

TEST(Model, ActivationScalesArePositive) {
  auto qm = generate_weights(desk_model(), 5);
  EXPECT_GT(qm.lnf_scale, 0.0f);
  for (const auto& L : qm.layers)
    for (float s : L.act.to_array()) EXPECT_GT(s, 0.0f);
}

TEST(Model, ActScalesArrayRoundTrip) {
  ActScales s{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  auto a = s.to_array();
  EXPECT_EQ(ActScales::from_array(a), s);
}

TEST(Model, EmbedChecksBounds) {
  auto fm = generate_float_model(desk_model(), 1);
  EXPECT_THROW(embed(fm.wte, fm.wpe, 256, 0), ShapeError);
  EXPECT_THROW(embed(fm.wte, fm.wpe, 0, 64), CapacityError);
}

// Quantized block vs float block on 50 seeds at desk scale.
TEST(Model, QuantizedBlockTracksFloatOracle) {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) ASSERT_GE(block_cosine(desk_model(), seed), 0.99) << seed;
}

TEST(Model, QuantizedLogitsTrackFloatLogits) {
  const auto cfg = desk_model();
  auto fm = generate_float_model(cfg, 8);
  auto qm = quantize_model(fm, calibration_tokens(cfg, 8));
  HardwareConfig hw;
  DirectPipeline direct(qm, make_shard_plan(cfg, hw));
  FloatState st(cfg);
  for (std::size_t pos = 0; pos < 4; ++pos) {
    const std::size_t tok = (pos * 37 + 11) % cfg.vocab_size;
    auto fl = float_forward_token(fm, st, tok, pos);
    auto ql = direct.forward(tok, pos);
    EXPECT_GE(cosine(ql, fl), 0.98) << pos;
  }
}
