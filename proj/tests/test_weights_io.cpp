#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "looplynx/weights_io.hpp"

using namespace looplynx;

namespace {

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / (std::string("looplynx_") + name)).string();
}

}  // namespace

TEST(WeightsIo, RoundTripIsExact) {
  auto qm = generate_weights(desk_model(), 1);
  auto buf = serialize_weights(qm);
  EXPECT_EQ(parse_weights(buf), qm);
}

TEST(WeightsIo, SameSeedSameBytes) {
  EXPECT_EQ(serialize_weights(generate_weights(desk_model(), 9)), serialize_weights(generate_weights(desk_model(), 9)));
}

TEST(WeightsIo, HeaderMagicChecked) {
  auto buf = serialize_weights(generate_weights(desk_model(), 1));
  EXPECT_EQ(std::string(buf.begin(), buf.begin() + 4), "LLXW");
  buf[0] = 'X';
  EXPECT_THROW(parse_weights(buf), WeightFileError);
}

TEST(WeightsIo, CorruptionAndTruncationDetected) {
  auto buf = serialize_weights(generate_weights(desk_model(), 1));
  auto flipped = buf;
  flipped[flipped.size() / 2] ^= 0x40;
  EXPECT_THROW(parse_weights(flipped), WeightFileError);
  auto cut = buf;
  cut.resize(buf.size() - 10);
  EXPECT_THROW(parse_weights(cut), WeightFileError);
  EXPECT_THROW(parse_weights(std::vector<unsigned char>(5, 0)), WeightFileError);
}

// A max-abs scaled tensor always has some |q| == 127.
TEST(WeightsIo, ScalesRecheckedOnLoad) {
  auto qm = generate_weights(desk_model(), 1);
  EXPECT_NO_THROW(from_archive(qm.cfg, to_archive(qm)));
  qm.layers[0].w_out.data.assign(qm.layers[0].w_out.data.size(), 3);
  EXPECT_THROW(from_archive(qm.cfg, to_archive(qm)), WeightFileError);
}

TEST(WeightsIo, ShapeMismatchRejected) {
  auto qm = generate_weights(desk_model(), 1);
  auto other = desk_model();
  other.ffn_dim = 128;
  EXPECT_THROW(from_archive(other, to_archive(qm)), WeightFileError);
}

TEST(WeightsIo, FileRoundTrip) {
  const auto path = tmp_path("w.llxw");
  auto qm = generate_weights(desk_model(), 2);
  save_weights(qm, path);
  EXPECT_EQ(load_weights(path), qm);
  std::filesystem::remove(path);
  EXPECT_THROW(load_weights(path), WeightFileError);
}
