#pragma once

// Binary weight container, little-endian throughout:
//
//   0   char[4]  magic "LLXW"
//   4   u32      format version (1)
//   8   u32      CRC-32 of every byte from offset 12 to end of file
//   12  u64 x 7  model shape: n_layers l_embed n_heads head_dim ffn_dim vocab max_seq
//   68  f64      ln_eps
//   76  u32      tensor count
//       table    per tensor: u16 name length, name bytes, u8 dtype (0 = i8,
//                1 = f32), u8 rank, u64 dims[rank], f32 scale, u64 data
//                offset (from start of data region), u64 byte length
//       data     tensor payloads, concatenated in table order

#include <algorithm>
#include <bit>
#include <boost/crc.hpp>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "looplynx/error.hpp"
#include "looplynx/model.hpp"

namespace looplynx {

inline constexpr char kWeightMagic[4] = {'L', 'L', 'X', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

enum class DType : std::uint8_t { kI8 = 0, kF32 = 1 };

struct TensorEntry {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  float scale = 1.0f;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    buf_.insert(buf_.end(), b, b + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    auto c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<unsigned char>& buf() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& b, std::size_t pos = 0) : b_(b), pos_(pos) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char tmp[sizeof(T)];
    std::memcpy(tmp, b_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(T));
    T v;
    std::memcpy(&v, tmp, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw WeightFileError("weight file truncated");
  }
  const std::vector<unsigned char>& b_;
  std::size_t pos_;
};

inline std::uint32_t crc32(const unsigned char* p, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(p, n);
  return crc.checksum();
}

}  // namespace detail

/// Flattened name -> tensor view of a quantized model.
class WeightArchive {
 public:
  void add_f32(const std::string& name, const FTensor& t) {
    TensorEntry e{name, DType::kF32, t.shape, 1.0f, 0, t.size() * 4};
    detail::ByteWriter w;
    for (float v : t.data) w.put(v);
    push(std::move(e), std::move(w.buf()));
  }
  void add_i8(const std::string& name, const QTensor& t) {
    TensorEntry e{name, DType::kI8, t.shape, t.scale, 0, t.size()};
    std::vector<unsigned char> bytes(t.data.size());
    std::memcpy(bytes.data(), t.data.data(), t.data.size());
    push(std::move(e), std::move(bytes));
  }

  FTensor f32(const std::string& name) const {
    const auto& [e, bytes] = find(name, DType::kF32);
    detail::ByteReader r(bytes);
    std::vector<float> d(shape_size(e.shape));
    for (auto& v : d) v = r.get<float>();
    return {e.shape, std::move(d)};
  }
  QTensor i8(const std::string& name) const {
    const auto& [e, bytes] = find(name, DType::kI8);
    std::vector<std::int8_t> d(bytes.size());
    std::memcpy(d.data(), bytes.data(), bytes.size());
    for (auto v : d) {
      if (v == -128) throw WeightFileError("tensor " + name + " holds -128, outside the symmetric int8 range");
    }
    return {e.shape, std::move(d), e.scale};
  }

  std::vector<unsigned char> serialize(const ModelConfig& cfg) const {
    detail::ByteWriter w;
    w.bytes(kWeightMagic, 4);
    w.put<std::uint32_t>(kWeightVersion);
    w.put<std::uint32_t>(0);  // crc placeholder
    for (std::uint64_t v : {cfg.n_layers, cfg.l_embed, cfg.n_heads, cfg.head_dim, cfg.ffn_dim, cfg.vocab_size,
                            cfg.max_seq_len})
      w.put<std::uint64_t>(v);
    w.put<double>(cfg.ln_eps);
    w.put<std::uint32_t>(std::uint32_t(order_.size()));
    std::uint64_t offset = 0;
    for (const auto& name : order_) {
      const auto& e = tensors_.at(name).first;
      w.put<std::uint16_t>(std::uint16_t(e.name.size()));
      w.bytes(e.name.data(), e.name.size());
      w.put<std::uint8_t>(std::uint8_t(e.dtype));
      w.put<std::uint8_t>(std::uint8_t(e.shape.size()));
      for (auto dim : e.shape) w.put<std::uint64_t>(dim);
      w.put<float>(e.scale);
      w.put<std::uint64_t>(offset);
      w.put<std::uint64_t>(e.nbytes);
      offset += e.nbytes;
    }
    for (const auto& name : order_) {
      const auto& bytes = tensors_.at(name).second;
      w.bytes(bytes.data(), bytes.size());
    }
    auto& buf = w.buf();
    std::uint32_t crc = detail::crc32(buf.data() + 12, buf.size() - 12);
    detail::ByteWriter c;
    c.put(crc);
    std::memcpy(buf.data() + 8, c.buf().data(), 4);
    return std::move(buf);
  }

  static std::pair<ModelConfig, WeightArchive> parse(const std::vector<unsigned char>& buf) {
    if (buf.size() < 12 || std::memcmp(buf.data(), kWeightMagic, 4) != 0) {
      throw WeightFileError("not a weight file (bad magic)");
    }
    detail::ByteReader r(buf, 4);
    auto version = r.get<std::uint32_t>();
    if (version != kWeightVersion) throw WeightFileError("unsupported weight file version " + std::to_string(version));
    auto crc = r.get<std::uint32_t>();
    if (crc != detail::crc32(buf.data() + 12, buf.size() - 12)) throw WeightFileError("weight file checksum mismatch");

    ModelConfig cfg;
    cfg.n_layers = r.get<std::uint64_t>();
    cfg.l_embed = r.get<std::uint64_t>();
    cfg.n_heads = r.get<std::uint64_t>();
    cfg.head_dim = r.get<std::uint64_t>();
    cfg.ffn_dim = r.get<std::uint64_t>();
    cfg.vocab_size = r.get<std::uint64_t>();
    cfg.max_seq_len = r.get<std::uint64_t>();
    cfg.ln_eps = r.get<double>();
    auto count = r.get<std::uint32_t>();
    std::vector<TensorEntry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
      TensorEntry e;
      e.name = r.str(r.get<std::uint16_t>());
      auto dt = r.get<std::uint8_t>();
      if (dt > 1) throw WeightFileError("tensor " + e.name + ": unknown dtype " + std::to_string(dt));
      e.dtype = DType(dt);
      auto rank = r.get<std::uint8_t>();
      for (std::uint8_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint64_t>());
      e.scale = r.get<float>();
      e.offset = r.get<std::uint64_t>();
      e.nbytes = r.get<std::uint64_t>();
      const std::uint64_t elem = e.dtype == DType::kI8 ? 1 : 4;
      if (shape_size(e.shape) * elem != e.nbytes) throw WeightFileError("tensor " + e.name + ": size does not match shape");
      entries.push_back(std::move(e));
    }
    const std::size_t data_start = r.pos();
    WeightArchive a;
    for (auto& e : entries) {
      if (data_start + e.offset + e.nbytes > buf.size()) throw WeightFileError("tensor " + e.name + " out of bounds");
      std::vector<unsigned char> bytes(buf.begin() + std::ptrdiff_t(data_start + e.offset),
                                       buf.begin() + std::ptrdiff_t(data_start + e.offset + e.nbytes));
      a.push(std::move(e), std::move(bytes));
    }
    return {cfg, std::move(a)};
  }

  const std::vector<std::string>& names() const { return order_; }
  const TensorEntry& entry(const std::string& name) const { return at(name).first; }

 private:
  using Slot = std::pair<TensorEntry, std::vector<unsigned char>>;

  void push(TensorEntry e, std::vector<unsigned char> bytes) {
    if (tensors_.count(e.name)) throw WeightFileError("duplicate tensor " + e.name);
    order_.push_back(e.name);
    auto name = e.name;
    tensors_.emplace(std::move(name), Slot{std::move(e), std::move(bytes)});
  }
  const Slot& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw WeightFileError("missing tensor " + name);
    return it->second;
  }
  const Slot& find(const std::string& name, DType dt) const {
    const auto& s = at(name);
    if (s.first.dtype != dt) throw WeightFileError("tensor " + name + " has unexpected dtype");
    return s;
  }

  std::vector<std::string> order_;
  std::map<std::string, Slot> tensors_;
};

inline std::string layer_key(std::size_t l, const char* name) { return "layers." + std::to_string(l) + "." + name; }

inline WeightArchive to_archive(const QuantModel& m) {
  WeightArchive a;
  a.add_f32("wte", m.wte);
  a.add_f32("wpe", m.wpe);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    a.add_f32(layer_key(l, "ln1.g"), L.ln1_g);
    a.add_f32(layer_key(l, "ln1.b"), L.ln1_b);
    a.add_i8(layer_key(l, "qkv.w"), L.w_qkv);
    a.add_f32(layer_key(l, "qkv.b"), L.b_qkv);
    a.add_i8(layer_key(l, "out.w"), L.w_out);
    a.add_f32(layer_key(l, "out.b"), L.b_out);
    a.add_f32(layer_key(l, "ln2.g"), L.ln2_g);
    a.add_f32(layer_key(l, "ln2.b"), L.ln2_b);
    a.add_i8(layer_key(l, "fc1.w"), L.w_fc1);
    a.add_f32(layer_key(l, "fc1.b"), L.b_fc1);
    a.add_i8(layer_key(l, "fc2.w"), L.w_fc2);
    a.add_f32(layer_key(l, "fc2.b"), L.b_fc2);
    auto s = L.act.to_array();
    a.add_f32(layer_key(l, "act_scales"), FTensor::vec({s.begin(), s.end()}));
  }
  a.add_f32("lnf.g", m.lnf_g);
  a.add_f32("lnf.b", m.lnf_b);
  a.add_i8("lm_head.w", m.lm_head);
  a.add_f32("lnf.act_scale", FTensor::vec({m.lnf_scale}));
  return a;
}

/// Weights must carry their max-abs scale: the largest |q| is exactly 127.
inline void check_maxabs_scale(const std::string& name, const QTensor& t) {
  int mx = 0;
  for (auto v : t.data) mx = std::max(mx, std::abs(int(v)));
  if (mx != kQMax && !(mx == 0 && t.scale == 1.0f)) {
    throw WeightFileError("tensor " + name + " is not max-abs scaled (max |q| = " + std::to_string(mx) + ")");
  }
}

inline QuantModel from_archive(const ModelConfig& cfg, const WeightArchive& a) {
  QuantModel m;
  m.cfg = cfg;
  auto expect = [](const std::string& name, const Shape& got, const Shape& want) {
    if (got != want) throw WeightFileError("tensor " + name + " has shape " + shape_str(got) + ", expected " + shape_str(want));
  };
  auto f32 = [&](const std::string& name, Shape want) {
    auto t = a.f32(name);
    expect(name, t.shape, want);
    return t;
  };
  auto i8 = [&](const std::string& name, Shape want) {
    auto t = a.i8(name);
    expect(name, t.shape, want);
    check_maxabs_scale(name, t);
    return t;
  };
  const std::size_t d = cfg.l_embed, f = cfg.ffn_dim;
  m.wte = f32("wte", {cfg.vocab_size, d});
  m.wpe = f32("wpe", {cfg.max_seq_len, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    QuantLayer L;
    L.ln1_g = f32(layer_key(l, "ln1.g"), {d});
    L.ln1_b = f32(layer_key(l, "ln1.b"), {d});
    L.w_qkv = i8(layer_key(l, "qkv.w"), {3 * d, d});
    L.b_qkv = f32(layer_key(l, "qkv.b"), {3 * d});
    L.w_out = i8(layer_key(l, "out.w"), {d, d});
    L.b_out = f32(layer_key(l, "out.b"), {d});
    L.ln2_g = f32(layer_key(l, "ln2.g"), {d});
    L.ln2_b = f32(layer_key(l, "ln2.b"), {d});
    L.w_fc1 = i8(layer_key(l, "fc1.w"), {f, d});
    L.b_fc1 = f32(layer_key(l, "fc1.b"), {f});
    L.w_fc2 = i8(layer_key(l, "fc2.w"), {d, f});
    L.b_fc2 = f32(layer_key(l, "fc2.b"), {d});
    auto s = f32(layer_key(l, "act_scales"), {ActScales::kCount});
    for (float v : s.data) {
      if (!(v > 0.0f) || !std::isfinite(v)) throw WeightFileError(layer_key(l, "act_scales") + " holds a non-positive scale");
    }
    L.act = ActScales::from_array(s.data);
    m.layers.push_back(std::move(L));
  }
  m.lnf_g = f32("lnf.g", {d});
  m.lnf_b = f32("lnf.b", {d});
  m.lm_head = i8("lm_head.w", {cfg.vocab_size, d});
  m.lnf_scale = f32("lnf.act_scale", {1}).data[0];
  return m;
}

inline std::vector<unsigned char> serialize_weights(const QuantModel& m) { return to_archive(m).serialize(m.cfg); }

inline QuantModel parse_weights(const std::vector<unsigned char>& buf) {
  auto [cfg, archive] = WeightArchive::parse(buf);
  return from_archive(cfg, archive);
}

inline void save_weights(const QuantModel& m, const std::string& path) {
  auto buf = serialize_weights(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw WeightFileError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!out) throw WeightFileError("write failed: " + path);
}

inline QuantModel load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightFileError("cannot open weight file " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_weights(buf);
}

}  // namespace looplynx
