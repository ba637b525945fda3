#pragma once

// W8A8 integer kernels (symmetric, per-tensor scale) and the float-side
// operators that surround them. Rounding is half-away-from-zero everywhere
// and every reduction runs left to right, so results are reproducible bit for
// bit regardless of how the work is sharded.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "looplynx/error.hpp"

namespace looplynx {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

struct FTensor {
  Shape shape;
  std::vector<float> data;

  FTensor() = default;
  FTensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_size(shape) != data.size()) throw ShapeError("FTensor data does not match shape " + shape_str(shape));
  }
  static FTensor vec(std::vector<float> d) {
    Shape s{d.size()};
    return {std::move(s), std::move(d)};
  }
  static FTensor zeros(Shape s) {
    auto n = shape_size(s);
    return {std::move(s), std::vector<float>(n, 0.0f)};
  }
  std::size_t size() const { return data.size(); }
  std::span<const float> span() const { return data; }
  bool operator==(const FTensor&) const = default;
};

inline constexpr int kQMax = 127;

struct QTensor {
  Shape shape;
  std::vector<std::int8_t> data;
  float scale = 1.0f;

  QTensor() = default;
  QTensor(Shape s, std::vector<std::int8_t> d, float sc) : shape(std::move(s)), data(std::move(d)), scale(sc) {
    if (shape_size(shape) != data.size()) throw ShapeError("QTensor data does not match shape " + shape_str(shape));
    if (!(scale > 0.0f) || !std::isfinite(scale)) throw NumericError("QTensor scale must be positive and finite");
  }
  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }
  bool operator==(const QTensor&) const = default;
};

inline std::int8_t saturate_i8(double v) {
  double r = std::round(v);  // half away from zero
  return static_cast<std::int8_t>(std::clamp(r, double(-kQMax), double(kQMax)));
}

inline std::vector<std::int8_t> quantize_values(std::span<const float> x, float scale) {
  if (!(scale > 0.0f) || !std::isfinite(scale)) throw NumericError("quantization scale must be positive and finite");
  std::vector<std::int8_t> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw NumericError("cannot quantize non-finite value at index " + std::to_string(i));
    out[i] = saturate_i8(double(x[i]) / double(scale));
  }
  return out;
}

inline QTensor quantize(const FTensor& x, float scale) {
  return {x.shape, quantize_values(x.data, scale), scale};
}

inline std::vector<float> dequantize_values(std::span<const std::int8_t> q, float scale) {
  std::vector<float> out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = float(q[i]) * scale;
  return out;
}

inline FTensor dequantize(const QTensor& q) { return {q.shape, dequantize_values(q.data, q.scale)}; }

/// max|x| / 127, the calibration rule for every static scale. An all-zero
/// tensor gets scale 1 so it still quantizes exactly.
inline float maxabs_scale(std::span<const float> x) {
  float m = 0.0f;
  for (float v : x) m = std::max(m, std::fabs(v));
  return m > 0.0f ? m / float(kQMax) : 1.0f;
}

/// Rows [row_begin, row_end) of W (R x C, row-major) times v. 32-bit
/// accumulation; |acc| <= C * 127^2 which fits easily for any C < 2^17.
inline std::vector<std::int32_t> matvec_i8_rows(std::span<const std::int8_t> w, std::size_t cols,
                                                std::span<const std::int8_t> v, std::size_t row_begin,
                                                std::size_t row_end) {
  if (v.size() != cols) {
    throw ShapeError("matvec_i8: inner dimension mismatch (" + std::to_string(cols) + " vs " +
                     std::to_string(v.size()) + ")");
  }
  if (row_end < row_begin || row_end * cols > w.size()) throw ShapeError("matvec_i8: row range out of bounds");
  std::vector<std::int32_t> out(row_end - row_begin);
  for (std::size_t r = row_begin; r < row_end; ++r) {
    const std::int8_t* row = w.data() + r * cols;
    std::int32_t acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::int32_t(row[c]) * std::int32_t(v[c]);
    out[r - row_begin] = acc;
  }
  return out;
}

inline std::vector<std::int32_t> matvec_i8(const QTensor& w, const QTensor& v) {
  if (w.shape.size() != 2) throw ShapeError("matvec_i8: weight must be 2-D, got " + shape_str(w.shape));
  if (v.size() != w.shape[1]) {
    throw ShapeError("matvec_i8: shape mismatch " + shape_str(w.shape) + " * " + shape_str(v.shape));
  }
  return matvec_i8_rows(w.data, w.shape[1], v.data, 0, w.shape[0]);
}

/// Quantization unit: dequantize the accumulator, add bias, requantize to the
/// output scale.
inline std::vector<std::int8_t> bias_requant_values(std::span<const std::int32_t> acc, std::span<const float> bias,
                                                    float in_scale, float w_scale, float out_scale) {
  if (acc.size() != bias.size()) throw ShapeError("bias_requant: bias length does not match accumulator");
  if (!(in_scale > 0.0f && w_scale > 0.0f && out_scale > 0.0f)) throw NumericError("bias_requant: scales must be > 0");
  const double acc_scale = double(in_scale) * double(w_scale);
  std::vector<std::int8_t> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    out[i] = saturate_i8((double(acc[i]) * acc_scale + double(bias[i])) / double(out_scale));
  }
  return out;
}

inline QTensor bias_requant(std::span<const std::int32_t> acc, const FTensor& bias, float in_scale, float w_scale,
                            float out_scale) {
  return {Shape{acc.size()}, bias_requant_values(acc, bias.data, in_scale, w_scale, out_scale), out_scale};
}

/// Float view of an accumulator (used for logits, which are not requantized).
inline std::vector<float> dequantize_acc(std::span<const std::int32_t> acc, float in_scale, float w_scale) {
  const double s = double(in_scale) * double(w_scale);
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = float(double(acc[i]) * s);
  return out;
}

inline std::vector<float> layernorm_values(std::span<const float> x, std::span<const float> gamma,
                                           std::span<const float> beta, double eps) {
  const std::size_t d = x.size();
  if (d == 0) throw ShapeError("layernorm: empty input");
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layernorm: gamma/beta width mismatch");
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= double(d);
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= double(d);
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<float> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = float((double(x[i]) - mean) * inv * gamma[i] + beta[i]);
  return out;
}

inline FTensor layernorm(const FTensor& x, const FTensor& gamma, const FTensor& beta, double eps) {
  return {x.shape, layernorm_values(x.data, gamma.data, beta.data, eps)};
}

struct LnResOut {
  FTensor normed;
  FTensor new_res;
};

/// Residual add followed by layernorm of the sum. Identical values to running
/// the two steps separately; the fusion only changes timing.
inline LnResOut fused_ln_res(const FTensor& x, const FTensor& res, const FTensor& gamma, const FTensor& beta,
                             double eps) {
  if (x.size() != res.size()) throw ShapeError("fused_ln_res: x and residual differ in size");
  std::vector<float> sum(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) sum[i] = x.data[i] + res.data[i];
  FTensor new_res{x.shape, std::move(sum)};
  FTensor normed = layernorm(new_res, gamma, beta, eps);
  return {std::move(normed), std::move(new_res)};
}

/// Pass 1 finds the max and the global exponent sum; pass 2 normalizes.
inline std::vector<float> softmax_2pass_values(std::span<const float> s) {
  if (s.empty()) throw ShapeError("softmax: empty input");
  float mx = s[0];
  for (float v : s) mx = std::max(mx, v);
  std::vector<double> e(s.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    e[i] = std::exp(double(s[i]) - double(mx));
    sum += e[i];
  }
  std::vector<float> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = float(e[i] / sum);
  return out;
}

inline FTensor softmax_2pass(const FTensor& s) { return {s.shape, softmax_2pass_values(s.data)}; }

inline float gelu_scalar(float x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const double v = x;
  return float(0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))));
}

inline std::vector<float> gelu_values(std::span<const float> x) {
  std::vector<float> out(x.size());
  std::transform(x.begin(), x.end(), out.begin(), gelu_scalar);
  return out;
}

inline FTensor gelu(const FTensor& x) { return {x.shape, gelu_values(x.data)}; }

}  // namespace looplynx
