#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pfcr/errors.hpp"
#include "pfcr/ops.hpp"
#include "pfcr/tensor.hpp"

namespace pfcr {

enum class Scheme { uniform, log2 };
enum class Role { weight, activation, post_softmax };

inline const char* to_string(Scheme s) { return s == Scheme::uniform ? "uniform" : "log2"; }
inline const char* to_string(Role r) {
  switch (r) {
    case Role::weight: return "weight";
    case Role::activation: return "activation";
    default: return "post_softmax";
  }
}
inline Scheme scheme_from_string(const std::string& s) {
  if (s == "uniform") return Scheme::uniform;
  if (s == "log2") return Scheme::log2;
  throw ParseError("unknown quantization scheme '" + s + "'");
}
inline Role role_from_string(const std::string& s) {
  if (s == "weight") return Role::weight;
  if (s == "activation") return Role::activation;
  if (s == "post_softmax") return Role::post_softmax;
  throw ParseError("unknown quantizer role '" + s + "'");
}

// Degenerate calibration ranges fall back to this scale.
inline constexpr double kMinScale = 1e-8;

struct QuantSpec {
  int bits = 8;
  Scheme scheme = Scheme::uniform;
  std::optional<std::size_t> channel_axis;  // empty: one scale for the whole tensor
  Role role = Role::activation;

  static QuantSpec weight(int bits, std::size_t axis = 0) {
    return QuantSpec{bits, Scheme::uniform, axis, Role::weight};
  }
  static QuantSpec activation(int bits) {
    return QuantSpec{bits, Scheme::uniform, std::nullopt, Role::activation};
  }
  static QuantSpec post_softmax(int bits) {
    return QuantSpec{bits, Scheme::log2, std::nullopt, Role::post_softmax};
  }

  void validate() const {
    if (bits < 2 || bits > 32) throw ContractError("QuantSpec: bits must be in [2, 32]");
    if (role == Role::post_softmax && scheme != Scheme::log2)
      throw ContractError("QuantSpec: post-softmax activations use the log2 scheme");
    if (role == Role::weight && !channel_axis)
      throw ContractError("QuantSpec: weights are quantized per channel");
    if (role != Role::weight && channel_axis)
      throw ContractError("QuantSpec: activations are quantized per layer");
  }
};

template <typename T>
struct QuantParams {
  Tensor<T> scale;                     // [C] per channel or [1]; trainable leaf
  std::vector<std::int64_t> zero_point;  // same length as scale; empty for log2
  int bits = 8;
  Scheme scheme = Scheme::uniform;
  std::optional<std::size_t> channel_axis;

  std::int64_t qmax() const { return (std::int64_t{1} << bits) - 1; }
  std::size_t channels() const { return scale.numel(); }
};

struct CodeTensor {
  Shape shape;
  std::vector<std::int64_t> codes;
};

namespace detail {

// Maps a flat element index to its channel for per-channel params.
struct ChannelMap {
  std::size_t channels = 1;
  std::size_t inner = 1;
  std::size_t operator()(std::size_t i) const { return channels == 1 ? 0 : (i / inner) % channels; }
};

inline ChannelMap channel_map(const Shape& shape, std::optional<std::size_t> axis,
                              std::size_t channels) {
  if (!axis) {
    if (channels != 1) throw DimensionError("per-layer quantizer carries multiple scales");
    return {};
  }
  if (*axis >= shape.size()) throw DimensionError("quantizer channel axis out of range");
  if (shape[*axis] != channels)
    throw DimensionError("quantizer has " + std::to_string(channels) + " channels, tensor axis has " +
                         std::to_string(shape[*axis]));
  std::size_t inner = 1;
  for (std::size_t i = *axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {channels, inner};
}

inline std::int64_t uniform_code(double x, double s, std::int64_t z, std::int64_t qmax,
                                 bool* inside = nullptr) {
  const double u = std::nearbyint(x / s) + double(z);
  if (inside) *inside = u >= 0.0 && u <= double(qmax);
  if (std::isnan(u)) return 0;
  return std::int64_t(std::clamp(u, 0.0, double(qmax)));
}

inline std::int64_t log2_code(double x, double s, std::int64_t qmax, bool* inside = nullptr) {
  if (std::isnan(x)) {
    if (inside) *inside = false;
    return 0;
  }
  if (!(x > 0.0)) {
    if (inside) *inside = false;
    return qmax;
  }
  const double u = std::nearbyint(-std::log2(x / s));
  if (inside) *inside = u >= 0.0 && u <= double(qmax);
  return std::int64_t(std::clamp(u, 0.0, double(qmax)));
}

}  // namespace detail

// Min/max calibration. Uniform ranges are widened to contain zero so the
// zero point stays inside [0, 2^b - 1]; a constant input falls back to
// s = 1e-8, z = 0. The log2 scheme uses s = max(x).
template <typename T>
QuantParams<T> calibrate_minmax(const Tensor<T>& x, const QuantSpec& spec) {
  spec.validate();
  if (x.numel() == 0) throw ContractError("calibrate_minmax: empty tensor");
  std::size_t channels = 1;
  if (spec.channel_axis) {
    if (*spec.channel_axis >= x.rank()) throw DimensionError("calibrate_minmax: axis out of range");
    channels = x.dim(*spec.channel_axis);
  }
  const auto map = detail::channel_map(x.shape(), spec.channel_axis, channels);
  std::vector<double> lo(channels, std::numeric_limits<double>::infinity());
  std::vector<double> hi(channels, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t c = map(i);
    lo[c] = std::min(lo[c], double(x[i]));
    hi[c] = std::max(hi[c], double(x[i]));
  }
  QuantParams<T> p;
  p.bits = spec.bits;
  p.scheme = spec.scheme;
  p.channel_axis = spec.channel_axis;
  p.scale = Tensor<T>(Shape{channels});
  const double levels = double(p.qmax());
  for (std::size_t c = 0; c < channels; ++c) {
    if (spec.scheme == Scheme::log2) {
      p.scale[c] = T(hi[c] > 0.0 ? hi[c] : kMinScale);
      continue;
    }
    double s = kMinScale;
    std::int64_t z = 0;
    if (hi[c] > lo[c]) {
      const double mn = std::min(lo[c], 0.0), mx = std::max(hi[c], 0.0);
      s = (mx - mn) / levels;
      z = std::clamp<std::int64_t>(std::int64_t(std::nearbyint(-mn / s)), 0, p.qmax());
    }
    p.scale[c] = T(s);
    p.zero_point.push_back(z);
  }
  return p;
}

template <typename T>
CodeTensor quantize_uniform(const Tensor<T>& x, const QuantParams<T>& p) {
  const auto map = detail::channel_map(x.shape(), p.channel_axis, p.channels());
  CodeTensor out{x.shape(), std::vector<std::int64_t>(x.numel())};
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t c = map(i);
    out.codes[i] = detail::uniform_code(double(x[i]), double(p.scale[c]), p.zero_point[c], p.qmax());
  }
  return out;
}

template <typename T>
Tensor<T> dequantize_uniform(const CodeTensor& q, const QuantParams<T>& p) {
  const auto map = detail::channel_map(q.shape, p.channel_axis, p.channels());
  Tensor<T> out(q.shape);
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    const std::size_t c = map(i);
    out[i] = T(double(p.scale[c]) * double(q.codes[i] - p.zero_point[c]));
  }
  return out;
}

template <typename T>
CodeTensor quantize_log2(const Tensor<T>& x, const QuantParams<T>& p) {
  const auto map = detail::channel_map(x.shape(), p.channel_axis, p.channels());
  CodeTensor out{x.shape(), std::vector<std::int64_t>(x.numel())};
  for (std::size_t i = 0; i < x.numel(); ++i)
    out.codes[i] = detail::log2_code(double(x[i]), double(p.scale[map(i)]), p.qmax());
  return out;
}

// s * 2^(-code): the inverse of quantize_log2.
template <typename T>
Tensor<T> dequantize_log2(const CodeTensor& q, const QuantParams<T>& p) {
  const auto map = detail::channel_map(q.shape, p.channel_axis, p.channels());
  Tensor<T> out(q.shape);
  for (std::size_t i = 0; i < q.codes.size(); ++i)
    out[i] = T(std::ldexp(double(p.scale[map(i)]), -int(q.codes[i])));
  return out;
}

template <typename T>
CodeTensor quantize(const Tensor<T>& x, const QuantParams<T>& p) {
  return p.scheme == Scheme::uniform ? quantize_uniform(x, p) : quantize_log2(x, p);
}

template <typename T>
Tensor<T> dequantize(const CodeTensor& q, const QuantParams<T>& p) {
  return p.scheme == Scheme::uniform ? dequantize_uniform(q, p) : dequantize_log2(q, p);
}

// Quantize-dequantize with a straight-through estimate for x (identity inside
// the representable range, zero where the code is clipped). The scale gets
// the derivative of the dequantized value with the integer codes held fixed.
template <typename T>
Tensor<T> fake_quant(const Tensor<T>& x, const QuantParams<T>& p) {
  const auto map = detail::channel_map(x.shape(), p.channel_axis, p.channels());
  const std::int64_t qmax = p.qmax();
  const std::size_t count = x.numel();
  std::vector<T> out(count);
  std::vector<T> dscale(count);  // d out / d scale with the code fixed
  std::vector<unsigned char> clipped(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = map(i);
    const double s = double(p.scale[c]);
    bool inside = false;
    double unit;
    if (p.scheme == Scheme::uniform) {
      const std::int64_t z = p.zero_point[c];
      unit = double(detail::uniform_code(double(x[i]), s, z, qmax, &inside) - z);
    } else {
      unit = std::ldexp(1.0, -int(detail::log2_code(double(x[i]), s, qmax, &inside)));
    }
    // NaN inputs stay NaN so downstream checks can see them.
    out[i] = std::isnan(double(x[i])) ? x[i] : T(s * unit);
    dscale[i] = T(unit);
    clipped[i] = !inside;
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &p.scale},
      [map, dscale = std::move(dscale), clipped = std::move(clipped)](Node<T>& n) {
        if (T* gx = detail::grad_of(n, 0))
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (!clipped[i]) gx[i] += n.grad[i];
        if (T* gs = detail::grad_of(n, 1))
          for (std::size_t i = 0; i < n.grad.size(); ++i) gs[map(i)] += n.grad[i] * dscale[i];
      });
}

}  // namespace pfcr
