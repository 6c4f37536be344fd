#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pfcr/errors.hpp"
#include "pfcr/ops.hpp"
#include "pfcr/quantizer.hpp"
#include "pfcr/tensor.hpp"

namespace pfcr {

struct ViTConfig {
  std::size_t depth = 6;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t patch_size = 8;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 10;
  double ln_eps = 1e-6;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t hidden() const { return std::size_t(std::lround(mlp_ratio * double(embed_dim))); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t finest_units() const { return 2 * depth; }

  void validate() const {
    if (depth < 1) throw ContractError("ViTConfig: depth must be >= 1");
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0)
      throw ContractError("ViTConfig: embed_dim must be a positive multiple of heads");
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ContractError("ViTConfig: image_size must be divisible by patch_size");
    if (channels == 0 || num_classes == 0 || hidden() == 0)
      throw ContractError("ViTConfig: channels, classes and hidden width must be positive");
  }

  bool operator==(const ViTConfig&) const = default;
};

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
struct Quantizer {
  QuantSpec spec;
  QuantParams<T> params;
};

// Records per-point activation ranges during a calibration forward.
struct RangeObserver {
  std::map<std::string, std::pair<double, double>> ranges;

  template <typename T>
  void observe(const std::string& point, const Tensor<T>& x) {
    auto [it, fresh] = ranges.try_emplace(point, std::numeric_limits<double>::infinity(),
                                          -std::numeric_limits<double>::infinity());
    for (T v : x.data()) {
      it->second.first = std::min(it->second.first, double(v));
      it->second.second = std::max(it->second.second, double(v));
    }
  }
};

template <typename T>
struct ModelState {
  ViTConfig config;
  Tensor<T> patch_w, patch_b, pos;
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> norm_g, norm_b, head_w, head_b;

  std::map<std::string, Quantizer<T>> quantizers;
  bool weight_quant_enabled = false;
  bool act_quant_enabled = false;
  RangeObserver* observer = nullptr;

  // Canonical (name, tensor) order used by checkpoints, audits and checksums.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out{
        {"patch.weight", patch_w}, {"patch.bias", patch_b}, {"pos", pos}};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      for (auto& [name, t] : block_parameters(i)) out.emplace_back(name, t);
    }
    out.insert(out.end(), {{"norm.weight", norm_g}, {"norm.bias", norm_b},
                           {"head.weight", head_w}, {"head.bias", head_b}});
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>>> attn_parameters(std::size_t i) const {
    const auto p = "blocks." + std::to_string(i) + ".";
    const auto& b = blocks.at(i);
    return {{p + "ln1.weight", b.ln1_g},     {p + "ln1.bias", b.ln1_b},
            {p + "attn.q.weight", b.wq},     {p + "attn.q.bias", b.bq},
            {p + "attn.k.weight", b.wk},     {p + "attn.k.bias", b.bk},
            {p + "attn.v.weight", b.wv},     {p + "attn.v.bias", b.bv},
            {p + "attn.proj.weight", b.wo},  {p + "attn.proj.bias", b.bo}};
  }

  std::vector<std::pair<std::string, Tensor<T>>> mlp_parameters(std::size_t i) const {
    const auto p = "blocks." + std::to_string(i) + ".";
    const auto& b = blocks.at(i);
    return {{p + "ln2.weight", b.ln2_g},     {p + "ln2.bias", b.ln2_b},
            {p + "mlp.fc1.weight", b.fc1_w}, {p + "mlp.fc1.bias", b.fc1_b},
            {p + "mlp.fc2.weight", b.fc2_w}, {p + "mlp.fc2.bias", b.fc2_b}};
  }

  std::vector<std::pair<std::string, Tensor<T>>> block_parameters(std::size_t i) const {
    auto out = attn_parameters(i);
    auto mlp = mlp_parameters(i);
    out.insert(out.end(), mlp.begin(), mlp.end());
    return out;
  }

  // Handle sharing storage with the named parameter; undefined if absent.
  Tensor<T> find_parameter(const std::string& name) const {
    for (auto& [n, t] : named_parameters())
      if (n == name) return t;
    return {};
  }

  // Deep copy: tensors, quantizer params and mode flags. Observers are not copied.
  ModelState clone() const {
    ModelState out;
    out.config = config;
    out.weight_quant_enabled = weight_quant_enabled;
    out.act_quant_enabled = act_quant_enabled;
    out.patch_w = patch_w.clone();
    out.patch_b = patch_b.clone();
    out.pos = pos.clone();
    for (const auto& b : blocks) {
      out.blocks.push_back({b.ln1_g.clone(), b.ln1_b.clone(), b.wq.clone(), b.bq.clone(),
                            b.wk.clone(), b.bk.clone(), b.wv.clone(), b.bv.clone(),
                            b.wo.clone(), b.bo.clone(), b.ln2_g.clone(), b.ln2_b.clone(),
                            b.fc1_w.clone(), b.fc1_b.clone(), b.fc2_w.clone(), b.fc2_b.clone()});
    }
    out.norm_g = norm_g.clone();
    out.norm_b = norm_b.clone();
    out.head_w = head_w.clone();
    out.head_b = head_b.clone();
    for (const auto& [name, q] : quantizers) {
      Quantizer<T> c = q;
      c.params.scale = q.params.scale.clone();
      out.quantizers.emplace(name, std::move(c));
    }
    return out;
  }

  template <typename U>
  ModelState<U> cast() const {
    ModelState<U> out;
    out.config = config;
    out.weight_quant_enabled = weight_quant_enabled;
    out.act_quant_enabled = act_quant_enabled;
    auto c = [](const Tensor<T>& t) { return t.template cast<U>(); };
    out.patch_w = c(patch_w);
    out.patch_b = c(patch_b);
    out.pos = c(pos);
    for (const auto& b : blocks)
      out.blocks.push_back({c(b.ln1_g), c(b.ln1_b), c(b.wq), c(b.bq), c(b.wk), c(b.bk), c(b.wv),
                            c(b.bv), c(b.wo), c(b.bo), c(b.ln2_g), c(b.ln2_b), c(b.fc1_w),
                            c(b.fc1_b), c(b.fc2_w), c(b.fc2_b)});
    out.norm_g = c(norm_g);
    out.norm_b = c(norm_b);
    out.head_w = c(head_w);
    out.head_b = c(head_b);
    for (const auto& [name, q] : quantizers) {
      QuantParams<U> p{c(q.params.scale), q.params.zero_point, q.params.bits, q.params.scheme,
                       q.params.channel_axis};
      out.quantizers.emplace(name, Quantizer<U>{q.spec, std::move(p)});
    }
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : named_parameters()) Tensor<T>(t).set_requires_grad(on);
    for (auto& [name, q] : quantizers) q.params.scale.set_requires_grad(on);
  }
};

namespace vit_detail {

inline std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

template <typename T>
Tensor<T> quant_weight(const ModelState<T>& m, const std::string& name, const Tensor<T>& w) {
  if (!m.weight_quant_enabled) return w;
  auto it = m.quantizers.find(name);
  return it == m.quantizers.end() ? w : fake_quant(w, it->second.params);
}

template <typename T>
Tensor<T> quant_act(const ModelState<T>& m, const std::string& point, const Tensor<T>& x) {
  if (m.observer) m.observer->observe(point, x);
  if (!m.act_quant_enabled) return x;
  auto it = m.quantizers.find(point);
  return it == m.quantizers.end() ? x : fake_quant(x, it->second.params);
}

template <typename T>
Tensor<T> trunc_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) {
    double z;
    do z = dist(rng);
    while (std::abs(z) > 2.0);
    v = T(z * stddev);
  }
  return t;
}

}  // namespace vit_detail

// Fresh model: truncated-normal(0.02) projections, zero biases, unit LN gains.
template <typename T>
ModelState<T> init_model(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  using vit_detail::trunc_normal;
  const std::size_t d = cfg.embed_dim, h = cfg.hidden();
  ModelState<T> m;
  m.config = cfg;
  m.patch_w = trunc_normal<T>({d, cfg.patch_dim()}, 0.02, rng);
  m.patch_b = Tensor<T>(Shape{d});
  m.pos = trunc_normal<T>({cfg.tokens(), d}, 0.02, rng);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    BlockWeights<T> b;
    b.ln1_g = Tensor<T>(Shape{d}, T(1));
    b.ln1_b = Tensor<T>(Shape{d});
    b.wq = trunc_normal<T>({d, d}, 0.02, rng);
    b.bq = Tensor<T>(Shape{d});
    b.wk = trunc_normal<T>({d, d}, 0.02, rng);
    b.bk = Tensor<T>(Shape{d});
    b.wv = trunc_normal<T>({d, d}, 0.02, rng);
    b.bv = Tensor<T>(Shape{d});
    b.wo = trunc_normal<T>({d, d}, 0.02, rng);
    b.bo = Tensor<T>(Shape{d});
    b.ln2_g = Tensor<T>(Shape{d}, T(1));
    b.ln2_b = Tensor<T>(Shape{d});
    b.fc1_w = trunc_normal<T>({h, d}, 0.02, rng);
    b.fc1_b = Tensor<T>(Shape{h});
    b.fc2_w = trunc_normal<T>({d, h}, 0.02, rng);
    b.fc2_b = Tensor<T>(Shape{d});
    m.blocks.push_back(std::move(b));
  }
  m.norm_g = Tensor<T>(Shape{d}, T(1));
  m.norm_b = Tensor<T>(Shape{d});
  m.head_w = trunc_normal<T>({cfg.num_classes, d}, 0.02, rng);
  m.head_b = Tensor<T>(Shape{cfg.num_classes});
  return m;
}

// [B, C, H, W] -> [B, N, D]: patch projection plus position embedding.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const ModelState<T>& m) {
  const auto& cfg = m.config;
  if (images.rank() != 4 || images.dim(1) != cfg.channels || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.image_size)
    throw DimensionError("patch_embed: images " + shape_str(images.shape()) +
                         " do not match the model configuration");
  // Raw pixels are model input, not an activation, and stay unquantized.
  auto x = linear(patchify(images, cfg.patch_size), vit_detail::quant_weight(m, "patch.weight", m.patch_w), m.patch_b);
  return add_rows(x, m.pos);
}

// X + MHSA(LN(X)) for block i.
template <typename T>
Tensor<T> mhsa_forward(const Tensor<T>& x, const ModelState<T>& m, std::size_t i) {
  using namespace vit_detail;
  const auto& b = m.blocks.at(i);
  const auto p = block_prefix(i);
  const std::size_t heads = m.config.heads;
  const T factor = T(1) / std::sqrt(T(m.config.embed_dim / heads));
  auto h = quant_act(m, p + "attn.in", layernorm(x, b.ln1_g, b.ln1_b, T(m.config.ln_eps)));
  auto q = linear(h, quant_weight(m, p + "attn.q.weight", b.wq), b.bq);
  auto k = linear(h, quant_weight(m, p + "attn.k.weight", b.wk), b.bk);
  auto v = linear(h, quant_weight(m, p + "attn.v.weight", b.wv), b.bv);
  auto probs = quant_act(m, p + "attn.probs", softmax(attention_scores(q, k, heads, factor)));
  auto ctx = quant_act(m, p + "attn.proj_in", attention_context(probs, v));
  auto out = linear(ctx, quant_weight(m, p + "attn.proj.weight", b.wo), b.bo);
  return add(x, out);
}

// Y + MLP(LN(Y)) for block i.
template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& y, const ModelState<T>& m, std::size_t i) {
  using namespace vit_detail;
  const auto& b = m.blocks.at(i);
  const auto p = block_prefix(i);
  auto h = quant_act(m, p + "mlp.in", layernorm(y, b.ln2_g, b.ln2_b, T(m.config.ln_eps)));
  auto a = gelu(linear(h, quant_weight(m, p + "mlp.fc1.weight", b.fc1_w), b.fc1_b));
  a = quant_act(m, p + "mlp.fc2_in", a);
  auto out = linear(a, quant_weight(m, p + "mlp.fc2.weight", b.fc2_w), b.fc2_b);
  return add(y, out);
}

// Finest unit u: even u is the MHSA unit of block u/2, odd u its MLP unit.
template <typename T>
Tensor<T> finest_unit_forward(const Tensor<T>& x, const ModelState<T>& m, std::size_t u) {
  return u % 2 == 0 ? mhsa_forward(x, m, u / 2) : mlp_forward(x, m, u / 2);
}

// Final LN, token mean-pool and classifier.
template <typename T>
Tensor<T> head_forward(const Tensor<T>& x, const ModelState<T>& m) {
  using namespace vit_detail;
  auto h = quant_act(m, "norm.out", layernorm(x, m.norm_g, m.norm_b, T(m.config.ln_eps)));
  auto pooled = quant_act(m, "head.in", mean_tokens(h));
  return linear(pooled, quant_weight(m, "head.weight", m.head_w), m.head_b);
}

template <typename T>
Tensor<T> model_forward(const Tensor<T>& images, const ModelState<T>& m) {
  auto x = patch_embed(images, m);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    x = mhsa_forward(x, m, i);
    x = mlp_forward(x, m, i);
  }
  return head_forward(x, m);
}

// Inputs of all 2L finest units (X_0, Y_0, X_1, Y_1, ...), detached.
template <typename T>
std::vector<Tensor<T>> capture_intermediates(const Tensor<T>& images, const ModelState<T>& m) {
  NoGrad<T> guard;
  std::vector<Tensor<T>> out;
  auto x = patch_embed(images, m);
  for (std::size_t u = 0; u < m.config.finest_units(); ++u) {
    out.push_back(x.detach());
    x = finest_unit_forward(x, m, u);
  }
  return out;
}

// Output of finest units [0, end) applied to the embedded images.
template <typename T>
Tensor<T> forward_to_unit(const Tensor<T>& images, const ModelState<T>& m, std::size_t end) {
  NoGrad<T> guard;
  auto x = patch_embed(images, m);
  for (std::size_t u = 0; u < end; ++u) x = finest_unit_forward(x, m, u);
  return x.detach();
}

struct QuantPoint {
  std::string name;
  QuantSpec spec;
};

// All quantization points of a model: every weight matrix (per-channel uniform)
// and the activation points (per-layer uniform, log2 for attention probabilities).
inline std::vector<QuantPoint> weight_quant_points(const ViTConfig& cfg, int bits) {
  std::vector<QuantPoint> out{{"patch.weight", QuantSpec::weight(bits)}};
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const auto p = vit_detail::block_prefix(i);
    for (const char* w : {"attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.proj.weight",
                          "mlp.fc1.weight", "mlp.fc2.weight"})
      out.push_back({p + w, QuantSpec::weight(bits)});
  }
  out.push_back({"head.weight", QuantSpec::weight(bits)});
  return out;
}

inline std::vector<QuantPoint> activation_quant_points(const ViTConfig& cfg, int bits) {
  std::vector<QuantPoint> out;
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const auto p = vit_detail::block_prefix(i);
    out.push_back({p + "attn.in", QuantSpec::activation(bits)});
    out.push_back({p + "attn.probs", QuantSpec::post_softmax(bits)});
    out.push_back({p + "attn.proj_in", QuantSpec::activation(bits)});
    out.push_back({p + "mlp.in", QuantSpec::activation(bits)});
    out.push_back({p + "mlp.fc2_in", QuantSpec::activation(bits)});
  }
  out.push_back({"norm.out", QuantSpec::activation(bits)});
  out.push_back({"head.in", QuantSpec::activation(bits)});
  return out;
}

// Quantizer names belonging to finest unit u (weights and activations).
inline std::vector<std::string> unit_quant_points(std::size_t u) {
  const auto p = vit_detail::block_prefix(u / 2);
  if (u % 2 == 0)
    return {p + "attn.in",       p + "attn.probs",    p + "attn.proj_in",   p + "attn.q.weight",
            p + "attn.k.weight", p + "attn.v.weight", p + "attn.proj.weight"};
  return {p + "mlp.in", p + "mlp.fc2_in", p + "mlp.fc1.weight", p + "mlp.fc2.weight"};
}

// Calibrates per-channel weight quantizers from the current weights.
template <typename T>
void attach_weight_quantizers(ModelState<T>& m, int bits) {
  for (const auto& point : weight_quant_points(m.config, bits)) {
    const Tensor<T> w = m.find_parameter(point.name);
    if (!w.defined()) throw ContractError("missing weight " + point.name);
    m.quantizers.insert_or_assign(point.name,
                                  Quantizer<T>{point.spec, calibrate_minmax(w, point.spec)});
  }
}

// Calibrates per-layer activation quantizers from one forward over `calib`.
// The forward runs with activation quantization off.
template <typename T>
void attach_activation_quantizers(ModelState<T>& m, int bits, const Tensor<T>& calib) {
  if (calib.rank() == 0 || calib.numel() == 0 || calib.dim(0) == 0)
    throw ContractError("attach_quantizers: empty calibration batch");
  RangeObserver observer;
  const bool act = m.act_quant_enabled;
  m.act_quant_enabled = false;
  m.observer = &observer;
  {
    NoGrad<T> guard;
    model_forward(calib, m);
  }
  m.observer = nullptr;
  m.act_quant_enabled = act;
  for (const auto& point : activation_quant_points(m.config, bits)) {
    const auto& [lo, hi] = observer.ranges.at(point.name);
    Tensor<T> range(Shape{2}, std::vector<T>{T(lo), T(hi)});
    m.quantizers.insert_or_assign(point.name,
                                  Quantizer<T>{point.spec, calibrate_minmax(range, point.spec)});
  }
}

template <typename T>
void attach_quantizers(ModelState<T>& m, int weight_bits, int act_bits, const Tensor<T>& calib) {
  attach_activation_quantizers(m, act_bits, calib);
  attach_weight_quantizers(m, weight_bits);
}

}  // namespace pfcr
