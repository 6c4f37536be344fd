#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pfcr/errors.hpp"
#include "pfcr/ops.hpp"
#include "pfcr/optim.hpp"
#include "pfcr/quantizer.hpp"
#include "pfcr/schedule.hpp"
#include "pfcr/tensor.hpp"
#include "pfcr/vit.hpp"

namespace pfcr {

// Coarsest granularity level for an L-block model. When 2L is a power of two
// the whole model forms the top unit; otherwise the level below the largest
// complete group is used.
inline int compute_G(std::int64_t depth) {
  if (depth < 1) throw ContractError("compute_G: depth must be >= 1");
  const auto units = std::uint64_t(2 * depth);
  const int floor_log2 = std::bit_width(units) - 1;
  return std::has_single_bit(units) ? floor_log2 : floor_log2 - 1;
}

// A contiguous run of 2^level finest units starting at `start`.
struct ReconUnit {
  int level = 0;
  std::size_t start = 0;

  std::size_t span() const { return std::size_t{1} << level; }
  std::size_t end() const { return start + span(); }
  bool is_attention() const { return level == 0 && start % 2 == 0; }
  bool operator==(const ReconUnit&) const = default;
};

enum class InputPolicy { quantized_input, fp_input };

inline const char* to_string(InputPolicy p) {
  return p == InputPolicy::quantized_input ? "quantized_input" : "fp_input";
}
inline InputPolicy input_policy_from_string(const std::string& s) {
  if (s == "quantized_input") return InputPolicy::quantized_input;
  if (s == "fp_input") return InputPolicy::fp_input;
  throw ParseError("unknown input policy '" + s + "'");
}

struct LevelPlan {
  int level = 0;
  std::vector<ReconUnit> units;
  double lr = 0.0;
  std::int64_t iters = 0;
};

struct ReconPlan {
  int coarsest = 0;
  std::vector<LevelPlan> levels;
  InputPolicy input_policy = InputPolicy::quantized_input;

  std::int64_t total_steps() const {
    std::int64_t n = 0;
    for (const auto& l : levels) n += std::int64_t(l.units.size()) * l.iters;
    return n;
  }
};

// Level-g tiling of the 2L finest units; a trailing partial group is skipped.
inline std::vector<ReconUnit> tile_level(std::size_t depth, int g) {
  const std::size_t finest = 2 * depth, span = std::size_t{1} << g;
  std::vector<ReconUnit> out;
  for (std::size_t s = 0; s + span <= finest; s += span) out.push_back({g, s});
  return out;
}

// Levels 0..coarsest with the decaying lr and growing iteration schedules.
inline ReconPlan build_plan(std::size_t depth, int coarsest, double lr_0, std::int64_t iter_0,
                            InputPolicy policy = InputPolicy::quantized_input) {
  if (coarsest < 0 || coarsest > compute_G(std::int64_t(depth)))
    throw ContractError("build_plan: level " + std::to_string(coarsest) +
                        " exceeds the coarsest admissible level for depth " +
                        std::to_string(depth));
  ReconPlan plan;
  plan.coarsest = coarsest;
  plan.input_policy = policy;
  for (int g = 0; g <= coarsest; ++g)
    plan.levels.push_back({g, tile_level(depth, g), lr_for(g, lr_0), iter_for(g, iter_0)});
  return plan;
}

// A single fixed granularity (g = 1 is the conventional block-wise baseline).
inline ReconPlan build_single_level_plan(std::size_t depth, int level, double lr,
                                         std::int64_t iters,
                                         InputPolicy policy = InputPolicy::quantized_input) {
  if (level < 0 || level > compute_G(std::int64_t(depth)))
    throw ContractError("build_single_level_plan: level out of range");
  if (iters < 1) throw ContractError("build_single_level_plan: iters must be >= 1");
  ReconPlan plan;
  plan.coarsest = level;
  plan.input_policy = policy;
  plan.levels.push_back({level, tile_level(depth, level), lr, iters});
  return plan;
}

// Finest-unit level-0 view of the model.
inline std::vector<ReconUnit> finest_units(std::size_t depth) { return tile_level(depth, 0); }

template <typename T>
Tensor<T> unit_forward(const ReconUnit& unit, const Tensor<T>& x, const ModelState<T>& m) {
  if (unit.end() > m.config.finest_units())
    throw ContractError("unit_forward: unit exceeds the model");
  Tensor<T> y = x;
  for (std::size_t u = unit.start; u < unit.end(); ++u) y = finest_unit_forward(y, m, u);
  return y;
}

// MSE between the quantized unit on x_q and the frozen full-precision unit on x_fp.
template <typename T>
Tensor<T> recon_loss(const ReconUnit& unit, const Tensor<T>& x_q, const Tensor<T>& x_fp,
                     const ModelState<T>& model_q, const ModelState<T>& model_fp) {
  Tensor<T> target;
  {
    NoGrad<T> guard;
    target = unit_forward(unit, x_fp, model_fp).detach();
  }
  return mse_loss(unit_forward(unit, x_q, model_q), target);
}

// Scales of the unit's enabled quantizers.
template <typename T>
std::vector<Tensor<T>> unit_scales(const ReconUnit& unit, const ModelState<T>& m) {
  std::vector<Tensor<T>> out;
  for (std::size_t u = unit.start; u < unit.end(); ++u)
    for (const auto& point : unit_quant_points(u)) {
      auto it = m.quantizers.find(point);
      if (it == m.quantizers.end()) continue;
      const bool is_weight = it->second.spec.role == Role::weight;
      if ((is_weight && m.weight_quant_enabled) || (!is_weight && m.act_quant_enabled))
        out.push_back(it->second.params.scale);
    }
  return out;
}

// Weights (including LN affine) and enabled quantizer scales inside the unit.
template <typename T>
std::vector<Tensor<T>> unit_trainables(const ReconUnit& unit, const ModelState<T>& m) {
  std::vector<Tensor<T>> out;
  for (std::size_t u = unit.start; u < unit.end(); ++u) {
    const auto params = u % 2 == 0 ? m.attn_parameters(u / 2) : m.mlp_parameters(u / 2);
    for (const auto& [name, t] : params) out.push_back(t);
  }
  auto scales = unit_scales(unit, m);
  out.insert(out.end(), scales.begin(), scales.end());
  return out;
}

struct ReconOptions {
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct UnitCurve {
  std::string stage;
  int level = 0;
  std::size_t unit_index = 0;  // position within its level
  std::size_t start = 0;
  std::size_t span = 1;
  std::vector<double> losses;

  bool operator==(const UnitCurve&) const = default;
};

namespace recon_detail {

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  const std::size_t row = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = idx.size();
  std::vector<T> out(idx.size() * row);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.data().begin() + idx[i] * row, row, out.begin() + i * row);
  return Tensor<T>(std::move(shape), std::move(out));
}

inline std::string describe(const ReconUnit& unit) {
  return "unit(level=" + std::to_string(unit.level) + ", start=" + std::to_string(unit.start) +
         ", span=" + std::to_string(unit.span()) + ")";
}

}  // namespace recon_detail

// Adam + cosine annealing on the unit's trainable set. x_q and x_fp hold the
// unit inputs for every reconstruction sample ([n, N, D]); minibatches cycle
// through a seeded permutation. Returns the per-iteration loss.
template <typename T>
std::vector<double> reconstruct_unit(const ReconUnit& unit, const Tensor<T>& x_q,
                                     const Tensor<T>& x_fp, std::int64_t iters, double lr,
                                     ModelState<T>& model_q, const ModelState<T>& model_fp,
                                     const ReconOptions& opt = {}) {
  if (iters < 1) throw ContractError("reconstruct_unit: iters must be >= 1");
  if (x_q.rank() == 0 || x_q.dim(0) == 0) throw ContractError("reconstruct_unit: no data");
  if (x_q.shape() != x_fp.shape()) throw DimensionError("reconstruct_unit: input shapes differ");
  Tensor<T> target;
  {
    NoGrad<T> guard;
    target = unit_forward(unit, x_fp, model_fp).detach();
  }
  const std::size_t n = x_q.dim(0);
  const std::size_t bs = std::min(opt.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(opt.seed ^ (std::uint64_t(unit.level) << 32) ^ unit.start);
  std::shuffle(order.begin(), order.end(), rng);

  model_q.set_requires_grad(false);
  auto params = unit_trainables(unit, model_q);
  auto scales = unit_scales(unit, model_q);
  for (auto& p : params) p.set_requires_grad(true);

  AdamState<T> state;
  std::vector<double> curve;
  curve.reserve(std::size_t(iters));
  std::vector<std::size_t> idx(bs);
  for (std::int64_t t = 0; t < iters; ++t) {
    for (std::size_t j = 0; j < bs; ++j) idx[j] = order[(std::size_t(t) * bs + j) % n];
    const auto xb = recon_detail::gather_rows(x_q, idx);
    const auto yb = recon_detail::gather_rows(target, idx);
    for (auto& p : params) p.zero_grad();
    double loss_value;
    {
      Tape<T> tape;
      auto loss = mse_loss(unit_forward(unit, xb, model_q), yb);
      loss_value = double(loss.item());
      if (!std::isfinite(loss_value)) {
        for (auto& p : params) p.set_requires_grad(false);
        throw NumericalError("non-finite reconstruction loss at iteration " + std::to_string(t) +
                             " of " + recon_detail::describe(unit));
      }
      backward(loss, tape);
    }
    adam_step(params, state, T(cosine_lr(t, iters, lr)));
    for (auto& sc : scales)
      for (auto& v : sc.values()) v = std::max(v, T(kMinScale));
    curve.push_back(loss_value);
  }
  for (auto& p : params) p.set_requires_grad(false);
  return curve;
}

template <typename T>
struct PfcrHooks {
  std::function<void(const UnitCurve&)> on_unit;                  // curve sink
  std::function<void(int level, const ModelState<T>&)> on_level;  // after each level
};

// Runs every level of the plan in order (fine to coarse), units in network
// order. Quantized unit inputs are recomputed at each unit start; the frozen
// model's intermediates are computed once.
template <typename T>
std::vector<UnitCurve> pfcr_run(ModelState<T>& model_q, const ModelState<T>& model_fp,
                                const Tensor<T>& recon_images, const ReconPlan& plan,
                                const ReconOptions& opt = {}, const std::string& stage = "",
                                const PfcrHooks<T>& hooks = {}) {
  if (recon_images.rank() == 0 || recon_images.dim(0) == 0)
    throw ContractError("pfcr_run: empty reconstruction set");
  const auto fp_inputs = capture_intermediates(recon_images, model_fp);
  std::vector<UnitCurve> curves;
  for (const auto& level : plan.levels) {
    for (std::size_t k = 0; k < level.units.size(); ++k) {
      const auto& unit = level.units[k];
      const auto& x_fp = fp_inputs.at(unit.start);
      const Tensor<T> x_q = plan.input_policy == InputPolicy::fp_input
                                ? x_fp
                                : forward_to_unit(recon_images, model_q, unit.start);
      ReconOptions unit_opt = opt;
      unit_opt.seed = opt.seed + 7919 * curves.size();
      UnitCurve c{stage, level.level, k, unit.start, unit.span(),
                  reconstruct_unit(unit, x_q, x_fp, level.iters, level.lr, model_q, model_fp,
                                   unit_opt)};
      if (hooks.on_unit) hooks.on_unit(c);
      curves.push_back(std::move(c));
    }
    if (hooks.on_level) hooks.on_level(level.level, model_q);
  }
  return curves;
}

}  // namespace pfcr
