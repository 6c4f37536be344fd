#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pfcr/errors.hpp"
#include "pfcr/recon.hpp"
#include "pfcr/schedule.hpp"
#include "pfcr/vit.hpp"

namespace pfcr {

// pfcr: fine-to-coarse levels 0..G. blockwise: one g = 1 level whose per-block
// iteration count matches the total step budget of the corresponding PFCR plan.
enum class Method { pfcr, blockwise };

inline const char* to_string(Method m) { return m == Method::pfcr ? "pfcr" : "blockwise"; }
inline Method method_from_string(const std::string& s) {
  if (s == "pfcr" || s == "pfcr-pos") return Method::pfcr;
  if (s == "blockwise") return Method::blockwise;
  throw ConfigError("unknown method '" + s + "'");
}

struct POSConfig {
  int bits = 3;
  std::optional<int> weight_bits;  // override; defaults to bits
  std::optional<int> act_bits;
  double lr_0 = 4e-5;
  std::int64_t iter_0 = 800;
  bool stage1_enabled = true;
  Method method = Method::pfcr;
  InputPolicy input_policy = InputPolicy::quantized_input;
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;
  bool recalibrate_activations = false;  // stage 2 re-runs activation calibration

  int w_bits() const { return weight_bits.value_or(bits); }
  int a_bits() const { return act_bits.value_or(bits); }

  void validate() const {
    if (w_bits() < 2 || a_bits() < 2) throw ConfigError("bits must be >= 2");
    if (!(lr_0 > 0.0)) throw ConfigError("lr_0 must be positive");
    if (iter_0 < 1) throw ConfigError("iter_0 must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }

  bool operator==(const POSConfig&) const = default;
};

// Default base iterations per bit width: 800 / 300 / 100 for 3 / 4 / 6 bits.
inline std::int64_t default_iter_0(int bits) {
  if (bits <= 3) return 800;
  if (bits <= 5) return 300;
  return 100;
}

struct StageReport {
  std::string name;
  int coarsest = 0;
  std::vector<int> levels;
  std::vector<double> level_lr;
  std::vector<std::int64_t> level_iters;
  bool weight_quant = false;
  bool act_quant = false;
  std::vector<UnitCurve> curves;
  double seconds = 0.0;

  bool operator==(const StageReport&) const = default;
};

struct PosReport {
  std::vector<StageReport> stages;
  std::string failed_stage;  // empty on success
  std::string error;
};

// The reconstruction plan a stage uses for a given coarsest PFCR level.
inline ReconPlan stage_plan(const POSConfig& cfg, std::size_t depth, int coarsest) {
  auto pfcr = build_plan(depth, coarsest, cfg.lr_0, cfg.iter_0, cfg.input_policy);
  if (cfg.method == Method::pfcr) return pfcr;
  const auto per_block = std::max<std::int64_t>(
      1, std::llround(double(pfcr.total_steps()) / double(depth)));
  return build_single_level_plan(depth, 1, cfg.lr_0, per_block, cfg.input_policy);
}

namespace pos_detail {

template <typename T>
StageReport run_stage(const std::string& name, ModelState<T>& model, const ModelState<T>& model_fp,
                      const Tensor<T>& recon, const ReconPlan& plan, const POSConfig& cfg,
                      const PfcrHooks<T>& hooks) {
  StageReport report;
  report.name = name;
  report.coarsest = plan.coarsest;
  for (const auto& l : plan.levels) {
    report.levels.push_back(l.level);
    report.level_lr.push_back(l.lr);
    report.level_iters.push_back(l.iters);
  }
  report.weight_quant = model.weight_quant_enabled;
  report.act_quant = model.act_quant_enabled;
  const auto t0 = std::chrono::steady_clock::now();
  ReconOptions opt{cfg.batch_size, cfg.seed * 1000003 + (name == "stage2" ? 2 : 1)};
  report.curves = pfcr_run(model, model_fp, recon, plan, opt, name, hooks);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace pos_detail

// Stage 1: activations quantized, weights kept in full precision; G = 1.
template <typename T>
ModelState<T> run_stage1(const ModelState<T>& model_fp, const Tensor<T>& calib,
                         const Tensor<T>& recon, const POSConfig& cfg, StageReport& report,
                         const PfcrHooks<T>& hooks = {}) {
  cfg.validate();
  ModelState<T> model = model_fp.clone();
  model.quantizers.clear();
  model.weight_quant_enabled = false;
  model.act_quant_enabled = true;
  attach_activation_quantizers(model, cfg.a_bits(), calib);
  report = pos_detail::run_stage("stage1", model, model_fp, recon,
                                 stage_plan(cfg, model.config.depth, 1), cfg, hooks);
  return model;
}

// Stage 2: weights and activations quantized; G from the block count. Weight
// quantizers are calibrated from the incoming (possibly stage-1 updated)
// weights; activation quantizers are inherited unless missing or
// recalibration is requested.
template <typename T>
ModelState<T> run_stage2(const ModelState<T>& start, const ModelState<T>& model_fp,
                         const Tensor<T>& calib, const Tensor<T>& recon, const POSConfig& cfg,
                         StageReport& report, const PfcrHooks<T>& hooks = {}) {
  cfg.validate();
  ModelState<T> model = start.clone();
  const bool has_act = model.quantizers.count("blocks.0.attn.probs") > 0;
  if (!has_act || cfg.recalibrate_activations)
    attach_activation_quantizers(model, cfg.a_bits(), calib);
  attach_weight_quantizers(model, cfg.w_bits());
  model.weight_quant_enabled = true;
  model.act_quant_enabled = true;
  const int G = compute_G(std::int64_t(model.config.depth));
  report = pos_detail::run_stage("stage2", model, model_fp, recon,
                                 stage_plan(cfg, model.config.depth, G), cfg, hooks);
  return model;
}

// Two-stage progressive optimization (stage 1 optional for the one-stage ablation).
// `report` is filled as stages complete so a failure still leaves partial results.
template <typename T>
ModelState<T> run_pos(const ModelState<T>& model_fp, const Tensor<T>& calib,
                      const Tensor<T>& recon, const POSConfig& cfg, PosReport& report,
                      const PfcrHooks<T>& hooks = {}) {
  cfg.validate();
  report = {};
  ModelState<T> frozen = model_fp.clone();
  frozen.quantizers.clear();
  frozen.weight_quant_enabled = frozen.act_quant_enabled = false;
  frozen.set_requires_grad(false);
  std::string stage = "stage1";
  try {
    ModelState<T> current = frozen.clone();
    if (cfg.stage1_enabled) {
      StageReport s1;
      current = run_stage1(frozen, calib, recon, cfg, s1, hooks);
      report.stages.push_back(std::move(s1));
    }
    stage = "stage2";
    StageReport s2;
    auto out = run_stage2(current, frozen, calib, recon, cfg, s2, hooks);
    report.stages.push_back(std::move(s2));
    return out;
  } catch (const std::exception& e) {
    report.failed_stage = stage;
    report.error = e.what();
    throw;
  }
}

}  // namespace pfcr
