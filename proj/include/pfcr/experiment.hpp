#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "pfcr/checkpoint.hpp"
#include "pfcr/data.hpp"
#include "pfcr/errors.hpp"
#include "pfcr/pos.hpp"
#include "pfcr/serialize.hpp"
#include "pfcr/train.hpp"
#include "pfcr/vit.hpp"

namespace pfcr {

struct DataSource {
  std::string kind = "synthetic";  // synthetic | idx
  std::size_t n_train = 4000;      // synthetic only
  std::size_t n_eval = 1000;
  std::uint64_t seed = 7;  // synthetic draw; the eval split uses seed + 1
  SyntheticOptions synthetic;
  std::string train_images, train_labels, eval_images, eval_labels;  // idx only

  bool operator==(const DataSource&) const = default;
};

// One experiment, as read from a config file and echoed into every report.
struct RunConfig {
  ViTConfig model;
  DataSource data;
  TrainOptions train;
  POSConfig pos;  // pos.seed drives the calibration split and minibatch order
  std::size_t n_calib = 64;
  std::optional<std::size_t> n_recon;  // default: min(1024, n_train / 4)
  std::string baseline_checkpoint;     // path prefix or manifest path
  std::vector<std::string> arms{"blockwise", "pfcr_only", "pos_only", "pfcr_pos", "fp_baseline"};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::map<std::string, std::string> overrides;  // flags applied on top of the file

  bool operator==(const RunConfig&) const = default;
};

inline void to_json(json& j, const DataSource& d) {
  j = {{"kind", d.kind}, {"seed", d.seed}};
  if (d.kind == "synthetic") {
    j["n_train"] = d.n_train;
    j["n_eval"] = d.n_eval;
    j["synthetic"] = d.synthetic;
  } else {
    j["train_images"] = d.train_images;
    j["train_labels"] = d.train_labels;
    j["eval_images"] = d.eval_images;
    j["eval_labels"] = d.eval_labels;
  }
}

inline void from_json(const json& j, DataSource& d) {
  ser_detail::check_keys(j, {"kind", "seed", "n_train", "n_eval", "synthetic", "train_images",
                             "train_labels", "eval_images", "eval_labels"},
                         "data");
  using ser_detail::read;
  read(j, "kind", d.kind);
  if (d.kind != "synthetic" && d.kind != "idx")
    throw ConfigError("data.kind must be 'synthetic' or 'idx', got '" + d.kind + "'");
  read(j, "seed", d.seed);
  read(j, "n_train", d.n_train);
  read(j, "n_eval", d.n_eval);
  read(j, "synthetic", d.synthetic);
  read(j, "train_images", d.train_images);
  read(j, "train_labels", d.train_labels);
  read(j, "eval_images", d.eval_images);
  read(j, "eval_labels", d.eval_labels);
}

// The quantization table implied by the model shape and bit widths.
inline json quant_table(const ViTConfig& model, const POSConfig& pos) {
  json table = json::array();
  auto add = [&](const QuantPoint& p) {
    table.push_back({{"point", p.name},
                     {"role", to_string(p.spec.role)},
                     {"scheme", to_string(p.spec.scheme)},
                     {"bits", p.spec.bits},
                     {"channel_axis", p.spec.channel_axis ? json(*p.spec.channel_axis) : json()}});
  };
  for (const auto& p : weight_quant_points(model, pos.w_bits())) add(p);
  for (const auto& p : activation_quant_points(model, pos.a_bits())) add(p);
  return table;
}

inline void to_json(json& j, const RunConfig& c) {
  j = {{"model", c.model},
       {"data", c.data},
       {"train", c.train},
       {"pos", c.pos},
       {"quant", {{"n_calib", c.n_calib},
                  {"n_recon", c.n_recon ? json(*c.n_recon) : json()},
                  {"table", quant_table(c.model, c.pos)}}},
       {"baseline_checkpoint", c.baseline_checkpoint},
       {"ablation", {{"arms", c.arms}, {"seeds", c.seeds}}},
       {"overrides", c.overrides}};
}

// The quantization table is derived; a table present in the input must match it.
inline void from_json(const json& j, RunConfig& c) {
  ser_detail::check_keys(j, {"model", "data", "train", "pos", "quant", "baseline_checkpoint",
                             "ablation", "overrides"},
                         "config");
  using ser_detail::read;
  read(j, "model", c.model);
  read(j, "data", c.data);
  read(j, "train", c.train);
  if (j.contains("pos"))
    c.pos = j.at("pos").get<POSConfig>();
  else
    c.pos.iter_0 = default_iter_0(c.pos.bits);
  if (auto it = j.find("quant"); it != j.end()) {
    ser_detail::check_keys(*it, {"n_calib", "n_recon", "table"}, "quant");
    read(*it, "n_calib", c.n_calib);
    if (it->contains("n_recon") && !it->at("n_recon").is_null())
      c.n_recon = it->at("n_recon").get<std::size_t>();
    if (it->contains("table") && it->at("table") != quant_table(c.model, c.pos))
      throw ConfigError("quant.table does not match the model and bit widths");
  }
  read(j, "baseline_checkpoint", c.baseline_checkpoint);
  if (auto it = j.find("ablation"); it != j.end()) {
    ser_detail::check_keys(*it, {"arms", "seeds"}, "ablation");
    read(*it, "arms", c.arms);
    read(*it, "seeds", c.seeds);
  }
  read(j, "overrides", c.overrides);
}

inline void validate(const RunConfig& c) {
  try {
    c.model.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  c.pos.validate();
  if (c.n_calib < 1) throw ConfigError("quant.n_calib must be >= 1");
  if (c.n_recon && *c.n_recon < 1) throw ConfigError("quant.n_recon must be >= 1");
  if (c.data.kind == "synthetic" && (c.data.n_train < 1 || c.data.n_eval < 1))
    throw ConfigError("data: n_train and n_eval must be >= 1");
  if (c.data.kind == "idx" && (c.data.train_images.empty() || c.data.train_labels.empty() ||
                               c.data.eval_images.empty() || c.data.eval_labels.empty()))
    throw ConfigError("data: idx source needs train/eval image and label paths");
  if (c.seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  RunConfig cfg;
  try {
    cfg = json::parse(in).get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  validate(cfg);
  return cfg;
}

template <typename T>
struct Datasets {
  Dataset<T> train, eval;
};

inline Datasets<float> load_datasets(const RunConfig& cfg) {
  Datasets<float> out;
  if (cfg.data.kind == "synthetic") {
    SyntheticOptions opt = cfg.data.synthetic;
    opt.channels = cfg.model.channels;
    out.train = make_synthetic<float>(cfg.model.num_classes, cfg.data.n_train,
                                      cfg.model.image_size, cfg.data.seed, opt);
    out.eval = make_synthetic<float>(cfg.model.num_classes, cfg.data.n_eval,
                                     cfg.model.image_size, cfg.data.seed + 1, opt);
  } else {
    out.train = load_idx_images<float>(cfg.data.train_images, cfg.data.train_labels,
                                       cfg.model.image_size, cfg.model.channels,
                                       cfg.model.num_classes);
    out.eval = load_idx_images<float>(cfg.data.eval_images, cfg.data.eval_labels,
                                      cfg.model.image_size, cfg.model.channels,
                                      cfg.model.num_classes);
  }
  out.eval.split = "eval";
  return out;
}

inline std::size_t recon_count(const RunConfig& cfg, std::size_t train_size) {
  return cfg.n_recon.value_or(default_recon_count(train_size));
}

// MSE between the quantized and full-precision model at every block output.
template <typename T>
std::vector<double> block_losses(const ModelState<T>& model_q, const ModelState<T>& model_fp,
                                 const Tensor<T>& images) {
  NoGrad<T> guard;
  std::vector<double> out;
  auto xq = patch_embed(images, model_q);
  auto xf = patch_embed(images, model_fp);
  for (std::size_t u = 0; u < model_q.config.finest_units(); ++u) {
    xq = finest_unit_forward(xq, model_q, u);
    xf = finest_unit_forward(xf, model_fp, u);
    if (u % 2 == 1) out.push_back(double(mse_loss(xq, xf).item()));
  }
  return out;
}

struct RunReport {
  json config;  // echo of the RunConfig that produced this report
  std::uint64_t seed = 0;
  std::uint32_t baseline_checksum = 0;
  double baseline_accuracy = 0.0;
  double quantized_accuracy = 0.0;
  std::vector<StageReport> stages;
  std::vector<double> block_losses;
  std::string failed_stage;
  std::string error;
  double seconds = 0.0;

  bool operator==(const RunReport&) const = default;
};

inline void to_json(json& j, const RunReport& r) {
  j = {{"config", r.config},
       {"seed", r.seed},
       {"baseline_checksum", r.baseline_checksum},
       {"baseline_accuracy", r.baseline_accuracy},
       {"quantized_accuracy", r.quantized_accuracy},
       {"stages", r.stages},
       {"block_losses", r.block_losses},
       {"failed_stage", r.failed_stage},
       {"error", r.error},
       {"seconds", r.seconds}};
}

inline void from_json(const json& j, RunReport& r) {
  j.at("config").get_to(r.config);
  j.at("seed").get_to(r.seed);
  j.at("baseline_checksum").get_to(r.baseline_checksum);
  j.at("baseline_accuracy").get_to(r.baseline_accuracy);
  j.at("quantized_accuracy").get_to(r.quantized_accuracy);
  j.at("stages").get_to(r.stages);
  j.at("block_losses").get_to(r.block_losses);
  j.at("failed_stage").get_to(r.failed_stage);
  j.at("error").get_to(r.error);
  j.at("seconds").get_to(r.seconds);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// curves.csv: one row per reconstruction iteration, followed by the post-run
// per-block losses as rows with stage "final", level 1 and iteration 0.
inline void write_curves_csv(const RunReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "stage,level,unit,iteration,loss\n";
  for (const auto& stage : report.stages)
    for (const auto& c : stage.curves)
      for (std::size_t t = 0; t < c.losses.size(); ++t)
        out << c.stage << ',' << c.level << ',' << c.unit_index << ',' << t << ','
            << format_double(c.losses[t]) << '\n';
  for (std::size_t b = 0; b < report.block_losses.size(); ++b)
    out << "final,1," << b << ",0," << format_double(report.block_losses[b]) << '\n';
}

inline void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

struct QuantizeResult {
  ModelState<float> model;
  RunReport report;
};

// Calibration split, POS (or its one-stage / block-wise variants), evaluation
// and per-block losses for one seed. On failure the partial report is stored
// in `report` before the exception propagates.
inline QuantizeResult run_quantization(const RunConfig& cfg, const ModelState<float>& baseline,
                                       const Datasets<float>& data,
                                       std::optional<double> baseline_accuracy = std::nullopt,
                                       const PfcrHooks<float>& hooks = {},
                                       RunReport* partial = nullptr) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  RunReport report;
  report.config = cfg;
  report.seed = cfg.pos.seed;
  report.baseline_checksum = parameter_checksum(baseline);
  report.baseline_accuracy = baseline_accuracy ? *baseline_accuracy : evaluate_top1(baseline, data.eval);
  const auto split = sample_calibration(data.train, cfg.n_calib, recon_count(cfg, data.train.size()),
                                        cfg.pos.seed);
  PosReport pos;
  ModelState<float> model;
  try {
    model = run_pos(baseline, split.calib.images, split.recon.images, cfg.pos, pos, hooks);
  } catch (...) {
    report.stages = pos.stages;
    report.failed_stage = pos.failed_stage;
    report.error = pos.error;
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (partial) *partial = report;
    throw;
  }
  report.stages = std::move(pos.stages);
  report.quantized_accuracy = evaluate_top1(model, data.eval);
  ModelState<float> fp = baseline.clone();
  fp.quantizers.clear();
  fp.weight_quant_enabled = fp.act_quant_enabled = false;
  report.block_losses = block_losses(model, fp, split.recon.images);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (partial) *partial = report;
  return {std::move(model), std::move(report)};
}

// Writes report.json, curves.csv and config.json (the replayable echo).
inline void write_run_artifacts(const RunReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_json(report, (std::filesystem::path(dir) / "report.json").string());
  write_json(report.config, (std::filesystem::path(dir) / "config.json").string());
  write_curves_csv(report, (std::filesystem::path(dir) / "curves.csv").string());
}

}  // namespace pfcr
