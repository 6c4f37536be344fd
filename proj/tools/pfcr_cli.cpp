#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "pfcr/pfcr.hpp"

namespace fs = std::filesystem;
using namespace pfcr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Flags {
  std::string config;
  std::string checkpoint;
  std::optional<int> bits;
  std::optional<std::string> method;
  bool one_stage = false;
  std::optional<std::int64_t> iters;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out = "run";
  bool json = false;
};

void log(const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); }

// Reads the config file (or an empty object) and folds the flag overrides in
// before conversion, so bit-width dependent defaults follow --bits.
RunConfig resolve_config(const Flags& f, const std::string& command) {
  json j = json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot open config '" + f.config + "'");
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(f.config + ": " + e.what());
    }
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::map<std::string, std::string> echo;
  if (j.contains("overrides")) echo = j.at("overrides").get<std::map<std::string, std::string>>();
  auto& pos = j["pos"];
  if (pos.is_null()) pos = json::object();
  if (f.bits) {
    pos["bits"] = *f.bits;
    echo["bits"] = std::to_string(*f.bits);
  }
  if (f.method) {
    if (*f.method == "pfcr-pos") {
      pos["method"] = "pfcr";
      pos["stage1_enabled"] = true;
    } else if (*f.method == "pfcr" || *f.method == "blockwise") {
      pos["method"] = *f.method;
      pos["stage1_enabled"] = false;
    } else {
      throw ConfigError("--method must be pfcr-pos, pfcr or blockwise");
    }
    echo["method"] = *f.method;
  }
  if (f.one_stage) {
    pos["stage1_enabled"] = false;
    echo["one_stage"] = "true";
  }
  if (f.iters) {
    pos["iter_0"] = *f.iters;
    echo["iters"] = std::to_string(*f.iters);
  }
  if (f.lr) {
    pos["lr_0"] = *f.lr;
    echo["lr"] = format_double(*f.lr);
  }
  if (f.seed) {
    echo["seed"] = std::to_string(*f.seed);
    if (command == "train-baseline") {
      j["train"]["seed"] = *f.seed;
    } else if (command == "ablate") {
      auto seeds = j.contains("ablation") && j["ablation"].contains("seeds")
                       ? j["ablation"]["seeds"].get<std::vector<std::uint64_t>>()
                       : RunConfig{}.seeds;
      for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = *f.seed + i;
      j["ablation"]["seeds"] = seeds;
    } else {
      pos["seed"] = *f.seed;
    }
  }
  if (!f.checkpoint.empty() && command != "inspect") {
    j["baseline_checkpoint"] = f.checkpoint;
    echo["checkpoint"] = f.checkpoint;
  }
  if (f.jobs != 1) echo["jobs"] = std::to_string(f.jobs);
  echo["command"] = command;
  j["overrides"] = echo;
  // The echoed table would be stale after a bit-width override.
  if (j.contains("quant") && j["quant"].is_object()) j["quant"].erase("table");
  RunConfig cfg;
  try {
    cfg = j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

ModelState<float> require_baseline(const RunConfig& cfg) {
  if (cfg.baseline_checkpoint.empty())
    throw ConfigError("no baseline checkpoint: set baseline_checkpoint or pass --checkpoint");
  if (!checkpoint_exists(cfg.baseline_checkpoint))
    throw ConfigError("baseline checkpoint not found: " + cfg.baseline_checkpoint);
  return load_checkpoint(cfg.baseline_checkpoint);
}

void check_shape(const RunConfig& cfg, const ModelState<float>& model) {
  if (!(model.config == cfg.model))
    throw ConfigError("checkpoint model shape differs from the config's model section");
}

int cmd_train(const Flags& f) {
  const RunConfig cfg = resolve_config(f, "train-baseline");
  const auto data = load_datasets(cfg);
  log("training baseline: " + std::to_string(data.train.size()) + " train / " +
      std::to_string(data.eval.size()) + " eval samples, " + std::to_string(cfg.train.epochs) +
      " epochs");
  const auto result = train_baseline<float>(cfg.model, data.train, data.eval, cfg.train);
  fs::create_directories(f.out);
  const std::string prefix = (fs::path(f.out) / "baseline").string();
  save_checkpoint(result.model, prefix);
  json summary{{"config", cfg},
               {"checkpoint", prefix},
               {"eval_accuracy", result.eval_accuracy},
               {"epoch_loss", result.epoch_loss},
               {"checksum", parameter_checksum(result.model)}};
  write_json(summary, (fs::path(f.out) / "baseline.json").string());
  if (f.json)
    std::cout << summary.dump(2) << '\n';
  else
    std::cout << "baseline eval top-1 " << result.eval_accuracy << " -> " << prefix << '\n';
  return kExitOk;
}

int cmd_quantize(const Flags& f) {
  const RunConfig cfg = resolve_config(f, "quantize");
  const auto baseline = require_baseline(cfg);
  check_shape(cfg, baseline);
  const auto data = load_datasets(cfg);
  PfcrHooks<float> hooks;
  hooks.on_unit = [](const UnitCurve& c) {
    log(c.stage + " level " + std::to_string(c.level) + " unit " + std::to_string(c.unit_index) +
        " final loss " + format_double(c.losses.back()));
  };
  RunReport partial;
  try {
    auto run = run_quantization(cfg, baseline, data, std::nullopt, hooks, &partial);
    fs::create_directories(f.out);
    save_checkpoint(run.model, (fs::path(f.out) / "quantized").string());
    write_run_artifacts(run.report, f.out);
    if (f.json)
      std::cout << json(run.report).dump(2) << '\n';
    else
      std::cout << "baseline top-1 " << run.report.baseline_accuracy << ", quantized top-1 "
                << run.report.quantized_accuracy << " -> " << f.out << '\n';
    return kExitOk;
  } catch (const NumericalError&) {
    write_run_artifacts(partial, f.out);
    throw;
  }
}

int cmd_evaluate(const Flags& f) {
  const RunConfig cfg = resolve_config(f, "evaluate");
  const auto model = require_baseline(cfg);
  check_shape(cfg, model);
  const auto data = load_datasets(cfg);
  const double acc = evaluate_top1(model, data.eval);
  if (f.json)
    std::cout << json{{"checkpoint", cfg.baseline_checkpoint}, {"eval_accuracy", acc},
                      {"samples", data.eval.size()}}
                     .dump(2)
              << '\n';
  else
    std::cout << "eval top-1 " << acc << " on " << data.eval.size() << " samples\n";
  return kExitOk;
}

int cmd_ablate(const Flags& f) {
  const RunConfig cfg = resolve_config(f, "ablate");
  const auto data = load_datasets(cfg);
  ModelState<float> baseline;
  if (!cfg.baseline_checkpoint.empty()) {
    baseline = require_baseline(cfg);
    check_shape(cfg, baseline);
  } else {
    log("no baseline checkpoint given; training one");
    baseline = train_baseline<float>(cfg.model, data.train, data.eval, cfg.train).model;
    fs::create_directories(f.out);
    save_checkpoint(baseline, (fs::path(f.out) / "baseline").string());
  }
  std::vector<Arm> arms;
  for (const auto& a : cfg.arms) arms.push_back(arm_from_string(a));
  const auto result = run_ablation_suite(cfg, baseline, data, arms, cfg.seeds, f.jobs,
                                         [&](const AblationRow& row) {
    log(std::string(to_string(row.arm)) + " seed " + std::to_string(row.seed) + ": " +
        (row.failed ? "FAILED " + row.error : "top-1 " + format_double(row.accuracy)));
    if (row.arm != Arm::fp_baseline)
      write_run_artifacts(row.report, (fs::path(f.out) / "runs" /
                                       (std::string(to_string(row.arm)) + "_seed" +
                                        std::to_string(row.seed)))
                                          .string());
  });
  fs::create_directories(f.out);
  write_ablation_csv(result, (fs::path(f.out) / "ablation.csv").string());
  json summary = json::array();
  for (const auto& s : result.summary)
    summary.push_back({{"arm", to_string(s.arm)},
                       {"median_accuracy", s.median_accuracy},
                       {"median_last_block_loss", s.median_last_block_loss},
                       {"ok", s.ok},
                       {"failed", s.failed}});
  json doc{{"config", cfg},
           {"baseline_accuracy", result.baseline_accuracy},
           {"baseline_checksum", result.baseline_checksum},
           {"summary", summary}};
  write_json(doc, (fs::path(f.out) / "ablation.json").string());
  if (f.json) {
    std::cout << doc.dump(2) << '\n';
  } else {
    for (const auto& s : result.summary)
      std::printf("%-12s median top-1 %.4f  last-block loss %.6g  (%zu ok, %zu failed)\n",
                  to_string(s.arm), s.median_accuracy, s.median_last_block_loss, s.ok, s.failed);
  }
  for (const auto& s : result.summary)
    if (s.failed > 0) return kExitNumerical;
  return kExitOk;
}

int cmd_inspect(const Flags& f, const std::string& path) {
  if (!checkpoint_exists(path)) throw ConfigError("checkpoint not found: " + path);
  const auto model = load_checkpoint(path);
  json doc{{"checkpoint", path},
           {"config", model.config},
           {"weight_quant_enabled", model.weight_quant_enabled},
           {"act_quant_enabled", model.act_quant_enabled}};
  json tensors = json::array();
  for (const auto& [name, t] : model.named_parameters())
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
  json quantizers = json::array();
  for (const auto& [name, q] : model.quantizers) {
    const auto s = q.params.scale.data();
    double lo = s[0], hi = s[0], sum = 0.0;
    for (float v : s) {
      lo = std::min(lo, double(v));
      hi = std::max(hi, double(v));
      sum += v;
    }
    quantizers.push_back({{"name", name},
                          {"role", to_string(q.spec.role)},
                          {"scheme", to_string(q.spec.scheme)},
                          {"bits", q.spec.bits},
                          {"channels", s.size()},
                          {"scale_min", lo},
                          {"scale_max", hi},
                          {"scale_mean", sum / double(s.size())}});
  }
  doc["tensors"] = tensors;
  doc["quantizers"] = quantizers;
  if (f.json) {
    std::cout << doc.dump(2) << '\n';
    return kExitOk;
  }
  std::printf("checkpoint %s\n", path.c_str());
  std::printf("weight quant %s, activation quant %s, %zu quantizers\n",
              model.weight_quant_enabled ? "on" : "off", model.act_quant_enabled ? "on" : "off",
              model.quantizers.size());
  for (const auto& t : tensors)
    std::printf("  %-28s %s\n", t["name"].get<std::string>().c_str(), t["shape"].dump().c_str());
  for (const auto& q : quantizers)
    std::printf("  %-28s %-12s %-8s %2d-bit  scale min %.4g max %.4g mean %.4g\n",
                q["name"].get<std::string>().c_str(), q["role"].get<std::string>().c_str(),
                q["scheme"].get<std::string>().c_str(), q["bits"].get<int>(),
                q["scale_min"].get<double>(), q["scale_max"].get<double>(),
                q["scale_mean"].get<double>());
  return kExitOk;
}

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "run configuration (JSON)");
  cmd->add_option("--checkpoint", f.checkpoint, "baseline or model checkpoint prefix");
  cmd->add_option("--bits", f.bits, "weight and activation bit width");
  cmd->add_option("--method", f.method, "pfcr-pos | pfcr | blockwise");
  cmd->add_flag("--one-stage", f.one_stage, "skip the activation-only stage");
  cmd->add_option("--iters", f.iters, "base iterations iter_0");
  cmd->add_option("--lr", f.lr, "base learning rate lr_0");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--jobs", f.jobs, "concurrent ablation runs")->check(CLI::PositiveNumber);
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_flag("--json", f.json, "machine-readable output");
}

}  // namespace

int main(int argc, char** argv) {
  blas::reexec_with_core_hint(argv);
  CLI::App app{"Progressive fine-to-coarse reconstruction for low-bit ViT post-training quantization"};
  app.require_subcommand(1);
  Flags f;
  std::string inspect_path;
  auto* train = app.add_subcommand("train-baseline", "train the full-precision toy ViT");
  auto* quantize = app.add_subcommand("quantize", "run reconstruction-based quantization");
  auto* evaluate = app.add_subcommand("evaluate", "top-1 accuracy of a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "run the ablation arms over several seeds");
  auto* inspect = app.add_subcommand("inspect", "summarise a checkpoint");
  for (auto* cmd : {train, quantize, evaluate, ablate, inspect}) add_common(cmd, f);
  inspect->add_option("path", inspect_path, "checkpoint prefix or manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(f);
    if (*quantize) return cmd_quantize(f);
    if (*evaluate) return cmd_evaluate(f);
    if (*ablate) return cmd_ablate(f);
    const std::string path = inspect_path.empty() ? f.checkpoint : inspect_path;
    if (path.empty()) throw ConfigError("inspect needs a checkpoint path");
    return cmd_inspect(f, path);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kExitNumerical;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
