#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "pfcr/checkpoint.hpp"
#include "pfcr/errors.hpp"
#include "pfcr/experiment.hpp"

namespace pfcr {

enum class Arm { blockwise, pfcr_only, pos_only, pfcr_pos, fp_baseline };

inline const char* to_string(Arm a) {
  switch (a) {
    case Arm::blockwise: return "blockwise";
    case Arm::pfcr_only: return "pfcr_only";
    case Arm::pos_only: return "pos_only";
    case Arm::pfcr_pos: return "pfcr_pos";
    default: return "fp_baseline";
  }
}

inline Arm arm_from_string(const std::string& s) {
  for (Arm a : {Arm::blockwise, Arm::pfcr_only, Arm::pos_only, Arm::pfcr_pos, Arm::fp_baseline})
    if (s == to_string(a)) return a;
  throw ConfigError("unknown ablation arm '" + s + "'");
}

// Arms differ from the base configuration only in the method and stage-1 flag.
inline POSConfig arm_pos_config(const POSConfig& base, Arm arm, std::uint64_t seed) {
  POSConfig c = base;
  c.seed = seed;
  c.method = (arm == Arm::pfcr_only || arm == Arm::pfcr_pos) ? Method::pfcr : Method::blockwise;
  c.stage1_enabled = arm == Arm::pos_only || arm == Arm::pfcr_pos;
  return c;
}

struct AblationRow {
  Arm arm = Arm::fp_baseline;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double last_block_loss = 0.0;
  bool failed = false;
  std::string error;
  RunReport report;
};

struct AblationSummary {
  Arm arm = Arm::fp_baseline;
  double median_accuracy = 0.0;
  double median_last_block_loss = 0.0;
  std::size_t ok = 0, failed = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // arm-major, seeds in the given order
  std::vector<AblationSummary> summary;
  double baseline_accuracy = 0.0;
  std::uint32_t baseline_checksum = 0;

  const AblationSummary& summary_of(Arm a) const {
    for (const auto& s : summary)
      if (s.arm == a) return s;
    throw ContractError(std::string("no summary for arm ") + to_string(a));
  }
  std::vector<const AblationRow*> rows_of(Arm a) const {
    std::vector<const AblationRow*> out;
    for (const auto& r : rows)
      if (r.arm == a) out.push_back(&r);
    return out;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Runs every (arm, seed) pair against one shared baseline. Each seed fixes the
// calibration/reconstruction split and minibatch order shared by all arms.
// Failures are recorded per row instead of aborting the suite. Up to `jobs`
// runs execute concurrently; `on_row` is called as rows finish.
inline AblationResult run_ablation_suite(
    const RunConfig& base, const ModelState<float>& baseline, const Datasets<float>& data,
    const std::vector<Arm>& arms, const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1,
    const std::function<void(const AblationRow&)>& on_row = {}) {
  if (arms.empty()) throw ConfigError("ablation: no arms selected");
  if (seeds.empty()) throw ConfigError("ablation: at least one seed is required");
  AblationResult result;
  result.baseline_checksum = parameter_checksum(baseline);
  result.baseline_accuracy = evaluate_top1(baseline, data.eval);

  for (Arm a : arms)
    for (auto s : seeds) result.rows.push_back({a, s, 0.0, 0.0, false, {}, {}});

  std::mutex sink;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < result.rows.size(); i = next++) {
      AblationRow& row = result.rows[i];
      if (row.arm == Arm::fp_baseline) {
        row.accuracy = result.baseline_accuracy;
      } else {
        RunConfig cfg = base;
        cfg.pos = arm_pos_config(base.pos, row.arm, row.seed);
        cfg.overrides["arm"] = to_string(row.arm);
        try {
          const ModelState<float> shared = baseline.clone();
          if (parameter_checksum(shared) != result.baseline_checksum)
            throw ContractError("ablation: baseline checksum mismatch");
          auto run = run_quantization(cfg, shared, data, result.baseline_accuracy, {}, &row.report);
          row.accuracy = run.report.quantized_accuracy;
          row.last_block_loss = run.report.block_losses.back();
        } catch (const std::exception& e) {
          row.failed = true;
          row.error = e.what();
        }
      }
      if (on_row) {
        std::lock_guard lock(sink);
        on_row(row);
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, result.rows.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (Arm a : arms) {
    AblationSummary s{a, 0.0, 0.0, 0, 0};
    std::vector<double> acc, loss;
    for (const auto* r : result.rows_of(a)) {
      if (r->failed) {
        ++s.failed;
        continue;
      }
      ++s.ok;
      acc.push_back(r->accuracy);
      loss.push_back(r->last_block_loss);
    }
    s.median_accuracy = median(acc);
    s.median_last_block_loss = median(loss);
    result.summary.push_back(s);
  }
  return result;
}

// ablation.csv: per-seed rows, then one median row per arm.
inline void write_ablation_csv(const AblationResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  auto quote = [](std::string s) {
    std::replace(s.begin(), s.end(), '"', '\'');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return '"' + s + '"';
  };
  out << "arm,seed,row,accuracy,last_block_loss,failed,error\n";
  for (const auto& r : result.rows)
    out << to_string(r.arm) << ',' << r.seed << ",seed," << format_double(r.accuracy) << ','
        << format_double(r.last_block_loss) << ',' << (r.failed ? 1 : 0) << ',' << quote(r.error)
        << '\n';
  for (const auto& s : result.summary)
    out << to_string(s.arm) << ",,median," << format_double(s.median_accuracy) << ','
        << format_double(s.median_last_block_loss) << ',' << s.failed << ",\n";
}

}  // namespace pfcr
