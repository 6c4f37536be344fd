#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "test_support.hpp"

using namespace pfcr;
using pfcr::testing::bit_equal;
using pfcr::testing::random_images;
using pfcr::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("pfcr_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back((unsigned char)(v >> s));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::vector<unsigned char> b;
  put_be32(b, 0x00000803);
  put_be32(b, n);
  put_be32(b, rows);
  put_be32(b, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) b.push_back((unsigned char)(i % 256));
  return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t n) {
  std::vector<unsigned char> b;
  put_be32(b, 0x00000801);
  put_be32(b, n);
  for (std::uint32_t i = 0; i < n; ++i) b.push_back((unsigned char)(i % 10));
  return b;
}

TEST(Synthetic, DeterministicAndBalanced) {
  const auto a = make_synthetic<float>(10, 1000, 32, 5);
  const auto b = make_synthetic<float>(10, 1000, 32, 5);
  const auto c = make_synthetic<float>(10, 1000, 32, 6);
  EXPECT_TRUE(bit_equal(a.images, b.images));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(bit_equal(a.images, c.images));
  std::vector<int> counts(10);
  for (int y : a.labels) {
    ASSERT_GE(y, 0);
    ASSERT_LT(y, 10);
    ++counts[std::size_t(y)];
  }
  for (int n : counts) {
    EXPECT_GE(n, 80);
    EXPECT_LE(n, 120);
  }
  EXPECT_EQ(a.images.shape(), (Shape{1000, 3, 32, 32}));
}

TEST(Synthetic, DistractorsChangeImages) {
  SyntheticOptions opt;
  opt.distractors = 2;
  opt.distractor_amp = 4.0;
  const auto plain = make_synthetic<float>(10, 50, 32, 5);
  const auto hard = make_synthetic<float>(10, 50, 32, 5, opt);
  EXPECT_EQ(plain.images.shape(), hard.images.shape());
  EXPECT_FALSE(bit_equal(plain.images, hard.images));
  EXPECT_TRUE(bit_equal(hard.images, make_synthetic<float>(10, 50, 32, 5, opt).images));
  EXPECT_THROW(make_synthetic<float>(0, 5, 32, 1), ContractError);
}

TEST(Idx, ParsesAndPads) {
  const auto dir = scratch_dir("idx");
  write_bytes(dir / "img", idx_images(10, 28, 28));
  write_bytes(dir / "lab", idx_labels(10));
  const auto ds = load_idx_images<float>((dir / "img").string(), (dir / "lab").string(), 32, 1);
  EXPECT_EQ(ds.images.shape(), (Shape{10, 1, 32, 32}));
  EXPECT_EQ(ds.labels[3], 3);
  // Two-pixel border from the centre padding; first pixel of the 28x28 grid is 0.
  EXPECT_EQ(ds.images[0], 0.0f);
  EXPECT_EQ(ds.images[2 * 32 + 3], 1.0f / 255.0f);
  for (float v : ds.images.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  fs::remove_all(dir);
}

TEST(Idx, Errors) {
  const auto dir = scratch_dir("idx_err");
  auto img = idx_images(10, 28, 28);
  write_bytes(dir / "lab", idx_labels(10));

  auto bad = img;
  bad[3] = 0x01;
  write_bytes(dir / "bad", bad);
  try {
    load_idx_images<float>((dir / "bad").string(), (dir / "lab").string(), 32);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 0"), std::string::npos) << e.what();
  }

  auto cut = img;
  cut.resize(cut.size() - 100);
  write_bytes(dir / "cut", cut);
  try {
    load_idx_images<float>((dir / "cut").string(), (dir / "lab").string(), 32);
    FAIL();
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(16 + 10 * 28 * 28)), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(cut.size())), std::string::npos) << msg;
  }

  write_bytes(dir / "img", img);
  write_bytes(dir / "lab9", idx_labels(9));
  EXPECT_THROW(load_idx_images<float>((dir / "img").string(), (dir / "lab9").string(), 32), ParseError);
  EXPECT_THROW(load_idx_images<float>((dir / "missing").string(), (dir / "lab").string(), 32), ParseError);
  fs::remove_all(dir);
}

TEST(Calibration, DisjointAndDeterministic) {
  const auto data = make_synthetic<float>(10, 300, 32, 3);
  const auto a = sample_calibration(data, 64, 100, 11);
  const auto b = sample_calibration(data, 64, 100, 11);
  const auto c = sample_calibration(data, 64, 100, 12);
  EXPECT_EQ(a.calib_idx, b.calib_idx);
  EXPECT_EQ(a.recon_idx, b.recon_idx);
  EXPECT_NE(a.calib_idx, c.calib_idx);
  std::set<std::size_t> all(a.calib_idx.begin(), a.calib_idx.end());
  all.insert(a.recon_idx.begin(), a.recon_idx.end());
  EXPECT_EQ(all.size(), 164u);
  EXPECT_EQ(a.recon.size(), 100u);
  EXPECT_THROW(sample_calibration(data, 200, 101, 1), ContractError);
  EXPECT_EQ(default_recon_count(8000), 1024u);
  EXPECT_EQ(default_recon_count(4000), 1000u);
}

TEST(Evaluate, ConstantPredictorAndScaleInvariance) {
  const auto c = tiny_config(1);
  auto m = init_model<float>(c, 3);
  for (auto& v : m.head_w.values()) v = 0.0f;
  m.head_b.values()[2] = 1.0f;
  Dataset<float> ds{random_images<float>(c, 20, 4), std::vector<int>(20, 2), "eval", 3};
  EXPECT_EQ(evaluate_top1(m, ds), 1.0);
  // Ties go to the lowest index.
  m.head_b.values()[2] = 0.0f;
  EXPECT_EQ(evaluate_top1(m, ds), 0.0);
  ds.labels.assign(20, 0);
  EXPECT_EQ(evaluate_top1(m, ds), 1.0);

  auto r = init_model<float>(c, 5);
  ds.labels = make_synthetic<float>(3, 20, 8, 1).labels;
  const double before = evaluate_top1(r, ds);
  for (auto& v : r.head_w.values()) v *= 3.0f;
  for (auto& v : r.head_b.values()) v *= 3.0f;
  EXPECT_EQ(evaluate_top1(r, ds), before);
}

TEST(Train, ZeroEpochsIsChanceAndDeterministic) {
  ViTConfig c;
  const auto data = make_synthetic<float>(10, 1000, 32, 8);
  TrainOptions opt;
  opt.epochs = 0;
  const auto r = train_baseline<float>(c, data, data, opt);
  EXPECT_NEAR(r.eval_accuracy, 0.10, 0.05);

  const auto small_train = make_synthetic<float>(3, 64, 8, 9, {2});
  auto tc = tiny_config(1);
  opt.epochs = 2;
  opt.batch_size = 16;
  const auto a = train_baseline<float>(tc, small_train, small_train, opt);
  const auto b = train_baseline<float>(tc, small_train, small_train, opt);
  EXPECT_EQ(parameter_checksum(a.model), parameter_checksum(b.model));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
}

TEST(Train, DivergenceIsReported) {
  auto tc = tiny_config(1);
  auto data = make_synthetic<float>(3, 32, 8, 9, {2});
  data.images.values()[5] = std::numeric_limits<float>::quiet_NaN();
  TrainOptions opt;
  opt.epochs = 1;
  EXPECT_THROW(train_baseline<float>(tc, data, data, opt), NumericalError);
}

ModelState<float> quantized_tiny() {
  const auto c = tiny_config(2);
  auto m = init_model<float>(c, 50);
  attach_quantizers(m, 3, 3, random_images<float>(c, 8, 51));
  m.weight_quant_enabled = m.act_quant_enabled = true;
  return m;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = scratch_dir("ckpt");
  const auto m = quantized_tiny();
  save_checkpoint(m, (dir / "q").string());
  EXPECT_TRUE(checkpoint_exists((dir / "q").string()));
  const auto back = load_checkpoint((dir / "q.manifest.json").string());
  EXPECT_EQ(back.config, m.config);
  EXPECT_TRUE(back.weight_quant_enabled && back.act_quant_enabled);
  const auto pa = m.named_parameters(), pb = back.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bit_equal(pa[i].second, pb[i].second)) << pa[i].first;
  ASSERT_EQ(back.quantizers.size(), m.quantizers.size());
  for (const auto& [name, q] : m.quantizers) {
    const auto& r = back.quantizers.at(name);
    EXPECT_TRUE(bit_equal(q.params.scale, r.params.scale)) << name;
    EXPECT_EQ(q.params.zero_point, r.params.zero_point);
    EXPECT_EQ(q.spec.scheme, r.spec.scheme);
    EXPECT_EQ(q.spec.role, r.spec.role);
    EXPECT_EQ(q.params.bits, r.params.bits);
    EXPECT_EQ(q.params.channel_axis, r.params.channel_axis);
  }
  const auto images = random_images<float>(m.config, 4, 52);
  EXPECT_TRUE(bit_equal(model_forward(images, m), model_forward(images, back)));
  fs::remove_all(dir);
}

TEST(Checkpoint, ManifestListsQuantizers) {
  const auto dir = scratch_dir("ckpt_manifest");
  const auto m = quantized_tiny();
  save_checkpoint(m, (dir / "q").string());
  std::ifstream in(dir / "q.manifest.json");
  const auto j = json::parse(in);
  EXPECT_EQ(j.at("magic"), kCheckpointMagic);
  EXPECT_EQ(j.at("quantizers").size(), m.quantizers.size());
  for (const auto& q : j.at("quantizers")) {
    EXPECT_TRUE(q.contains("scale") && q.contains("zero_point") && q.contains("bits"));
    EXPECT_EQ(q.at("scheme") == "log2", q.at("name").get<std::string>().ends_with("attn.probs"));
  }
  for (const auto& t : j.at("tensors")) EXPECT_EQ(t.at("dtype"), "f32");
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto dir = scratch_dir("ckpt_bad");
  save_checkpoint(quantized_tiny(), (dir / "q").string());
  {
    std::fstream f(dir / "q.weights.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(100);
    char byte;
    f.read(&byte, 1);
    byte = char(byte ^ 0x5a);
    f.seekp(100);
    f.write(&byte, 1);
  }
  EXPECT_THROW(load_checkpoint((dir / "q").string()), ChecksumError);

  fs::resize_file(dir / "q.weights.bin", 64);
  EXPECT_THROW(load_checkpoint((dir / "q").string()), ChecksumError);

  save_checkpoint(quantized_tiny(), (dir / "v").string());
  std::ifstream in(dir / "v.manifest.json");
  auto j = json::parse(in);
  in.close();
  j["version"] = 99;
  std::ofstream(dir / "v.manifest.json") << j.dump();
  EXPECT_THROW(load_checkpoint((dir / "v").string()), ParseError);
  j["version"] = kCheckpointVersion;
  j["magic"] = "something-else";
  std::ofstream(dir / "v.manifest.json") << j.dump();
  EXPECT_THROW(load_checkpoint((dir / "v").string()), ParseError);
  EXPECT_THROW(load_checkpoint((dir / "absent").string()), ParseError);
  fs::remove_all(dir);
}

RunConfig tiny_run_config() {
  RunConfig cfg;
  cfg.model = tiny_config(2);
  cfg.model.num_classes = 3;
  cfg.data.n_train = 96;
  cfg.data.n_eval = 32;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 16;
  cfg.pos.iter_0 = 2;
  cfg.pos.lr_0 = 1e-3;
  cfg.pos.batch_size = 8;
  cfg.n_calib = 8;
  cfg.n_recon = 16;
  cfg.seeds = {0, 1};
  return cfg;
}

TEST(RunConfigJson, RoundTrip) {
  auto cfg = tiny_run_config();
  cfg.pos.weight_bits = 4;
  cfg.overrides["bits"] = "3";
  cfg.data.synthetic.distractors = 2;
  cfg.data.synthetic.distractor_amp = 1.5;
  cfg.data.synthetic.noise = 0.2;
  cfg.pos.recalibrate_activations = true;
  const json j = cfg;
  EXPECT_EQ(j.get<RunConfig>(), cfg);
  EXPECT_TRUE(j.at("quant").contains("table"));
}

TEST(RunConfigJson, Errors) {
  json j = tiny_run_config();
  j["pos"]["mystery"] = 1;
  EXPECT_THROW(j.get<RunConfig>(), ConfigError);
  j = tiny_run_config();
  j["pos"]["method"] = "adaround";
  EXPECT_THROW(j.get<RunConfig>(), ConfigError);
  j = tiny_run_config();
  j["quant"]["table"][0]["bits"] = 8;
  EXPECT_THROW(j.get<RunConfig>(), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST(RunConfigJson, IterationDefaultFollowsBits) {
  json j = tiny_run_config();
  j["pos"].erase("iter_0");
  j["quant"].erase("table");
  j["pos"]["bits"] = 4;
  EXPECT_EQ(j.get<RunConfig>().pos.iter_0, 300);
  j["pos"]["bits"] = 3;
  EXPECT_EQ(j.get<RunConfig>().pos.iter_0, 800);
}

TEST(Report, RoundTripAndArtifacts) {
  const auto cfg = tiny_run_config();
  const auto data = load_datasets(cfg);
  const auto base = train_baseline<float>(cfg.model, data.train, data.eval, cfg.train).model;
  const auto run = run_quantization(cfg, base, data);
  const auto& r = run.report;
  EXPECT_EQ(r.stages.size(), 2u);
  EXPECT_EQ(r.block_losses.size(), 2u);
  EXPECT_EQ(r.config.get<RunConfig>(), cfg);
  const json j = r;
  EXPECT_EQ(json::parse(j.dump()).get<RunReport>(), r);

  const auto dir = scratch_dir("report");
  write_run_artifacts(r, dir.string());
  std::ifstream in(dir / "report.json");
  EXPECT_EQ(json::parse(in).get<RunReport>(), r);
  std::ifstream csv(dir / "curves.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "stage,level,unit,iteration,loss");
  std::size_t rows = 0, finals = 0;
  while (std::getline(csv, line)) {
    ++rows;
    finals += line.starts_with("final,");
  }
  std::size_t expected = 0;
  for (const auto& s : r.stages)
    for (const auto& c : s.curves) expected += c.losses.size();
  EXPECT_EQ(rows, expected + 2);
  EXPECT_EQ(finals, 2u);
  fs::remove_all(dir);
}

TEST(Report, ReplayIsBitExact) {
  const auto cfg = tiny_run_config();
  const auto data = load_datasets(cfg);
  const auto base = train_baseline<float>(cfg.model, data.train, data.eval, cfg.train).model;
  auto a = run_quantization(cfg, base, data);
  const auto echoed = a.report.config.get<RunConfig>();
  auto b = run_quantization(echoed, base, load_datasets(echoed));
  a.report.seconds = b.report.seconds = 0;
  for (auto* r : {&a.report, &b.report})
    for (auto& s : r->stages) s.seconds = 0;
  EXPECT_EQ(a.report, b.report);
  EXPECT_EQ(pfcr::testing::full_checksum(a.model), pfcr::testing::full_checksum(b.model));
}

TEST(Ablation, ArmConfigsDifferOnlyInFlags) {
  POSConfig base;
  base.iter_0 = 17;
  for (Arm a : {Arm::blockwise, Arm::pfcr_only, Arm::pos_only, Arm::pfcr_pos}) {
    auto c = arm_pos_config(base, a, 4);
    EXPECT_EQ(c.seed, 4u);
    c.method = base.method;
    c.stage1_enabled = base.stage1_enabled;
    c.seed = base.seed;
    EXPECT_EQ(c, base) << to_string(a);
  }
  EXPECT_EQ(arm_pos_config(base, Arm::pfcr_pos, 0).method, Method::pfcr);
  EXPECT_TRUE(arm_pos_config(base, Arm::pfcr_pos, 0).stage1_enabled);
  EXPECT_EQ(arm_pos_config(base, Arm::blockwise, 0).method, Method::blockwise);
  EXPECT_FALSE(arm_pos_config(base, Arm::blockwise, 0).stage1_enabled);
  EXPECT_THROW(arm_from_string("nope"), ConfigError);
}

TEST(Ablation, RowsSummaryAndCsv) {
  const auto cfg = tiny_run_config();
  const auto data = load_datasets(cfg);
  const auto base = train_baseline<float>(cfg.model, data.train, data.eval, cfg.train).model;
  const std::vector<Arm> arms{Arm::blockwise, Arm::pfcr_pos, Arm::fp_baseline};
  std::size_t callbacks = 0;
  const auto res = run_ablation_suite(cfg, base, data, arms, {0, 1}, 2,
                                      [&](const AblationRow&) { ++callbacks; });
  EXPECT_EQ(res.rows.size(), 6u);
  EXPECT_EQ(callbacks, 6u);
  EXPECT_EQ(res.summary.size(), 3u);
  for (const auto& r : res.rows) {
    EXPECT_FALSE(r.failed) << r.error;
    if (r.arm != Arm::fp_baseline) {
      EXPECT_EQ(r.report.baseline_checksum, res.baseline_checksum);
    }
  }
  EXPECT_EQ(res.summary_of(Arm::fp_baseline).median_accuracy, res.baseline_accuracy);
  // Paired comparison: both arms of a seed see the same calibration split.
  const auto pb = res.rows_of(Arm::blockwise), pp = res.rows_of(Arm::pfcr_pos);
  for (std::size_t i = 0; i < pb.size(); ++i) {
    auto cb = pb[i]->report.config.get<RunConfig>(), cp = pp[i]->report.config.get<RunConfig>();
    EXPECT_EQ(cb.pos.seed, cp.pos.seed);
    cb.pos.method = cp.pos.method;
    cb.pos.stage1_enabled = cp.pos.stage1_enabled;
    cb.overrides = cp.overrides;
    EXPECT_EQ(cb, cp);
  }
  // Threaded and sequential runs agree.
  const auto seq = run_ablation_suite(cfg, base, data, arms, {0, 1}, 1);
  for (std::size_t i = 0; i < seq.rows.size(); ++i) EXPECT_EQ(seq.rows[i].accuracy, res.rows[i].accuracy);

  const auto dir = scratch_dir("ablation");
  write_ablation_csv(res, (dir / "ablation.csv").string());
  std::ifstream csv(dir / "ablation.csv");
  std::string line;
  std::size_t n = 0, medians = 0;
  while (std::getline(csv, line)) {
    ++n;
    medians += line.find(",median,") != std::string::npos;
  }
  EXPECT_EQ(n, 1u + 6u + 3u);
  EXPECT_EQ(medians, 3u);
  fs::remove_all(dir);
}

TEST(Ablation, FailuresAreRecordedPerRow) {
  auto cfg = tiny_run_config();
  cfg.n_recon = 10000;  // more than the dataset holds
  const auto data = load_datasets(cfg);
  const auto base = init_model<float>(cfg.model, 1);
  const auto res = run_ablation_suite(cfg, base, data, {Arm::pfcr_only, Arm::fp_baseline}, {0}, 1);
  EXPECT_TRUE(res.rows[0].failed);
  EXPECT_FALSE(res.rows[0].error.empty());
  EXPECT_FALSE(res.rows[1].failed);
  EXPECT_EQ(res.summary_of(Arm::pfcr_only).failed, 1u);
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
}

}  // namespace
