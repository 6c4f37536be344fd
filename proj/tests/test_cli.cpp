#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "test_support.hpp"

using namespace pfcr;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

std::string cli_path() {
  const char* p = std::getenv("PFCR_CLI");
  return p ? p : "pfcr";
}

Result run(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static inline fs::path dir;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / ("pfcr_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    RunConfig cfg;
    cfg.model = pfcr::testing::tiny_config(2);
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
    cfg.arms = {"blockwise", "pfcr_pos"};
    std::ofstream(dir / "config.json") << json(cfg).dump(2);
    ASSERT_EQ(run("train-baseline --config " + (dir / "config.json").string() + " --out " +
                  (dir / "base").string())
                  .code,
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }

  static std::string config() { return " --config " + (dir / "config.json").string(); }
  static std::string baseline() { return " --checkpoint " + (dir / "base" / "baseline").string(); }
};

TEST_F(Cli, QuantizeWritesArtifactsAndEchoesOverrides) {
  const auto out = dir / "q";
  const auto r = run("quantize" + config() + baseline() + " --bits 3 --method blockwise --seed 5 --out " +
                     out.string());
  ASSERT_EQ(r.code, 0);
  for (const char* f : {"report.json", "config.json", "curves.csv", "quantized.manifest.json",
                        "quantized.weights.bin"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  std::ifstream in(out / "report.json");
  const auto report = json::parse(in).get<RunReport>();
  const auto cfg = report.config.get<RunConfig>();
  EXPECT_EQ(cfg.pos.method, Method::blockwise);
  EXPECT_FALSE(cfg.pos.stage1_enabled);
  EXPECT_EQ(cfg.pos.seed, 5u);
  EXPECT_EQ(cfg.overrides.at("method"), "blockwise");
  EXPECT_EQ(cfg.overrides.at("bits"), "3");
  EXPECT_EQ(cfg.overrides.at("command"), "quantize");
  EXPECT_EQ(report.stages.size(), 1u);
}

TEST_F(Cli, DefaultIterationsFollowBits) {
  const auto out = dir / "iters";
  // Without a config file iter_0 takes the bit-width default.
  std::ofstream(dir / "noiters.json") << [] {
    std::ifstream in(dir / "config.json");
    auto j = json::parse(in);
    j["pos"].erase("iter_0");
    j["quant"].erase("table");
    return j.dump();
  }();
  const auto r = run("quantize --config " + (dir / "noiters.json").string() + baseline() +
                     " --bits 6 --iters 1 --out " + out.string());
  ASSERT_EQ(r.code, 0);
  std::ifstream in(out / "config.json");
  EXPECT_EQ(json::parse(in).get<RunConfig>().pos.iter_0, 1);
  std::ifstream src(dir / "noiters.json");
  auto j = json::parse(src);
  j["pos"]["bits"] = 6;
  EXPECT_EQ(j.get<RunConfig>().pos.iter_0, 100);
}

TEST_F(Cli, ReplayFromEchoedConfig) {
  const auto a = dir / "ra", b = dir / "rb";
  ASSERT_EQ(run("quantize" + config() + baseline() + " --out " + a.string()).code, 0);
  ASSERT_EQ(run("quantize --config " + (a / "config.json").string() + " --out " + b.string()).code, 0);
  std::ifstream ca(a / "curves.csv"), cb(b / "curves.csv");
  std::stringstream sa, sb;
  sa << ca.rdbuf();
  sb << cb.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
  std::ifstream ra(a / "report.json"), rb(b / "report.json");
  EXPECT_EQ(json::parse(ra).at("quantized_accuracy"), json::parse(rb).at("quantized_accuracy"));
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  EXPECT_EQ(run("quantize" + config() + " --checkpoint " + (dir / "missing").string()).code, 2);
  EXPECT_EQ(run("quantize" + config()).code, 2);
  EXPECT_EQ(run("quantize --config " + (dir / "nope.json").string() + baseline()).code, 2);
  EXPECT_EQ(run("quantize" + config() + baseline() + " --method adaround").code, 2);
  EXPECT_EQ(run("quantize" + config() + baseline() + " --bits 1").code, 2);
  EXPECT_EQ(run("quantize --frobnicate").code, 2);
  EXPECT_EQ(run("inspect " + (dir / "missing").string()).code, 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run("evaluate --config " + (dir / "broken.json").string() + baseline()).code, 2);
}

TEST_F(Cli, MissingCheckpointNamesPath) {
  const std::string missing = (dir / "missing_ckpt").string();
  const std::string cmd = cli_path() + " quantize" + config() + " --checkpoint " + missing + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  ASSERT_NE(pipe, nullptr);
  std::string text;
  std::array<char, 1024> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) text.append(buf.data(), n);
  EXPECT_EQ(WEXITSTATUS(::pclose(pipe)), 2);
  EXPECT_NE(text.find(missing), std::string::npos) << text;
}

TEST_F(Cli, NumericalFailureExitsThree) {
  auto m = load_checkpoint((dir / "base" / "baseline").string());
  for (auto& v : m.blocks[1].fc1_w.values()) v = std::numeric_limits<float>::quiet_NaN();
  save_checkpoint(m, (dir / "nan").string());
  const auto out = dir / "nanrun";
  EXPECT_EQ(run("quantize" + config() + " --checkpoint " + (dir / "nan").string() + " --out " + out.string()).code, 3);
  EXPECT_TRUE(fs::exists(out / "report.json"));
}

TEST_F(Cli, InspectJson) {
  const auto fp = run("inspect --json " + (dir / "base" / "baseline").string());
  ASSERT_EQ(fp.code, 0);
  const auto jf = json::parse(fp.out);
  EXPECT_EQ(jf.at("quantizers").size(), 0u);

  const auto out = dir / "qi";
  ASSERT_EQ(run("quantize" + config() + baseline() + " --out " + out.string()).code, 0);
  const auto q = run("inspect --json " + (out / "quantized").string());
  ASSERT_EQ(q.code, 0);
  const auto jq = json::parse(q.out);
  ASSERT_GT(jq.at("quantizers").size(), 0u);
  for (const auto& e : jq.at("quantizers"))
    EXPECT_EQ(e.at("scheme") == "log2", e.at("name").get<std::string>().ends_with("attn.probs"));
  EXPECT_FALSE(jq.at("tensors").empty());

  const auto text = run("inspect " + (out / "quantized").string());
  EXPECT_EQ(text.code, 0);
  EXPECT_NE(text.out.find("log2"), std::string::npos);
}

TEST_F(Cli, EvaluatePrintsAccuracy) {
  const auto r = run("evaluate --json" + config() + baseline());
  ASSERT_EQ(r.code, 0);
  const auto j = json::parse(r.out);
  EXPECT_GE(j.at("eval_accuracy").get<double>(), 0.0);
  EXPECT_LE(j.at("eval_accuracy").get<double>(), 1.0);
}

TEST_F(Cli, AblateWritesTable) {
  const auto out = dir / "ab";
  const auto r = run("ablate" + config() + baseline() + " --jobs 2 --out " + out.string());
  ASSERT_EQ(r.code, 0);
  EXPECT_TRUE(fs::exists(out / "ablation.csv"));
  EXPECT_TRUE(fs::exists(out / "ablation.json"));
  EXPECT_TRUE(fs::exists(out / "runs" / "pfcr_pos_seed1" / "curves.csv"));
  std::ifstream csv(out / "ablation.csv");
  std::string line;
  std::size_t n = 0;
  while (std::getline(csv, line)) ++n;
  EXPECT_EQ(n, 1u + 4u + 2u);
}

}  // namespace
