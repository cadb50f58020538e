#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "linearlens/cli.hpp"
#include "linearlens/error.hpp"
#include "linearlens/io.hpp"
#include "linearlens/report.hpp"
#include "temp_dir.hpp"

namespace linearlens {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using testing::TempDir;

struct CliRun {
  int code = 0;
  std::string out, err;
  json error() const { return json::parse(err.substr(err.rfind('{', err.find("\"error\"")))); }
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "linearlens");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) { ::setenv(name, value, 1); }
  ~ScopedEnv() { ::unsetenv(name_); }

 private:
  const char* name_;
};

const std::vector<std::string> kTiny{"--set", "steps=20",          "--set", "model.n_layers=2",
                                     "--set", "model.d_model=16",  "--set", "model.n_heads=2",
                                     "--set", "model.d_ff=32",     "--set", "corpus_stories=200",
                                     "--set", "eval_every=10",     "--set", "measure_windows=4",
                                     "--set", "seq_len=32"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

TEST(Cli, UsageErrorsExitTwo) {
  const CliRun none = cli({});
  EXPECT_EQ(none.code, kExitUsage);
  EXPECT_EQ(none.error()["error"]["code"], "usage");
  EXPECT_EQ(cli({"analyze", "--bogus", "x"}).code, kExitUsage);
  EXPECT_EQ(cli({"probe", "ck", "poetry"}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--set", "no_such_field=1", "--print-config"}).code, kExitUsage);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST(Cli, ReportOnEmptyDirExitsThree) {
  TempDir dir("cli_empty");
  const CliRun r = cli({"report", dir.path().string()});
  EXPECT_EQ(r.code, kExitData);
  const json e = r.error();
  EXPECT_EQ(e["exit_code"], 3);
  EXPECT_EQ(e["error"]["code"], "io");
  EXPECT_NE(e["error"]["message"].get<std::string>().find("no report bundles"), std::string::npos);
  EXPECT_EQ(cli({"report", (dir / "missing").string()}).code, kExitData);
}

TEST(Cli, ExportIsOutsideThisBuild) {
  const CliRun r = cli({"export", "--model", "m", "--corpus", "c.txt", "--out", "o"});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_EQ(r.error()["error"]["code"], "unsupported");
}

TEST(Cli, PrintConfigAppliesOverridesAndSeed) {
  const CliRun r = cli({"train", "--set", "regularizer.kind=cosine", "--set", "regularizer.lambda=0.5", "--print-config"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const json c = json::parse(r.out);
  EXPECT_EQ(c["regularizer"]["kind"], "cosine");
  EXPECT_EQ(c["regularizer"]["lambda"], 0.5);
  EXPECT_EQ(c["seed"], 0);
  {
    ScopedEnv env("LINEARLENS_SEED", "7");
    EXPECT_EQ(json::parse(cli({"train", "--print-config"}).out)["seed"], 7);
    EXPECT_EQ(json::parse(cli({"train", "--print-config", "--seed", "9"}).out)["seed"], 9);
  }
  {
    ScopedEnv env("LINEARLENS_SEED", "x");
    EXPECT_EQ(cli({"train", "--print-config"}).code, kExitUsage);
  }
}

TEST(Cli, MissingOrBrokenConfigIsADataError) {
  TempDir dir("cli_cfg");
  EXPECT_EQ(cli({"train", (dir / "none.json").string()}).code, kExitData);
  write_file_atomic(dir / "bad.json", "{ nope");
  EXPECT_EQ(cli({"train", (dir / "bad.json").string()}).code, kExitData);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli_pipeline");
    const fs::path cfg = *dir_ / "cosine.json";
    write_file_atomic(cfg, R"({"regularizer": {"kind": "cosine", "lambda": 0.5}})");
    const CliRun r = cli(cat({"train", cfg.string(), "-o", (*dir_ / "train").string()}, kTiny));
    ASSERT_EQ(r.code, kExitOk) << r.err;
    ASSERT_EQ(cli({"dump", (*dir_ / "train/checkpoint").string(), "-o", (*dir_ / "dump").string()}).code, kExitOk);
  }
  static void TearDownTestSuite() { delete dir_; }
  static fs::path path(const std::string& s) { return *dir_ / s; }

  static TempDir* dir_;
};
TempDir* CliPipeline::dir_ = nullptr;

TEST_F(CliPipeline, TrainWritesCheckpointAndLossCurve) {
  EXPECT_TRUE(fs::exists(path("train/checkpoint/checkpoint.json")));
  const std::string loss = read_file(path("train/loss.csv"));
  EXPECT_EQ(loss.substr(0, loss.find('\n')), "step,lm,reg,total");
  EXPECT_EQ(std::count(loss.begin(), loss.end(), '\n'), 21);
  const json meta = json::parse(read_file(path("train/metadata.json")));
  EXPECT_EQ(meta["command"], "train");
  EXPECT_EQ(meta["config"]["regularizer"]["kind"], "cosine");
  EXPECT_EQ(meta["config_hash"], config_hash(meta["config"]));
  EXPECT_TRUE(fs::exists(path("train/profile_step10.csv")));
  EXPECT_TRUE(fs::exists(path("train/profile_step20.csv")));
}

TEST_F(CliPipeline, RerunNeedsForce) {
  const CliRun r = cli(cat({"train", "-o", path("train").string()}, kTiny));
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.error()["error"]["message"].get<std::string>().find("--force"), std::string::npos);
}

TEST_F(CliPipeline, AnalyzeAndProfileDump) {
  ASSERT_EQ(cli({"analyze", path("dump/dump").string(), "-o", path("an").string()}).code, kExitOk);
  const std::string csv = read_file(path("an/linearity.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const json summary = json::parse(read_file(path("an/summary.json")));
  EXPECT_EQ(summary["n_layers"], 2);
  EXPECT_GT(summary["mean_score_resid"].get<double>(), 0.5);

  ASSERT_EQ(cli({"profile", path("dump/dump").string(), "-o", path("pr").string(), "--serial"}).code, kExitOk);
  EXPECT_EQ(read_file(path("pr/linearity.csv")), csv);
  EXPECT_TRUE(fs::exists(path("pr/l2_errors.csv")));
}

TEST_F(CliPipeline, ForcedRerunIsByteIdentical) {
  ScopedEnv epoch("SOURCE_DATE_EPOCH", "1700000000");
  ASSERT_EQ(cli({"analyze", path("dump/dump").string(), "-o", path("id").string()}).code, kExitOk);
  const std::string first = read_file(path("id/metadata.json")) + read_file(path("id/linearity.csv"));
  ASSERT_EQ(cli({"analyze", path("dump/dump").string(), "-o", path("id").string(), "--force"}).code, kExitOk);
  EXPECT_EQ(read_file(path("id/metadata.json")) + read_file(path("id/linearity.csv")), first);
  EXPECT_NE(first.find("2023-11-14T22:13:20Z"), std::string::npos);
}

TEST_F(CliPipeline, CorruptDumpIsRejectedWithLayer) {
  fs::copy(path("dump/dump"), path("bad"), fs::copy_options::recursive);
  {
    std::fstream f(path("bad/layer_001.bin"), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('\x7f');
  }
  const CliRun r = cli({"analyze", path("bad").string(), "-o", path("bad_out").string()});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_EQ(r.error()["error"]["code"], "checksum");
  EXPECT_NE(r.error()["error"]["message"].get<std::string>().find("layer 1"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("bad_out/metadata.json")));
}

TEST_F(CliPipeline, ProbePruneDistillReport) {
  const std::string ck = path("train/checkpoint").string();
  ASSERT_EQ(cli({"probe", ck, "marker", "--examples", "60", "-o", path("probe").string()}).code, kExitOk);
  const std::string probe = read_file(path("probe/probe.csv"));
  EXPECT_EQ(probe.substr(0, probe.find('\n')), "layer,accuracy,n_train,n_test,seed");
  EXPECT_EQ(std::count(probe.begin(), probe.end(), '\n'), 4);

  EXPECT_EQ(cli({"prune", ck, "-k", "2", "-o", path("p2").string()}).code, kExitUsage);
  const CliRun pr = cli({"prune", ck, "-k", "1", "--mode", "linear_replace", "--calibration-tokens", "512",
                      "--probe-examples", "60", "-o", path("prune").string()});
  ASSERT_EQ(pr.code, kExitOk) << pr.err;
  const json ckj = json::parse(read_file(path("prune/student/checkpoint.json")));
  int replacements = 0;
  for (const auto& b : ckj["blocks"]) replacements += b["replacement"].get<bool>();
  EXPECT_EQ(replacements, 1);

  const CliRun di = cli({"distill", ck, path("prune/student").string(), "--steps", "5", "-o", path("distill").string()});
  ASSERT_EQ(di.code, kExitOk) << di.err;
  EXPECT_TRUE(fs::exists(path("distill/student/checkpoint.json")));
  EXPECT_TRUE(fs::exists(path("distill/distill_loss.csv")));

  const CliRun rep = cli({"report", dir_->path().string()});
  ASSERT_EQ(rep.code, kExitOk) << rep.err;
  const std::string runs = read_file(path("report/runs.csv"));
  for (const char* cmd : {",train,", ",dump,", ",probe,", ",prune,", ",distill,"})
    EXPECT_NE(runs.find(cmd), std::string::npos) << cmd;
  // A second report does not index its own output.
  ASSERT_EQ(cli({"report", dir_->path().string(), "--force"}).code, kExitOk);
  EXPECT_EQ(read_file(path("report/runs.csv")), runs);
}

TEST(Report, ConfigHashIgnoresKeyOrder) {
  const json a = json::parse(R"({"b": 1, "a": {"y": 2, "x": [1, 2]}})");
  const json b = json::parse(R"({"a": {"x": [1, 2], "y": 2}, "b": 1})");
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_NE(config_hash(a), config_hash(json::parse(R"({"b": 2, "a": {"y": 2, "x": [1, 2]}})")));
  EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Report, TimestampHonorsSourceDateEpoch) {
  ScopedEnv epoch("SOURCE_DATE_EPOCH", "0");
  EXPECT_EQ(report_timestamp(), "1970-01-01T00:00:00Z");
}

TEST(Report, BundleRoundTripAndTamper) {
  TempDir dir("bundle");
  ReportBundle b;
  b.command = "analyze";
  b.config = {{"x", 1}};
  b.seed = 3;
  b.timestamp = "t";
  b.tables["a.csv"] = "h\n1\n";
  write_bundle(b, dir / "r", false);
  const ReportBundle back = read_bundle(dir / "r");
  EXPECT_EQ(back.tables, b.tables);
  EXPECT_EQ(back.seed, 3u);
  EXPECT_THROW(write_bundle(b, dir / "r", false), Error);
  write_file_atomic(dir / "r/a.csv", "h\n2\n");
  try {
    read_bundle(dir / "r");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kChecksum);
  }
}

TEST(Report, NonFiniteCellsAreRefused) {
  EXPECT_NO_THROW(require_finite_csv("t", "a,b\n1,x\n2.5e-3,\n"));
  for (const char* bad : {"a\nnan\n", "a\n-inf\n", "a,b\n1,1e999\n", "a\nNaN\n"}) {
    try {
      require_finite_csv("t", bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kNumeric);
    }
  }
  TempDir dir("bundle_nan");
  ReportBundle b;
  b.tables["x.csv"] = "v\nnan\n";
  EXPECT_THROW(write_bundle(b, dir / "r", false), Error);
  EXPECT_FALSE(fs::exists(dir / "r/metadata.json"));
}

}  // namespace
}  // namespace linearlens
