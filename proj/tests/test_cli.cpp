#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const std::string kCli = CSMOE_CLI_PATH;
const std::string kConfigs = CSMOE_SOURCE_DIR "/configs/";

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / ("csmoe_cli_" + std::to_string(::getpid()) + ".log");
  const int status = std::system((kCli + " " + args + " > " + log.string() + " 2>&1").c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream is(log);
  std::stringstream ss;
  ss << is.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("csmoe_cli_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(d);
  return d;
}

// One tiny training run shared by the eval and metrics tests.
const fs::path& trained_run() {
  static const fs::path dir = [] {
    auto d = scratch("run");
    auto r = run("train --config " + kConfigs + "tiny.json --out " + d.string());
    EXPECT_EQ(r.code, 0) << r.out;
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, NoSubcommandIsUserError) { EXPECT_EQ(run("").code, 2); }

TEST(Cli, UnknownFlagIsUserError) { EXPECT_EQ(run("train --config x.json --bogus").code, 2); }

TEST(Cli, HelpIsOk) { EXPECT_EQ(run("--help").code, 0); }

TEST(Cli, MissingConfigIsUserError) {
  auto r = run("train --config /nonexistent/config.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("cannot open"), std::string::npos) << r.out;
}

TEST(Cli, UnknownConfigKeyIsUserError) {
  auto d = scratch("badcfg");
  fs::create_directories(d);
  std::ofstream(d / "c.json") << R"({"train": {"stepz": 3}})";
  EXPECT_EQ(run("train --config " + (d / "c.json").string() + " --out " + (d / "out").string()).code, 2);
}

TEST(Cli, TrainWritesArtifacts) {
  const auto& d = trained_run();
  for (const char* f : {"config.json", "metrics.csv", "schedule.txt", "final.ckpt", "valid.bin", "valid.manifest"})
    EXPECT_TRUE(fs::exists(d / f)) << f;
  EXPECT_EQ(slurp(d / "metrics.csv").rfind("# config_hash=", 0), 0u);
}

TEST(Cli, BaselineRunNeverCompetes) {
  auto d = scratch("base");
  auto r = run("train --baseline --config " + kConfigs + "tiny.json --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("baseline run"), std::string::npos);
  std::ifstream is(d / "metrics.csv");
  std::string line;
  std::getline(is, line);
  std::getline(is, line);
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "0") << line;
  }
  EXPECT_GT(rows, 0u);
}

TEST(Cli, EvalIsRepeatableAndFeedsMetrics) {
  const auto& d = trained_run();
  const auto ck = (d / "final.ckpt").string(), data = (d / "valid").string();
  auto e1 = scratch("eval1"), e2 = scratch("eval2");
  ASSERT_EQ(run("eval --checkpoint " + ck + " --data " + data + " --routing router --out " + e1.string()).code, 0);
  ASSERT_EQ(run("eval --checkpoint " + ck + " --data " + data + " --routing competition --out " + e1.string()).code, 0);
  ASSERT_EQ(run("eval --checkpoint " + ck + " --data " + data + " --routing router --out " + e2.string()).code, 0);
  EXPECT_EQ(slurp(e1 / "eval_router.csv"), slurp(e2 / "eval_router.csv"));
  EXPECT_EQ(slurp(e1 / "assignments_router.csv"), slurp(e2 / "assignments_router.csv"));

  const auto a = (e1 / "assignments_router.csv").string(), b = (e1 / "assignments_competition.csv").string();
  auto ecr = run("metrics --kind ecr --a " + a + " --b " + a);
  ASSERT_EQ(ecr.code, 0) << ecr.out;
  EXPECT_NE(ecr.out.find("ecr,-1,40,0\n"), std::string::npos) << ecr.out;
  auto same = run("metrics --kind level-learning --a " + a + " --b " + a);
  EXPECT_NE(same.out.find("level_learning,-1,40,1\n"), std::string::npos) << same.out;
  auto ll = run("metrics --kind level-learning --a " + a + " --b " + b);
  EXPECT_EQ(ll.code, 0);
  EXPECT_NE(ll.out.find("level_learning,-1,40,"), std::string::npos) << ll.out;
}

TEST(Cli, RankShiftEval) {
  const auto& d = trained_run();
  auto e = scratch("eval_rs");
  ASSERT_EQ(run("eval --checkpoint " + (d / "final.ckpt").string() + " --routing rank-shift --out " + e.string()).code, 0);
  EXPECT_TRUE(fs::exists(e / "assignments_rank_shift.csv"));
}

TEST(Cli, EvalMissingCheckpointIsUserError) {
  EXPECT_EQ(run("eval --checkpoint /nonexistent.ckpt --out " + scratch("nock").string()).code, 2);
}

TEST(Cli, MetricsOnForeignFileIsUserError) {
  auto d = scratch("foreign");
  fs::create_directories(d);
  std::ofstream(d / "x.csv") << "token,layer\n";
  EXPECT_EQ(run("metrics --kind selection-entropy --a " + (d / "x.csv").string()).code, 2);
}

TEST(Cli, RatelabDryRunPrintsPlan) {
  auto r = run("ratelab --dry-run --config " + kConfigs + "ratelab.json");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("plan linear_true2_fit2"), std::string::npos);
  EXPECT_NE(r.out.find("plan linear_true2_fit3"), std::string::npos);
}

TEST(Cli, RatelabSmokeWritesSummary) {
  auto d = scratch("rates");
  auto r = run("ratelab --config " + kConfigs + "ratelab_smoke.json --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(d / "rates_linear_true2_fit2.csv"));
  const auto summary = slurp(d / "summary.csv");
  EXPECT_NE(summary.find("linear_true2_fit2,loss,"), std::string::npos) << summary;
}

TEST(Cli, GradcheckPassesAndCatchesCorruption) {
  auto ok = run("gradcheck --scope losses");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);
  auto bad = run("gradcheck --scope losses --corrupt-gradient 0.01");
  EXPECT_EQ(bad.code, 1) << bad.out;
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}
