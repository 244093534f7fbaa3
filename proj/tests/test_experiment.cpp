#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include "gexp/experiment.hpp"

namespace fs = std::filesystem;
namespace ex = gexp::experiment;
using json = nlohmann::json;

namespace {

const fs::path kConfigs = GEXP_CONFIG_DIR;
const std::string kCli = GEXP_CLI_PATH;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("gexp_test_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

json gheat_config(const std::string& output = "g") {
  return {{"kind", "gheat"},
          {"output", output},
          {"seed", 0},
          {"params",
           {{"bounds", {{"sigma_lo_sq", 1.0}, {"sigma_hi_sq", 4.0}}},
            {"phi", "x^2"},
            {"grid", {{"axes", json::array({{{"lo", -12.0}, {"hi", 12.0}, {"n", 401}}})}}},
            {"expected", 4.0},
            {"tol", 1e-3}}}};
}

std::string config_error(const json& j) {
  try {
    ex::parse_config(j);
  } catch (const ex::ConfigError& e) {
    return e.what();
  }
  return "";
}

struct Cli {
  int code;
  std::string out, err;
};

Cli cli(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = "\"" + kCli + "\" " + args + " > \"" + out.string() + "\" 2> \"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

}  // namespace

TEST(ExperimentConfig, RejectsUnknownKindNamingTheField) {
  auto j = gheat_config();
  j["kind"] = "gheet";
  const auto what = config_error(j);
  EXPECT_NE(what.find("kind"), std::string::npos) << what;
  EXPECT_NE(what.find("gheet"), std::string::npos) << what;
}

TEST(ExperimentConfig, RejectsUnknownAndMissingFields) {
  auto j = gheat_config();
  j["colour"] = 1;
  EXPECT_NE(config_error(j).find("colour: unknown field"), std::string::npos);

  j = gheat_config();
  j["params"]["grid"]["spacing"] = 0.1;
  EXPECT_NE(config_error(j).find("params.grid.spacing: unknown field"), std::string::npos);

  j = gheat_config();
  j["params"].erase("phi");
  EXPECT_NE(config_error(j).find("params.phi: required field is missing"), std::string::npos);

  j = gheat_config();
  j["params"]["grid"]["axes"][0]["n"] = 2;
  EXPECT_NE(config_error(j).find("params.grid.axes[0].n"), std::string::npos);

  j = gheat_config();
  j["params"]["bounds"]["sigma_lo_sq"] = 5.0;
  EXPECT_NE(config_error(j).find("params.bounds.sigma_lo_sq"), std::string::npos);

  j = gheat_config();
  j["params"]["phi"] = "x^2 + y";
  EXPECT_NE(config_error(j).find("params.phi: variable 'y'"), std::string::npos);

  j = gheat_config();
  j["params"]["phi"] = "x^";
  EXPECT_NE(config_error(j).find("position 2"), std::string::npos);

  j = gheat_config();
  j["output"] = "../escape";
  EXPECT_NE(config_error(j).find("output"), std::string::npos);

  j = gheat_config();
  j["seed"] = -1;
  EXPECT_NE(config_error(j).find("seed"), std::string::npos);
}

TEST(ExperimentConfig, ReportsCflViolation) {
  auto j = gheat_config();
  j["params"]["grid"]["nt"] = 10;
  const auto what = config_error(j);
  EXPECT_NE(what.find("params.grid.nt"), std::string::npos) << what;
  EXPECT_NE(what.find("CFL violated"), std::string::npos) << what;
  // 4 * 0.1 / 0.06^2 = 111.1
  EXPECT_NE(what.find("111.1"), std::string::npos) << what;
}

TEST(ExperimentConfig, CanonicalRoundTrip) {
  for (const auto& dir : {kConfigs / "samples", kConfigs / "acceptance"}) {
    for (const auto& e : fs::directory_iterator(dir)) {
      const json in = json::parse(slurp(e.path()));
      const auto c = ex::parse_config(in);
      EXPECT_EQ(ex::parse_config(c.to_json()).canonical(), c.canonical()) << e.path();
      // Every input field survives with its value; defaults are added.
      for (const auto& op : json::diff(in, c.to_json())) EXPECT_EQ(op["op"], "add") << e.path() << op.dump();
    }
  }
}

TEST(ExperimentRun, GHeatExample) {
  const auto dir = scratch("gheat");
  const auto o = ex::run_json(gheat_config(), {dir});
  ASSERT_EQ(o.code, ex::kPass) << o.summary;
  EXPECT_NEAR(o.result->value, 4.0, 1e-3);
  EXPECT_NE(o.summary.find("PASS"), std::string::npos);
  const auto report = json::parse(slurp(dir / "g.json"));
  EXPECT_EQ(report["exit_code"], 0);
  EXPECT_TRUE(fs::exists(dir / "g.csv"));
}

TEST(ExperimentRun, OracleCheckExample) {
  const auto dir = scratch("oracle");
  const json j{{"kind", "oracle_check"},
               {"output", "o"},
               {"params", {{"bounds", {{"sigma_lo_sq", 1.0}, {"sigma_hi_sq", 4.0}}}, {"depth", 3}, {"functional", "x1^2"}}}};
  const auto o = ex::run_json(j, {dir});
  ASSERT_EQ(o.code, ex::kPass) << o.summary;
  EXPECT_NE(o.summary.find("oracle==dp exact"), std::string::npos);
  EXPECT_DOUBLE_EQ(o.result->value, 4.0);
}

TEST(ExperimentRun, FailingToleranceExitsTwo) {
  const auto dir = scratch("fail");
  auto j = gheat_config();
  j["params"]["expected"] = 4.5;
  const auto o = ex::run_json(j, {dir});
  EXPECT_EQ(o.code, ex::kVerificationFailure);
  EXPECT_NE(o.summary.find("FAIL"), std::string::npos);
}

TEST(ExperimentRun, DeterministicOutputs) {
  const auto cfg = kConfigs / "samples" / "comparison_small.json";
  const auto a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  ASSERT_EQ(ex::run_file(cfg, {a}).code, ex::kPass);
  ASSERT_EQ(ex::run_file(cfg, {b}).code, ex::kPass);
  for (const char* f : {"comparison_small.json", "comparison_small.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  ex::RunOptions other{c, 12345u, 1};
  ASSERT_EQ(ex::run_file(cfg, other).code, ex::kPass);
  EXPECT_NE(slurp(a / "comparison_small.csv"), slurp(c / "comparison_small.csv"));
  EXPECT_EQ(json::parse(slurp(c / "comparison_small.json"))["config"]["seed"], 12345u);
}

TEST(ExperimentSuite, EmptyListIsConfigError) {
  const auto dir = scratch("empty");
  const auto s = ex::run_suite(dir, {scratch("empty_out")});
  EXPECT_EQ(s.code, ex::kConfigError);
  EXPECT_FALSE(s.error.empty());
}

TEST(ExperimentSuite, WorstCodePropagates) {
  const auto dir = scratch("mixed");
  write(dir / "a_ok.json", gheat_config("ok"));
  auto bad = gheat_config("bad");
  bad["params"]["expected"] = 5.0;
  write(dir / "b_fail.json", bad);
  const auto out = scratch("mixed_out");
  auto s = ex::run_suite(dir, {out});
  EXPECT_EQ(s.code, ex::kVerificationFailure);
  EXPECT_EQ(s.report["failing"], json::array({"bad"}));
  EXPECT_EQ(json::parse(slurp(out / "suite_report.json"))["exit_code"], 2);

  std::ofstream(dir / "c_broken.json") << "{not json";
  s = ex::run_suite(dir, {out});
  EXPECT_EQ(s.code, ex::kConfigError);
  EXPECT_EQ(s.report["failing"].size(), 2u);

  fs::remove(dir / "c_broken.json");
  write(dir / "d_dup.json", gheat_config("ok"));
  s = ex::run_suite(dir, {out});
  EXPECT_EQ(s.code, ex::kConfigError);
}

TEST(ExperimentSuite, ThreadCountDoesNotChangeReport) {
  const auto one = scratch("t1"), two = scratch("t2");
  const auto a = ex::run_suite(kConfigs / "samples", {one, std::nullopt, 1});
  const auto b = ex::run_suite(kConfigs / "samples", {two, std::nullopt, 3});
  EXPECT_EQ(a.code, ex::kPass);
  EXPECT_EQ(slurp(one / "suite_report.json"), slurp(two / "suite_report.json"));
  for (const auto& e : fs::directory_iterator(one))
    EXPECT_EQ(slurp(e.path()), slurp(two / e.path().filename())) << e.path().filename();
}

TEST(Cli, RunSuiteAndErrors) {
  const auto dir = scratch("cli");
  auto r = cli("--out \"" + (dir / "o").string() + "\" run \"" + (kConfigs / "samples" / "gheat_square.json").string() + "\"", dir);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("gheat_square: kind=gheat value=3.99999"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos) << r.out;

  auto j = gheat_config();
  j["kind"] = "nonsense";
  write(dir / "bad.json", j);
  r = cli("run \"" + (dir / "bad.json").string() + "\"", dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("kind"), std::string::npos) << r.err;

  r = cli("--threads 2 --out \"" + (dir / "s").string() + "\" suite \"" + (kConfigs / "samples").string() + "\"", dir);
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("suite: 10/10 passed, exit 0"), std::string::npos) << r.out;

  r = cli("suite \"" + scratch("cli_empty").string() + "\"", dir);
  EXPECT_EQ(r.code, 1);

  r = cli("frobnicate", dir);
  EXPECT_EQ(r.code, 1);
}
