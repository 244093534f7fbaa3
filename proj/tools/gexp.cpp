#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gexp/experiment.hpp"

namespace ex = gexp::experiment;

int main(int argc, char** argv) {
  CLI::App app{"Experiment runner for G-expectation solvers and verification suites"};
  app.require_subcommand(1);

  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  app.add_option("--out", out_dir, "Directory for reports and CSV files")->capture_default_str();
  app.add_option("--seed", seed, "Override the seed of every config");
  app.add_option("--threads", threads, "Worker threads")->check(CLI::Range(1u, 256u))->capture_default_str();

  std::string config;
  auto* run = app.add_subcommand("run", "Run one experiment config");
  run->add_option("config", config, "Config JSON file")->required();

  std::string dir;
  auto* suite = app.add_subcommand("suite", "Run every *.json config in a directory");
  suite->add_option("dir", dir, "Directory of config JSON files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ex::kConfigError;
  }

  const ex::RunOptions opt{out_dir, seed, threads};
  if (run->parsed()) {
    const auto o = ex::run_file(config, opt);
    (o.code == ex::kConfigError ? std::cerr : std::cout) << o.summary << '\n';
    return o.code;
  }

  const auto s = ex::run_suite(dir, opt);
  if (!s.error.empty()) {
    std::cerr << "suite: " << s.error << '\n';
    return s.code;
  }
  for (const auto& o : s.outcomes) (o.code == ex::kConfigError ? std::cerr : std::cout) << o.summary << '\n';
  std::cout << "suite: " << s.report["passed"].get<int>() << "/" << s.outcomes.size() << " passed, exit "
            << s.code << '\n';
  return s.code;
}
