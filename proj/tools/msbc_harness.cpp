// Copyright 2026 The MSBC Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// msbc-harness: runs scenario files and the smart-home simulation.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "msbc/harness.hpp"

namespace {

int emit(const msbc::harness::MetricsReport& report, const std::string& path) {
  const auto text = report.format();
  std::cout << text;
  if (!path.empty()) {
    std::ofstream out(path);
    out << text;
    if (!out) {
      std::cerr << "msbc-harness: cannot write " << path << "\n";
      return 1;
    }
  }
  return 0;
}

int failed(const msbc::harness::ScenarioFailed& f, const std::string& path) {
  emit(f.report(), path);
  std::cerr << "FAILED at line " << f.line() << ": " << f.step() << "\n  " << f.expectation() << "\n";
  if (!f.excerpt().empty()) std::cerr << "event log (most recent last):\n" << f.excerpt();
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MSBC scenario harness"};
  app.require_subcommand(1);
  std::string level = "warn";
  app.add_option("--log-level", level)->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  auto* run = app.add_subcommand("run", "run a scenario file");
  std::string scenario, report;
  std::uint64_t seed = 1;
  run->add_option("scenario", scenario)->required()->check(CLI::ExistingFile);
  run->add_option("--report", report, "also write the report here");
  run->add_option("--seed", seed);

  auto* home = app.add_subcommand("smart-home", "simulate the five-provider smart home");
  double duration = 10;
  home->add_option("--duration", duration, "seconds")->check(CLI::PositiveNumber);
  home->add_option("--report", report);
  home->add_option("--seed", seed);

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(level));

  try {
    if (*run) return emit(msbc::harness::run_scenario(msbc::harness::load_scenario(scenario), seed), report);
    msbc::harness::SmartHomeOptions opts;
    opts.duration = std::chrono::milliseconds(static_cast<std::int64_t>(duration * 1000));
    opts.seed = seed;
    return emit(msbc::harness::simulate_smart_home(opts), report);
  } catch (const msbc::harness::ScenarioFailed& f) {
    return failed(f, report);
  } catch (const std::exception& e) {
    std::cerr << "msbc-harness: " << e.what() << "\n";
    return 2;
  }
}
