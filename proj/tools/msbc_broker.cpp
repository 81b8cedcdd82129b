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

// msbc-broker: runs the interconnect server until SIGINT or SIGTERM.

#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "msbc/broker_server.hpp"
#include "msbc/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MSBC interconnect server"};
  std::string config_path;
  std::string level = "info";
  app.add_option("--config", config_path, "key=value config file")->required()->check(CLI::ExistingFile);
  app.add_option("--log-level", level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(level));

  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  try {
    auto cfg = msbc::load_broker_config(config_path);
    cfg.validate();
    msbc::SubscriptionDirectory dir;
    if (!cfg.directory_path.empty()) dir = msbc::load_directory(cfg.directory_path);
    dir.validate();

    std::ofstream event_log;
    if (!cfg.event_log_path.empty()) {
      event_log.open(cfg.event_log_path, std::ios::app);
      if (!event_log) throw msbc::Error(msbc::Errc::InvalidConfig, "cannot open " + cfg.event_log_path);
    }
    msbc::BrokerServer server(cfg, std::move(dir));
    if (event_log.is_open())
      server.add_event_listener([&](const msbc::BrokerEvent& e) { event_log << msbc::format_event(e) << std::endl; });
    server.start();
    std::cout << "signaling " << server.signaling_endpoint().str() << "\n"
              << "payload " << server.payload_endpoint().str() << std::endl;

    int sig = 0;
    sigwait(&stop_signals, &sig);
    spdlog::info("signal {}, shutting down", sig);
    server.stop();
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
