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

// Scenario runner, fault injection and the smart-home simulator.
//
// A scenario file is line oriented:
//
//   scenario transfer
//   directory provider health subscriber=sip:health@providers.msbc
//   directory gateway sip:home@lgw.msbc
//   directory rule heart-* -> health
//   step start_broker keepalive_interval_ms=200
//   step start_gateway name=home role=lgw subscriber=sip:home@lgw.msbc
//   step attach gateway=home ctid=heart-1
//   step transmit gateway=home ctid=heart-1 count=1000 size=256
//   step assert_metric median(transfer_rtt_ms) < 50
//
// '#' starts a comment. `directory` lines are directory file lines; `set`
// lines (`set key=value`) override broker settings for start_broker.

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "msbc/broker_server.hpp"
#include "msbc/directory.hpp"
#include "msbc/error.hpp"
#include "msbc/gateway.hpp"

namespace msbc::harness {

struct Step {
  std::size_t line = 0;
  std::string verb;
  std::vector<std::pair<std::string, std::string>> args;  // key=value, in order
  std::string rest;                                         // raw text after the verb

  const std::string* arg(std::string_view key) const noexcept;
};

struct Scenario {
  std::string name;
  std::string directory_text;
  std::map<std::string, std::string> overrides;
  std::vector<Step> steps;
};

/// Validates verbs, arguments and entity references. Throws ParseError.
Scenario parse_scenario(std::string_view text);
Scenario load_scenario(const std::filesystem::path& path);

class Distribution {
 public:
  void add(double v) { samples_.push_back(v); }
  std::size_t count() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  double min() const;
  double max() const;
  /// Mean of the two middle samples for even counts.
  double median() const;
  /// Nearest-rank percentile, p in (0, 100].
  double percentile(double p) const;
  const std::vector<double>& samples() const noexcept { return samples_; }

 private:
  std::vector<double> samples_;
};

struct MetricsReport {
  std::string scenario;
  std::map<std::string, Distribution> distributions;  // wire_setup_ms, transfer_rtt_ms, ...
  std::uint64_t packets_sent = 0;
  std::uint64_t packets_delivered = 0;
  std::uint64_t packets_lost = 0;
  std::uint64_t packets_in_flight = 0;  // unresolved reports plus broker buffers
  std::optional<bool> teardown_clean;
  std::optional<double> watchdog_detect_ms;
  std::map<std::string, double> values;  // other scalar metrics
  std::vector<std::string> notes;

  bool conserved() const noexcept {
    return packets_delivered + packets_lost + packets_in_flight == packets_sent;
  }
  /// `median(x)`, `p95(x)`, `min(x)`, `max(x)`, `count(x)` or a scalar name.
  std::optional<double> metric(std::string_view name) const;
  /// One summary line per metric, then key=value lines.
  std::string format() const;
};

class ScenarioFailed : public Error {
 public:
  ScenarioFailed(std::size_t line, std::string step, std::string expectation, std::string excerpt,
                 MetricsReport report);

  std::size_t line() const noexcept { return line_; }
  const std::string& step() const noexcept { return step_; }
  const std::string& expectation() const noexcept { return expectation_; }
  const std::string& excerpt() const noexcept { return excerpt_; }
  const MetricsReport& report() const noexcept { return report_; }

 private:
  std::size_t line_;
  std::string step_;
  std::string expectation_;
  std::string excerpt_;
  MetricsReport report_;
};

/// What a simulated endpoint saw. Thread-safe.
class Recorder : public Receiver {
 public:
  struct Data {
    std::string payload;
    std::int64_t ts = 0;
  };
  struct Event {
    GatewayEventKind kind;
    std::optional<Ctid> ctid;
    std::int64_t ts = 0;
  };

  void on_data(const Ctid& ctid, std::string_view data) override;
  void on_event(const GatewayEvent& event) override;
  bool authorize(const Ctid& ctid) override;

  void refuse(const Ctid& ctid);
  std::vector<Data> data(const Ctid& ctid) const;
  std::size_t data_count(const Ctid& ctid) const;
  std::vector<Event> events() const;
  std::size_t count_events(GatewayEventKind kind, std::int64_t since, const std::optional<Ctid>& ctid = {}) const;
  /// Blocks until `pred` holds or the deadline passes.
  bool wait_for(const std::function<bool()>& pred, std::chrono::milliseconds timeout) const;

 private:
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::map<Ctid, std::vector<Data>> data_;
  std::vector<Event> events_;
  std::set<Ctid> refused_;
};

/// Payload for packet `index` of a stream; deterministic in (seed, ctid, index).
std::string make_payload(std::uint64_t seed, const Ctid& ctid, std::uint64_t index, std::size_t size);

enum class FaultKind { kill_link, kill_process, switch_endpoint };

/// Owns a broker and named gateways for one run.
class Testbed {
 public:
  explicit Testbed(std::uint64_t seed = 1);
  ~Testbed();

  void start_broker(BrokerConfig config, SubscriptionDirectory directory);
  BrokerServer& broker();
  bool has_broker() const noexcept { return broker_ != nullptr; }

  Gateway& start_gateway(const std::string& name, GatewayConfig config,
                         std::chrono::milliseconds open_timeout = std::chrono::seconds(5));
  Gateway& gateway(const std::string& name);
  Recorder& recorder(const std::string& name);
  bool has_gateway(const std::string& name) const;
  std::vector<std::string> gateway_names() const;

  /// Throws Error(UnknownTarget).
  void inject_fault(FaultKind kind, const std::string& target, AccessType access = AccessType::radio,
                    const std::string& local_address = "127.0.0.2");

  std::vector<BrokerEvent> events() const;
  std::string event_excerpt(std::size_t last = 40) const;
  /// Broker session id of a gateway's current dialog.
  std::optional<SessionId> session_of(const std::string& name) const;

  /// Stops every gateway (clean close) and the broker.
  void shutdown();

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  struct Entity {
    std::unique_ptr<Gateway> gw;
    std::shared_ptr<Recorder> rec;
  };

  std::uint64_t seed_;
  std::unique_ptr<BrokerServer> broker_;
  std::map<std::string, Entity> gateways_;
  mutable std::mutex log_mu_;
  std::vector<BrokerEvent> log_;
};

/// Runs every step against a fresh Testbed. Throws ScenarioFailed.
MetricsReport run_scenario(const Scenario& scenario, std::uint64_t seed = 1);

struct SmartHomeOptions {
  std::chrono::milliseconds duration{10000};
  std::chrono::milliseconds heart_period{1000};
  std::uint64_t seed = 1;
};

/// Brings up the five-provider home, runs traffic for the duration and
/// checks counts and order. Throws ScenarioFailed.
MetricsReport simulate_smart_home(const SmartHomeOptions& options = {});

}  // namespace msbc::harness
