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

#include "msbc/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "msbc/net.hpp"

namespace msbc::harness {

namespace {

using Clock = std::chrono::steady_clock;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::optional<std::int64_t> to_int(std::string_view v) {
  std::int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) return std::nullopt;
  return out;
}

std::optional<double> to_double(std::string_view v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(std::string(v), &used);
    if (used != v.size()) return std::nullopt;
    return d;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

struct VerbSpec {
  std::string_view verb;
  std::vector<std::string_view> required;
};

const std::vector<VerbSpec>& verb_specs() {
  static const std::vector<VerbSpec> specs{
      {"start_broker", {}},
      {"start_gateway", {"name", "role", "subscriber"}},
      {"attach", {"gateway", "ctid"}},
      {"transmit", {"gateway", "ctid"}},
      {"expect_data", {"gateway", "ctid"}},
      {"expect_event", {"gateway", "kind"}},
      {"kill_link", {"target"}},
      {"restore_link", {"target"}},
      {"switch_endpoint", {"target"}},
      {"stop_gateway", {"name"}},
      {"settle", {}},
      {"wait", {"ms"}},
      {"assert_metric", {}},
  };
  return specs;
}

std::optional<GatewayEventKind> parse_event_kind(std::string_view s) {
  for (auto k : {GatewayEventKind::Opened, GatewayEventKind::Commissioned, GatewayEventKind::Denied,
                 GatewayEventKind::ProviderUnavailable, GatewayEventKind::PeerDown, GatewayEventKind::PeerUp,
                 GatewayEventKind::Decommissioned, GatewayEventKind::ConnectionLost,
                 GatewayEventKind::ConnectionRestored})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

struct Comparison {
  std::string_view metric;
  std::string_view op;
  double rhs = 0;
};

std::optional<Comparison> parse_comparison(std::string_view expr) {
  static const std::vector<std::string_view> ops{"<=", ">=", "==", "!=", "<", ">"};
  for (auto op : ops) {
    const auto pos = expr.find(op);
    if (pos == std::string_view::npos) continue;
    const auto name = trim(expr.substr(0, pos));
    const auto rhs = to_double(trim(expr.substr(pos + op.size())));
    if (name.empty() || !rhs) return std::nullopt;
    return Comparison{name, op, *rhs};
  }
  return std::nullopt;
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  while (!s.empty()) {
    const auto comma = s.find(',');
    auto item = trim(s.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    s.remove_prefix(comma == std::string_view::npos ? s.size() : comma + 1);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Scenario files

const std::string* Step::arg(std::string_view key) const noexcept {
  for (const auto& [k, v] : args)
    if (k == key) return &v;
  return nullptr;
}

Scenario parse_scenario(std::string_view text) {
  Scenario sc;
  std::vector<std::size_t> directory_lines;
  std::set<std::string> started;
  bool broker = false;
  std::size_t lineno = 0;
  while (!text.empty()) {
    ++lineno;
    const auto eol = text.find('\n');
    auto line = trim(text.substr(0, eol));
    text.remove_prefix(eol == std::string_view::npos ? text.size() : eol + 1);
    if (line.empty() || line.front() == '#') continue;

    const auto sp = line.find_first_of(" \t");
    const auto head = line.substr(0, sp);
    auto tail = sp == std::string_view::npos ? std::string_view{} : trim(line.substr(sp + 1));

    if (head == "scenario") {
      if (tail.empty()) throw ParseError(lineno, "scenario needs a name");
      sc.name = std::string(tail);
      continue;
    }
    if (head == "directory") {
      sc.directory_text += std::string(tail) + "\n";
      directory_lines.push_back(lineno);
      continue;
    }
    if (head == "set") {
      const auto eq = tail.find('=');
      if (eq == std::string_view::npos) throw ParseError(lineno, "set needs key=value");
      sc.overrides[std::string(trim(tail.substr(0, eq)))] = std::string(trim(tail.substr(eq + 1)));
      continue;
    }
    if (head != "step") throw ParseError(lineno, "unknown directive '" + std::string(head) + "'");

    Step st;
    st.line = lineno;
    const auto vsp = tail.find_first_of(" \t");
    st.verb = std::string(tail.substr(0, vsp));
    st.rest = vsp == std::string_view::npos ? std::string() : std::string(trim(tail.substr(vsp + 1)));
    const auto& specs = verb_specs();
    auto known = std::find_if(specs.begin(), specs.end(), [&](const VerbSpec& v) { return v.verb == st.verb; });
    if (known == specs.end()) throw ParseError(lineno, "unknown step '" + st.verb + "'");

    if (st.verb == "assert_metric") {
      if (!parse_comparison(st.rest))
        throw ParseError(lineno, "assert_metric needs '<metric> <op> <number>'");
    } else {
      std::string_view args = st.rest;
      while (!args.empty()) {
        const auto end = args.find_first_of(" \t");
        auto tok = args.substr(0, end);
        args = end == std::string_view::npos ? std::string_view{} : trim(args.substr(end));
        const auto eq = tok.find('=');
        if (eq == std::string_view::npos || eq == 0)
          throw ParseError(lineno, "expected key=value, got '" + std::string(tok) + "'");
        st.args.emplace_back(std::string(tok.substr(0, eq)), std::string(tok.substr(eq + 1)));
      }
      for (auto key : known->required)
        if (st.arg(key) == nullptr)
          throw ParseError(lineno, st.verb + " needs " + std::string(key) + "=");
    }

    // Steps may only reference entities started earlier.
    if (st.verb == "start_broker") {
      broker = true;
    } else if (st.verb == "start_gateway") {
      if (!broker) throw ParseError(lineno, "start_gateway before start_broker");
      const auto& name = *st.arg("name");
      if (!started.insert(name).second) throw ParseError(lineno, "gateway '" + name + "' started twice");
      const auto& role = *st.arg("role");
      if (!parse_role(role)) throw ParseError(lineno, "role must be lgw or asgw");
      if (role == "asgw" && st.arg("provider") == nullptr) throw ParseError(lineno, "asgw needs provider=");
    } else {
      for (auto key : {"gateway", "target", "name"}) {
        const auto* ref = st.arg(key);
        if (ref != nullptr && !started.contains(*ref))
          throw ParseError(lineno, "unknown entity '" + *ref + "'");
      }
    }
    if (const auto* kind = st.arg("kind"); kind && st.verb == "expect_event" && !parse_event_kind(*kind))
      throw ParseError(lineno, "unknown event kind '" + *kind + "'");
    if (const auto* a = st.arg("access"); a && !parse_access(*a))
      throw ParseError(lineno, "access must be radio or internet");
    sc.steps.push_back(std::move(st));
  }
  if (!sc.directory_text.empty()) {
    try {
      parse_directory(sc.directory_text);
    } catch (const ParseError& e) {
      const auto at = e.line() >= 1 && e.line() <= directory_lines.size() ? directory_lines[e.line() - 1] : 0;
      throw ParseError(at, std::string("directory: ") + e.what());
    }
  }
  return sc;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::InvalidConfig, "cannot read scenario " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  auto sc = parse_scenario(buf.str());
  if (sc.name.empty()) sc.name = path.stem().string();
  return sc;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

void require_samples(const std::vector<double>& s) {
  if (s.empty()) throw Error(Errc::NotFound, "distribution has no samples");
}

}  // namespace

double Distribution::min() const {
  require_samples(samples_);
  return *std::min_element(samples_.begin(), samples_.end());
}

double Distribution::max() const {
  require_samples(samples_);
  return *std::max_element(samples_.begin(), samples_.end());
}

double Distribution::median() const {
  require_samples(samples_);
  auto s = samples_;
  std::sort(s.begin(), s.end());
  const auto n = s.size();
  return n % 2 == 1 ? s[n / 2] : (s[n / 2 - 1] + s[n / 2]) / 2.0;
}

double Distribution::percentile(double p) const {
  require_samples(samples_);
  auto s = samples_;
  std::sort(s.begin(), s.end());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(s.size())));
  rank = std::clamp<std::size_t>(rank, 1, s.size());
  return s[rank - 1];
}

std::optional<double> MetricsReport::metric(std::string_view name) const {
  name = trim(name);
  const auto open = name.find('(');
  if (open != std::string_view::npos && name.back() == ')') {
    const auto fn = name.substr(0, open);
    const auto arg = std::string(name.substr(open + 1, name.size() - open - 2));
    auto it = distributions.find(arg);
    if (it == distributions.end()) return std::nullopt;
    const auto& d = it->second;
    if (fn == "count") return static_cast<double>(d.count());
    if (d.empty()) return std::nullopt;
    if (fn == "median") return d.median();
    if (fn == "min") return d.min();
    if (fn == "max") return d.max();
    if (fn == "p95") return d.percentile(95);
    return std::nullopt;
  }
  if (name == "packets_sent") return static_cast<double>(packets_sent);
  if (name == "packets_delivered") return static_cast<double>(packets_delivered);
  if (name == "packets_lost") return static_cast<double>(packets_lost);
  if (name == "packets_in_flight") return static_cast<double>(packets_in_flight);
  if (name == "conserved") return conserved() ? 1.0 : 0.0;
  if (name == "teardown_clean") {
    if (!teardown_clean) return std::nullopt;
    return *teardown_clean ? 1.0 : 0.0;
  }
  if (name == "watchdog_detect_ms") return watchdog_detect_ms;
  auto it = values.find(std::string(name));
  if (it == values.end()) return std::nullopt;
  return it->second;
}

std::string MetricsReport::format() const {
  std::ostringstream o;
  o << "# scenario " << scenario << "\n";
  for (const auto& [name, d] : distributions) {
    o << "# " << name << ": n=" << d.count();
    if (!d.empty())
      o << " min=" << fmt_double(d.min()) << " median=" << fmt_double(d.median())
        << " p95=" << fmt_double(d.percentile(95)) << " max=" << fmt_double(d.max());
    o << "\n";
  }
  o << "# packets: sent=" << packets_sent << " delivered=" << packets_delivered << " lost=" << packets_lost
    << " in_flight=" << packets_in_flight << (conserved() ? " (conserved)" : " (NOT conserved)") << "\n";
  if (teardown_clean) o << "# teardown: " << (*teardown_clean ? "clean" : "NOT clean") << "\n";
  if (watchdog_detect_ms) o << "# watchdog detected link loss after " << fmt_double(*watchdog_detect_ms) << " ms\n";
  for (const auto& n : notes) o << "# " << n << "\n";

  o << "scenario=" << scenario << "\n";
  for (const auto& [name, d] : distributions) {
    o << name << ".count=" << d.count() << "\n";
    if (d.empty()) continue;
    o << name << ".min=" << fmt_double(d.min()) << "\n";
    o << name << ".median=" << fmt_double(d.median()) << "\n";
    o << name << ".p95=" << fmt_double(d.percentile(95)) << "\n";
    o << name << ".max=" << fmt_double(d.max()) << "\n";
  }
  o << "packets_sent=" << packets_sent << "\n";
  o << "packets_delivered=" << packets_delivered << "\n";
  o << "packets_lost=" << packets_lost << "\n";
  o << "packets_in_flight=" << packets_in_flight << "\n";
  o << "conserved=" << (conserved() ? "true" : "false") << "\n";
  if (teardown_clean) o << "teardown_clean=" << (*teardown_clean ? "true" : "false") << "\n";
  if (watchdog_detect_ms) o << "watchdog_detect_ms=" << fmt_double(*watchdog_detect_ms) << "\n";
  for (const auto& [k, v] : values) o << k << "=" << fmt_double(v) << "\n";
  return o.str();
}

ScenarioFailed::ScenarioFailed(std::size_t line, std::string step, std::string expectation, std::string excerpt,
                               MetricsReport report)
    : Error(Errc::ScenarioFailed, "line " + std::to_string(line) + " (" + step + "): " + expectation),
      line_(line),
      step_(std::move(step)),
      expectation_(std::move(expectation)),
      excerpt_(std::move(excerpt)),
      report_(std::move(report)) {}

// ---------------------------------------------------------------------------
// Recorder

void Recorder::on_data(const Ctid& ctid, std::string_view data) {
  {
    std::lock_guard lock(mu_);
    data_[ctid].push_back(Data{std::string(data), net::steady_now_ms()});
  }
  cv_.notify_all();
}

void Recorder::on_event(const GatewayEvent& event) {
  {
    std::lock_guard lock(mu_);
    events_.push_back(Event{event.kind, event.ctid, net::steady_now_ms()});
  }
  cv_.notify_all();
}

bool Recorder::authorize(const Ctid& ctid) {
  std::lock_guard lock(mu_);
  return !refused_.contains(ctid);
}

void Recorder::refuse(const Ctid& ctid) {
  std::lock_guard lock(mu_);
  refused_.insert(ctid);
}

std::vector<Recorder::Data> Recorder::data(const Ctid& ctid) const {
  std::lock_guard lock(mu_);
  auto it = data_.find(ctid);
  return it == data_.end() ? std::vector<Data>{} : it->second;
}

std::size_t Recorder::data_count(const Ctid& ctid) const {
  std::lock_guard lock(mu_);
  auto it = data_.find(ctid);
  return it == data_.end() ? 0 : it->second.size();
}

std::vector<Recorder::Event> Recorder::events() const {
  std::lock_guard lock(mu_);
  return events_;
}

std::size_t Recorder::count_events(GatewayEventKind kind, std::int64_t since, const std::optional<Ctid>& ctid) const {
  std::lock_guard lock(mu_);
  return static_cast<std::size_t>(std::count_if(events_.begin(), events_.end(), [&](const Event& e) {
    return e.kind == kind && e.ts >= since && (!ctid || e.ctid == ctid);
  }));
}

bool Recorder::wait_for(const std::function<bool()>& pred, std::chrono::milliseconds timeout) const {
  const auto deadline = Clock::now() + timeout;
  while (!pred()) {
    if (Clock::now() >= deadline) return false;
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, std::chrono::milliseconds(5));
  }
  return true;
}

std::string make_payload(std::uint64_t seed, const Ctid& ctid, std::uint64_t index, std::size_t size) {
  std::string out = ctid.str() + "#" + std::to_string(index) + ":";
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(std::hash<std::string>{}(ctid.str()))};
  std::mt19937 rng(seq);
  while (out.size() < size) out.push_back(static_cast<char>(rng() & 0xff));
  return out;
}

// ---------------------------------------------------------------------------
// Testbed

Testbed::Testbed(std::uint64_t seed) : seed_(seed) {}

Testbed::~Testbed() { shutdown(); }

void Testbed::start_broker(BrokerConfig config, SubscriptionDirectory directory) {
  if (broker_) throw Error(Errc::InvalidConfig, "broker already started");
  broker_ = std::make_unique<BrokerServer>(std::move(config), std::move(directory));
  broker_->add_event_listener([this](const BrokerEvent& e) {
    std::lock_guard lock(log_mu_);
    log_.push_back(e);
  });
  broker_->start();
}

BrokerServer& Testbed::broker() {
  if (!broker_) throw Error(Errc::UnknownTarget, "no broker running");
  return *broker_;
}

Gateway& Testbed::start_gateway(const std::string& name, GatewayConfig config, std::chrono::milliseconds open_timeout) {
  if (gateways_.contains(name)) throw Error(Errc::InvalidConfig, "gateway '" + name + "' already exists");
  if (config.broker_signaling_endpoint.empty() || broker_)
    config.broker_signaling_endpoint = broker().signaling_endpoint().str();
  auto rec = std::make_shared<Recorder>();
  auto gw = Gateway::open(std::move(config), rec);
  if (!gw->wait_open(open_timeout)) {
    const auto err = gw->last_error();
    throw Error(Errc::ConnectFailed,
                "gateway '" + name + "' did not open" + (err ? std::string(" (") + to_string(*err) + ")" : ""));
  }
  auto& e = gateways_[name];
  e.gw = std::move(gw);
  e.rec = std::move(rec);
  return *e.gw;
}

Gateway& Testbed::gateway(const std::string& name) {
  auto it = gateways_.find(name);
  if (it == gateways_.end()) throw Error(Errc::UnknownTarget, name);
  return *it->second.gw;
}

Recorder& Testbed::recorder(const std::string& name) {
  auto it = gateways_.find(name);
  if (it == gateways_.end()) throw Error(Errc::UnknownTarget, name);
  return *it->second.rec;
}

bool Testbed::has_gateway(const std::string& name) const { return gateways_.contains(name); }

std::vector<std::string> Testbed::gateway_names() const {
  std::vector<std::string> out;
  for (const auto& [n, e] : gateways_) out.push_back(n);
  return out;
}

void Testbed::inject_fault(FaultKind kind, const std::string& target, AccessType access,
                           const std::string& local_address) {
  auto it = gateways_.find(target);
  if (it == gateways_.end()) throw Error(Errc::UnknownTarget, target);
  auto& gw = *it->second.gw;
  switch (kind) {
    case FaultKind::kill_link:
      gw.kill_link();
      return;
    case FaultKind::kill_process:
      gw.drop_connection();
      return;
    case FaultKind::switch_endpoint: {
      auto f = gw.switch_endpoint(access, local_address);
      if (f.wait_for(std::chrono::seconds(5)) != std::future_status::ready || !f.get())
        throw Error(Errc::ConnectFailed, "switch_endpoint on '" + target + "' did not complete");
      return;
    }
  }
}

std::vector<BrokerEvent> Testbed::events() const {
  std::lock_guard lock(log_mu_);
  return log_;
}

std::string Testbed::event_excerpt(std::size_t last) const {
  std::lock_guard lock(log_mu_);
  std::string out;
  const std::size_t from = log_.size() > last ? log_.size() - last : 0;
  for (std::size_t i = from; i < log_.size(); ++i) out += format_event(log_[i]) + "\n";
  return out;
}

std::optional<SessionId> Testbed::session_of(const std::string& name) const {
  auto it = gateways_.find(name);
  if (it == gateways_.end() || !broker_) return std::nullopt;
  const auto subscriber = it->second.gw->config().subscriber;
  return broker_->inspect([&](const Interconnect& core) {
    std::optional<SessionId> out;
    for (const auto& s : core.sessions())
      if (s.dialog.subscriber == subscriber) out = s.id;
    return out;
  });
}

void Testbed::shutdown() {
  for (auto& [name, e] : gateways_)
    if (e.gw) e.gw->close();
  if (broker_) broker_->stop();
}

// ---------------------------------------------------------------------------
// Scenario runner

namespace {

/// Clean teardown of one local gateway: its wires end Released or freed,
/// providers saw DECOMMISSIONED per ctid, and the event log has no session or
/// wire of it left open.
bool check_teardown(Testbed& tb, SessionId sid, const std::set<Ctid>& ctids, std::int64_t since,
                    const std::vector<std::string>& providers, std::vector<std::string>& notes) {
  bool ok = true;
  const auto table_clean = [&] {
    return tb.broker().inspect([&](const Interconnect& core) {
      for (const auto& [id, e] : core.wire_table())
        if (e.lgw_session == sid && e.state != WireState::Released) return false;
      return true;
    });
  };
  const auto decommissioned = [&](const Ctid& c) {
    for (const auto& p : providers)
      if (tb.recorder(p).count_events(GatewayEventKind::Decommissioned, since, c) > 0) return true;
    return false;
  };
  const auto all_decommissioned = [&] {
    return std::all_of(ctids.begin(), ctids.end(), decommissioned);
  };
  Recorder waiter;
  waiter.wait_for([&] { return table_clean() && all_decommissioned(); }, std::chrono::seconds(2));
  // Let the release acknowledgements land before reading the log.
  waiter.wait_for(
      [&] {
        return tb.broker().inspect([&](const Interconnect& core) {
          return std::none_of(core.wire_table().begin(), core.wire_table().end(),
                              [&](const auto& kv) { return kv.second.lgw_session == sid; });
        });
      },
      std::chrono::milliseconds(500));

  if (!table_clean()) {
    ok = false;
    notes.push_back("teardown: wire table still has live entries of session " + std::to_string(sid));
  }
  for (const auto& c : ctids) {
    if (!decommissioned(c)) {
      ok = false;
      notes.push_back("teardown: no provider saw DECOMMISSIONED for " + c.str());
    }
  }
  const auto log = tb.events();
  bool closed = false;
  std::map<std::string, int> open_wires;
  for (const auto& e : log) {
    if (e.session != sid) continue;
    if (e.kind == "session_closed" || e.kind == "session_lost") closed = true;
    if (!e.ctid) continue;
    if (e.kind == "wire_commissioned" || e.kind == "wire_adopted") ++open_wires[*e.ctid];
    if (e.kind == "wire_released") --open_wires[*e.ctid];
  }
  if (!closed) {
    ok = false;
    notes.push_back("teardown: session " + std::to_string(sid) + " never closed in the event log");
  }
  for (const auto& [c, n] : open_wires) {
    if (n > 0) {
      ok = false;
      notes.push_back("teardown: wire for " + c + " never released in the event log");
    }
  }
  return ok;
}

class Runner {
 public:
  Runner(const Scenario& sc, std::uint64_t seed) : sc_(sc), seed_(seed), tb_(seed) { report_.scenario = sc.name; }

  MetricsReport run() {
    started_ = net::steady_now_ms();
    fault_ts_ = started_;
    for (const auto& st : sc_.steps) {
      try {
        execute(st);
      } catch (const ScenarioFailed&) {
        throw;
      } catch (const Error& e) {
        fail(st, e.what());
      }
    }
    settle(std::chrono::milliseconds(0));
    finalize();
    tb_.shutdown();
    return report_;
  }

 private:
  [[noreturn]] void fail(const Step& st, const std::string& expectation) {
    try {
      settle(std::chrono::milliseconds(0));
    } catch (...) {
    }
    finalize();
    auto excerpt = tb_.event_excerpt();
    tb_.shutdown();
    throw ScenarioFailed(st.line, st.verb + (st.rest.empty() ? "" : " " + st.rest), expectation, std::move(excerpt),
                         report_);
  }

  std::int64_t int_arg(const Step& st, std::string_view key, std::int64_t def) {
    const auto* v = st.arg(key);
    if (v == nullptr) return def;
    auto n = to_int(*v);
    if (!n || *n < 0) fail(st, std::string(key) + " must be a non-negative integer");
    return *n;
  }

  bool bool_arg(const Step& st, std::string_view key, bool def) {
    const auto* v = st.arg(key);
    if (v == nullptr) return def;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    fail(st, std::string(key) + " must be true or false");
  }

  std::string str_arg(const Step& st, std::string_view key, std::string def = {}) {
    const auto* v = st.arg(key);
    return v ? *v : def;
  }

  Ctid ctid_arg(const Step& st, const std::string& value) {
    if (!Ctid::valid(value)) fail(st, "invalid ctid '" + value + "'");
    return Ctid{value};
  }

  void execute(const Step& st) {
    spdlog::debug("step {}: {} {}", st.line, st.verb, st.rest);
    const auto& v = st.verb;
    if (v == "start_broker") return start_broker(st);
    if (v == "start_gateway") return start_gateway(st);
    if (v == "attach") return attach(st);
    if (v == "transmit") return transmit(st);
    if (v == "expect_data") return expect_data(st);
    if (v == "expect_event") return expect_event(st);
    if (v == "kill_link") return kill_link(st);
    if (v == "restore_link") {
      tb_.gateway(*st.arg("target")).restore_link();
      return;
    }
    if (v == "switch_endpoint") return switch_endpoint(st);
    if (v == "stop_gateway") return stop_gateway(st);
    if (v == "settle") return settle(std::chrono::milliseconds(int_arg(st, "timeout_ms", 5000)));
    if (v == "wait") {
      std::this_thread::sleep_for(std::chrono::milliseconds(int_arg(st, "ms", 0)));
      return;
    }
    if (v == "assert_metric") return assert_metric(st);
    fail(st, "unknown step");
  }

  void start_broker(const Step& st) {
    std::string text = "signaling_endpoint=127.0.0.1:0\npayload_endpoint=127.0.0.1:0\n";
    for (const auto& [k, val] : sc_.overrides) text += k + "=" + val + "\n";
    for (const auto& [k, val] : st.args) text += k + "=" + val + "\n";
    broker_cfg_ = parse_broker_config(text);
    tb_.start_broker(broker_cfg_, parse_directory(sc_.directory_text));
  }

  void start_gateway(const Step& st) {
    GatewayConfig c;
    const auto& name = *st.arg("name");
    c.role = *parse_role(*st.arg("role"));
    c.subscriber = *st.arg("subscriber");
    if (const auto* p = st.arg("provider")) c.provider = *p;
    if (const auto* a = st.arg("access")) c.access = *parse_access(*a);
    c.local_address = str_arg(st, "local", "127.0.0.1");
    c.keepalive_interval =
        std::chrono::milliseconds(int_arg(st, "keepalive_ms", broker_cfg_.keepalive_interval_ms));
    c.keepalive_misses = static_cast<unsigned>(int_arg(st, "keepalive_misses", broker_cfg_.keepalive_misses));
    c.report_timeout = std::chrono::milliseconds(int_arg(st, "report_timeout_ms", 2000));
    c.max_frame_size = static_cast<std::uint32_t>(int_arg(st, "max_frame_size", kDefaultFrameSize));
    c.auto_reconnect = bool_arg(st, "auto_reconnect", true);
    c.seed = seed_ * 1000 + gateway_count_++;
    tb_.start_gateway(name, c);
    roles_[name] = c.role;
  }

  void attach(const Step& st) {
    auto& gw = tb_.gateway(*st.arg("gateway"));
    const auto ctids = split_list(*st.arg("ctid"));
    const auto cycles = int_arg(st, "cycles", 1);
    const bool remove = bool_arg(st, "remove", false);
    const auto expect = str_arg(st, "expect", "commissioned");
    for (std::int64_t i = 0; i < cycles; ++i) {
      for (const auto& raw : ctids) {
        const auto ctid = ctid_arg(st, raw);
        const auto t0 = Clock::now();
        auto f = gw.attach_device(ctid);
        if (f.wait_for(std::chrono::seconds(5)) != std::future_status::ready)
          fail(st, "attach of " + raw + " did not resolve");
        const auto outcome = f.get();
        if (expect != to_string(outcome))
          fail(st, "attach of " + raw + " resolved " + to_string(outcome) + ", expected " + expect);
        const double setup = ms_since(t0);
        if (outcome != AttachOutcome::commissioned) continue;
        report_.distributions["wire_setup_ms"].add(setup);
        if (!remove) continue;
        const auto t1 = Clock::now();
        auto d = gw.detach_device(ctid);
        if (d.wait_for(std::chrono::seconds(5)) != std::future_status::ready || !d.get())
          fail(st, "detach of " + raw + " did not complete");
        report_.distributions["wire_remove_ms"].add(ms_since(t1));
        report_.distributions["wire_cycle_ms"].add(ms_since(t0));
      }
    }
  }

  void record_outcome(DeliveryOutcome o) {
    if (o == DeliveryOutcome::delivered) ++report_.packets_delivered;
    else ++report_.packets_lost;
  }

  void transmit(const Step& st) {
    const auto& name = *st.arg("gateway");
    auto& gw = tb_.gateway(name);
    const auto ctid = ctid_arg(st, *st.arg("ctid"));
    const auto count = int_arg(st, "count", 1);
    const auto size = static_cast<std::size_t>(int_arg(st, "size", 64));
    const auto interval = std::chrono::milliseconds(int_arg(st, "interval_ms", 0));
    const bool wait = bool_arg(st, "wait", true);
    const auto expect = str_arg(st, "expect");
    const auto timeout = gw.config().report_timeout + std::chrono::seconds(1);
    auto& sent = sent_[{ctid, roles_.at(name)}];
    for (std::int64_t i = 0; i < count; ++i) {
      auto payload = make_payload(seed_, ctid, next_index_[{ctid, roles_.at(name)}]++, size);
      const auto t0 = Clock::now();
      std::future<DeliveryOutcome> f;
      try {
        f = gw.transmit(ctid, payload);
      } catch (const Error& e) {
        fail(st, std::string("transmit refused locally: ") + e.what());
      }
      ++report_.packets_sent;
      sent.push_back(std::move(payload));
      if (wait) {
        if (f.wait_for(timeout) != std::future_status::ready) fail(st, "delivery report never resolved");
        const auto o = f.get();
        record_outcome(o);
        if (o == DeliveryOutcome::delivered) report_.distributions["transfer_rtt_ms"].add(ms_since(t0));
        if (!expect.empty() && expect != to_string(o))
          fail(st, "packet " + std::to_string(i) + " resolved " + to_string(o) + ", expected " + expect);
      } else {
        outstanding_.push_back(std::move(f));
      }
      if (interval.count() > 0) std::this_thread::sleep_for(interval);
    }
  }

  void settle(std::chrono::milliseconds extra) {
    std::vector<std::future<DeliveryOutcome>> left;
    const auto deadline = Clock::now() + std::chrono::milliseconds(3000) + extra;
    for (auto& f : outstanding_) {
      if (f.wait_until(deadline) == std::future_status::ready) {
        record_outcome(f.get());
      } else {
        left.push_back(std::move(f));
      }
    }
    outstanding_ = std::move(left);
  }

  void expect_data(const Step& st) {
    const auto& name = *st.arg("gateway");
    const auto ctid = ctid_arg(st, *st.arg("ctid"));
    const Role from = roles_.at(name) == Role::lgw ? Role::asgw : Role::lgw;
    const auto& expected = sent_[{ctid, from}];
    const auto want = static_cast<std::size_t>(int_arg(st, "count", static_cast<std::int64_t>(expected.size())));
    auto& rec = tb_.recorder(name);
    rec.wait_for([&] { return rec.data_count(ctid) >= want; },
                 std::chrono::milliseconds(int_arg(st, "timeout_ms", 5000)));
    // Give stray duplicates a moment to show up.
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    const auto got = rec.data(ctid);
    if (got.size() != want)
      fail(st, name + " received " + std::to_string(got.size()) + " packets on " + ctid.str() + ", expected " +
                   std::to_string(want));
    if (want == expected.size()) {
      for (std::size_t i = 0; i < got.size(); ++i) {
        if (got[i].payload != expected[i]) {
          auto pos = std::find(expected.begin(), expected.end(), got[i].payload);
          fail(st, "packet " + std::to_string(i) + " on " + ctid.str() + " is " +
                       (pos == expected.end() ? std::string("unknown")
                                              : "transmit #" + std::to_string(pos - expected.begin())) +
                       " (out of order, duplicated or lost)");
        }
      }
      report_.values["exactly_once_in_order"] = 1;
    }
  }

  void expect_event(const Step& st) {
    const auto& name = *st.arg("gateway");
    const auto kind = *parse_event_kind(*st.arg("kind"));
    const auto count = static_cast<std::size_t>(int_arg(st, "count", 1));
    const auto within = int_arg(st, "within_ms", 2000);
    std::optional<Ctid> ctid;
    if (const auto* c = st.arg("ctid")) ctid = ctid_arg(st, *c);
    auto& rec = tb_.recorder(name);
    const auto since = fault_ts_;
    const auto deadline = since + within;
    const auto left = std::max<std::int64_t>(0, deadline - net::steady_now_ms());
    rec.wait_for([&] { return rec.count_events(kind, since, ctid) >= count; }, std::chrono::milliseconds(left));
    std::vector<std::int64_t> stamps;
    for (const auto& e : rec.events())
      if (e.kind == kind && e.ts >= since && (!ctid || e.ctid == ctid)) stamps.push_back(e.ts);
    if (stamps.size() < count || stamps[count - 1] > deadline)
      fail(st, name + " saw " + std::to_string(stamps.size()) + " " + to_string(kind) + " event(s) within " +
                   std::to_string(within) + " ms, expected " + std::to_string(count));
    report_.values[name + "." + to_string(kind) + "_ms"] = static_cast<double>(stamps[count - 1] - since);
  }

  void kill_link(const Step& st) {
    const auto& target = *st.arg("target");
    const auto sid = tb_.session_of(target);
    fault_ts_ = net::steady_now_ms();
    tb_.inject_fault(FaultKind::kill_link, target);
    if (sid) kills_.push_back({*sid, fault_ts_});
  }

  std::set<Ctid> provider_view() {
    std::set<Ctid> out;
    for (const auto& [n, r] : roles_) {
      if (r != Role::asgw) continue;
      auto& gw = tb_.gateway(n);
      if (gw.state() == GatewayState::Closed) continue;
      auto s = gw.ctids();
      out.insert(s.begin(), s.end());
    }
    return out;
  }

  std::uint64_t seq_gaps() {
    std::uint64_t n = 0;
    for (const auto& [name, r] : roles_) n += tb_.gateway(name).stats().seq_gaps;
    return n;
  }

  void switch_endpoint(const Step& st) {
    const auto& target = *st.arg("target");
    auto& gw = tb_.gateway(target);
    const auto access = str_arg(st, "access").empty() ? gw.config().access : *parse_access(*st.arg("access"));
    const auto local = str_arg(st, "local", "127.0.0.2");
    const bool lgw = roles_.at(target) == Role::lgw;
    const auto before = provider_view();
    const auto gaps_before = seq_gaps();
    fault_ts_ = net::steady_now_ms();
    tb_.inject_fault(FaultKind::switch_endpoint, target, access, local);
    const auto ch = gw.channel();
    report_.values["secure_channel"] =
        (ch && ch->security == Security::secure && gw.secure_transport()) ? 1 : 0;
    report_.values["seq_gaps_before_switch"] = static_cast<double>(gaps_before);
    if (!lgw) return;
    // Providers must not notice: same ctids, and no wire went down meanwhile.
    const bool same = provider_view() == before;
    std::size_t notices = 0;
    for (const auto& [n, r] : roles_) {
      if (r != Role::asgw) continue;
      auto& rec = tb_.recorder(n);
      notices += rec.count_events(GatewayEventKind::PeerDown, fault_ts_) +
                 rec.count_events(GatewayEventKind::Decommissioned, fault_ts_) +
                 rec.count_events(GatewayEventKind::PeerUp, fault_ts_);
    }
    report_.values["ctids_preserved"] = same && notices == 0 ? 1 : 0;
    report_.values["provider_wire_notices"] = static_cast<double>(notices);
    if (!same) report_.notes.push_back("provider-visible ctid set changed across switch_endpoint on " + target);
  }

  void stop_gateway(const Step& st) {
    const auto& name = *st.arg("name");
    auto& gw = tb_.gateway(name);
    const auto mode = str_arg(st, "mode", "clean");
    fault_ts_ = net::steady_now_ms();
    if (mode == "kill") {
      tb_.inject_fault(FaultKind::kill_process, name);
      return;
    }
    if (mode != "clean") fail(st, "mode must be clean or kill");
    const auto sid = tb_.session_of(name);
    const auto ctids = gw.ctids();
    const auto since = net::steady_now_ms();
    gw.close();
    if (roles_.at(name) != Role::lgw || !sid) return;
    std::vector<std::string> providers;
    for (const auto& [n, r] : roles_)
      if (r == Role::asgw) providers.push_back(n);
    report_.teardown_clean = check_teardown(tb_, *sid, ctids, since, providers, report_.notes);
    report_.values["teardown_wires"] = static_cast<double>(ctids.size());
  }

  void assert_metric(const Step& st) {
    finalize();
    const auto c = parse_comparison(st.rest);
    if (!c) fail(st, "expression needs '<metric> <op> <number>'");
    const auto lhs = report_.metric(c->metric);
    if (!lhs) fail(st, "metric " + std::string(c->metric) + " is not available");
    bool ok = false;
    if (c->op == "<=") ok = *lhs <= c->rhs;
    else if (c->op == ">=") ok = *lhs >= c->rhs;
    else if (c->op == "==") ok = *lhs == c->rhs;
    else if (c->op == "!=") ok = *lhs != c->rhs;
    else if (c->op == "<") ok = *lhs < c->rhs;
    else ok = *lhs > c->rhs;
    if (!ok)
      fail(st, std::string(c->metric) + " = " + fmt_double(*lhs) + ", expected " + std::string(c->op) + " " +
                   fmt_double(c->rhs));
  }

  void finalize() {
    report_.packets_in_flight = outstanding_.size();
    if (!kills_.empty() && tb_.has_broker()) {
      const auto& k = kills_.back();
      for (const auto& e : tb_.events()) {
        if (e.kind == "session_lost" && e.session == k.session && e.ts >= k.ts) {
          report_.watchdog_detect_ms = static_cast<double>(e.ts - k.ts);
          break;
        }
      }
      report_.values["watchdog_bound_ms"] =
          static_cast<double>(broker_cfg_.keepalive_interval_ms * broker_cfg_.keepalive_misses + broker_cfg_.tick_ms);
    }
    if (!roles_.empty()) report_.values["seq_gaps"] = static_cast<double>(seq_gaps());
    report_.values["conservation_ok"] = report_.conserved() ? 1 : 0;
  }

  struct Kill {
    SessionId session;
    std::int64_t ts;
  };

  const Scenario& sc_;
  std::uint64_t seed_;
  Testbed tb_;
  MetricsReport report_;
  BrokerConfig broker_cfg_;
  std::map<std::string, Role> roles_;
  std::map<std::pair<Ctid, Role>, std::vector<std::string>> sent_;
  std::map<std::pair<Ctid, Role>, std::uint64_t> next_index_;
  std::vector<std::future<DeliveryOutcome>> outstanding_;
  std::vector<Kill> kills_;
  std::int64_t started_ = 0;
  std::int64_t fault_ts_ = 0;
  std::uint64_t gateway_count_ = 0;
};

}  // namespace

MetricsReport run_scenario(const Scenario& scenario, std::uint64_t seed) {
  Runner r(scenario, seed);
  return r.run();
}

// ---------------------------------------------------------------------------
// Smart home

namespace {

constexpr const char* kHomeSubscriber = "sip:home-1@lgw.msbc";

struct ProviderSpec {
  const char* id;
  std::vector<const char*> patterns;
};

const std::vector<ProviderSpec>& home_providers() {
  static const std::vector<ProviderSpec> p{
      {"health", {"heart-*"}},
      {"home-automation", {"light-*", "fan-*", "thermo-*"}},
      {"utility", {"meter-*"}},
      {"grocery", {"milk-*"}},
      {"security", {"door-*", "camera-*"}},
  };
  return p;
}

const std::vector<std::pair<const char*, const char*>>& home_devices() {
  static const std::vector<std::pair<const char*, const char*>> d{
      {"heart-1", "health"},         {"light-1", "home-automation"}, {"light-2", "home-automation"},
      {"light-3", "home-automation"}, {"fan-1", "home-automation"},   {"thermo-1", "home-automation"},
      {"meter-1", "utility"},         {"milk-1", "grocery"},          {"door-1", "security"},
      {"camera-1", "security"},
  };
  return d;
}

}  // namespace

MetricsReport simulate_smart_home(const SmartHomeOptions& options) {
  MetricsReport report;
  report.scenario = "smart_home";
  Testbed tb(options.seed);
  const auto failed = [&](const std::string& what) {
    auto excerpt = tb.event_excerpt();
    tb.shutdown();
    return ScenarioFailed(0, "smart_home", what, std::move(excerpt), report);
  };

  SubscriptionDirectory dir;
  for (const auto& p : home_providers()) {
    dir.add_provider(p.id, std::string("sip:") + p.id + "@providers.msbc");
    for (const auto* pattern : p.patterns) dir.add_rule(pattern, p.id);
  }
  dir.add_gateway(kHomeSubscriber);

  BrokerConfig bc;
  bc.signaling_endpoint = "127.0.0.1:0";
  bc.payload_endpoint = "127.0.0.1:0";
  bc.keepalive_interval_ms = 1000;
  tb.start_broker(bc, dir);

  std::uint64_t seed = options.seed * 1000;
  for (const auto& p : home_providers()) {
    GatewayConfig c;
    c.role = Role::asgw;
    c.subscriber = std::string("sip:") + p.id + "@providers.msbc";
    c.provider = p.id;
    c.keepalive_interval = std::chrono::milliseconds(1000);
    c.seed = ++seed;
    try {
      tb.start_gateway(p.id, c);
    } catch (const Error& e) {
      throw failed(std::string("provider ") + p.id + ": " + e.what());
    }
  }
  GatewayConfig home;
  home.role = Role::lgw;
  home.subscriber = kHomeSubscriber;
  home.keepalive_interval = std::chrono::milliseconds(1000);
  home.seed = ++seed;
  try {
    tb.start_gateway("home", home);
  } catch (const Error& e) {
    throw failed(std::string("home: ") + e.what());
  }
  auto& lgw = tb.gateway("home");

  for (const auto& [dev, provider] : home_devices()) {
    const auto t0 = Clock::now();
    auto f = lgw.attach_device(Ctid{dev});
    if (f.wait_for(std::chrono::seconds(5)) != std::future_status::ready || f.get() != AttachOutcome::commissioned)
      throw failed(std::string("device ") + dev + " was not commissioned");
    report.distributions["wire_setup_ms"].add(ms_since(t0));
  }
  Recorder waiter;
  waiter.wait_for(
      [&] {
        std::size_t n = 0;
        for (const auto& p : home_providers()) n += tb.gateway(p.id).ctids().size();
        return n == home_devices().size();
      },
      std::chrono::seconds(2));
  const auto active = tb.broker().inspect([](const Interconnect& core) {
    return std::count_if(core.wire_table().begin(), core.wire_table().end(),
                         [](const auto& kv) { return kv.second.state == WireState::Active; });
  });
  report.values["commissioned_wires"] = static_cast<double>(active);
  report.values["providers"] = static_cast<double>(home_providers().size());

  // Traffic: sensors report to their providers, home automation drives the
  // actuators. One period is one heart beat.
  struct Pending {
    std::future<DeliveryOutcome> f;
    Clock::time_point t0;
  };
  std::vector<Pending> pending;
  std::map<std::string, std::vector<std::string>> expected_up;    // ctid -> readings
  std::map<std::string, std::vector<std::string>> expected_down;  // ctid -> commands
  const auto send = [&](Gateway& gw, const char* ctid, std::string payload, bool up) {
    (up ? expected_up : expected_down)[ctid].push_back(payload);
    ++report.packets_sent;
    pending.push_back({gw.transmit(Ctid{ctid}, std::move(payload)), Clock::now()});
  };

  const auto periods = std::max<std::int64_t>(1, options.duration / options.heart_period);
  auto& automation = tb.gateway("home-automation");
  const char* actuators[] = {"light-1", "light-2", "light-3", "fan-1", "thermo-1"};
  std::mt19937 rng(static_cast<std::uint32_t>(options.seed));
  int milk = 4;
  auto next = Clock::now();
  for (std::int64_t n = 0; n < periods; ++n) {
    send(lgw, "heart-1", "bpm=" + std::to_string(60 + rng() % 40) + " n=" + std::to_string(n), true);
    if (n % 2 == 0) send(lgw, "meter-1", "kwh=" + std::to_string(1000 + n) + " n=" + std::to_string(n), true);
    if (n % 3 == 0) {
      milk = std::max(0, milk - static_cast<int>(rng() % 2));
      send(lgw, "milk-1", "bottles=" + std::to_string(milk) + " n=" + std::to_string(n), true);
    }
    if (n % 5 == 0) {
      send(lgw, "door-1", std::string(n % 10 == 0 ? "open" : "closed") + " n=" + std::to_string(n), true);
      std::string frame(512, '\0');
      for (auto& b : frame) b = static_cast<char>(rng() & 0xff);
      send(lgw, "camera-1", frame, true);
    }
    const char* target = actuators[n % 5];
    const std::string cmd = std::string(target).starts_with("thermo")
                                ? "set-point=" + std::to_string(19 + n % 4)
                                : std::string(n % 2 == 0 ? "on" : "off");
    send(automation, target, cmd + " n=" + std::to_string(n), false);
    next += options.heart_period;
    std::this_thread::sleep_until(next);
  }

  for (auto& p : pending) {
    if (p.f.wait_for(std::chrono::seconds(3)) != std::future_status::ready) {
      ++report.packets_in_flight;
      continue;
    }
    if (p.f.get() == DeliveryOutcome::delivered) {
      ++report.packets_delivered;
      report.distributions["transfer_rtt_ms"].add(ms_since(p.t0));
    } else {
      ++report.packets_lost;
    }
  }

  // Every stream arrives complete and in order at the other side.
  std::size_t bad_streams = 0;
  const auto check = [&](const std::string& who, const std::string& ctid, const std::vector<std::string>& want) {
    const auto got = tb.recorder(who).data(Ctid{ctid});
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) same = got[i].payload == want[i];
    if (!same) {
      ++bad_streams;
      report.notes.push_back(ctid + ": " + std::to_string(got.size()) + " of " + std::to_string(want.size()) +
                             " packets arrived in order at " + who);
    }
  };
  for (const auto& [dev, provider] : home_devices()) {
    if (auto it = expected_up.find(dev); it != expected_up.end()) check(provider, dev, it->second);
    if (auto it = expected_down.find(dev); it != expected_down.end()) check("home", dev, it->second);
  }
  report.values["heart_readings"] = static_cast<double>(tb.recorder("health").data_count(Ctid{"heart-1"}));
  std::size_t commands = 0;
  for (const auto* a : actuators) commands += tb.recorder("home").data_count(Ctid{a});
  report.values["commands_applied"] = static_cast<double>(commands);
  report.values["streams_out_of_order"] = static_cast<double>(bad_streams);

  const auto sid = tb.session_of("home");
  const auto ctids = lgw.ctids();
  const auto since = net::steady_now_ms();
  lgw.close();
  std::vector<std::string> providers;
  for (const auto& p : home_providers()) providers.emplace_back(p.id);
  if (sid) report.teardown_clean = check_teardown(tb, *sid, ctids, since, providers, report.notes);
  tb.shutdown();

  if (active < 8) throw failed("only " + std::to_string(active) + " wires commissioned");
  if (bad_streams > 0) throw failed(std::to_string(bad_streams) + " streams incomplete or out of order");
  if (report.values["heart_readings"] != static_cast<double>(periods))
    throw failed("health provider got " + fmt_double(report.values["heart_readings"]) + " readings, expected " +
                 std::to_string(periods));
  if (!report.conserved() || report.packets_lost > 0) throw failed("packets lost or unaccounted");
  if (report.teardown_clean && !*report.teardown_clean) throw failed("teardown left state behind");
  return report;
}

}  // namespace msbc::harness
