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

// Acceptance run. One PASS/FAIL line per criterion; exit status 1 if any fail.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include <spdlog/spdlog.h>

#include "dialogs.hpp"
#include "msbc/directory.hpp"
#include "msbc/harness.hpp"
#include "msbc/session.hpp"
#include "msbc/wire_protocol.hpp"
#include "oracles.hpp"
#include "route_oracle.hpp"

namespace msbc {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      if (!failed_.empty()) failed_ += "; ";
      failed_ += what;
    }
  }
  Outcome done(std::string detail) const {
    return {pass_, pass_ ? std::move(detail) : failed_ + " (" + detail + ")"};
  }

 private:
  bool pass_ = true;
  std::string failed_;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

double metric_or(const harness::MetricsReport& r, const std::string& name, double fallback) {
  return r.metric(name).value_or(fallback);
}

harness::MetricsReport run(const std::string& file) {
  return harness::run_scenario(harness::load_scenario(std::string(MSBC_SCENARIO_DIR) + "/" + file), 1);
}

Outcome add_remove() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run("add_remove_ct.scn");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double median = metric_or(r, "median(wire_cycle_ms)", 1e9);
  Checks c;
  c.expect(metric_or(r, "count(wire_cycle_ms)", 0) == 100, "100 cycles");
  c.expect(median < 75, "median establish+remove < 75 ms");
  c.expect(secs < 30, "runtime < 30 s");
  return c.done("median cycle " + num(median) + " ms, runtime " + num(secs) + " s");
}

Outcome transfer() {
  const auto r = run("transfer.scn");
  const double median = metric_or(r, "median(transfer_rtt_ms)", 1e9);
  Checks c;
  c.expect(metric_or(r, "count(transfer_rtt_ms)", 0) == 1000, "1000 reports");
  c.expect(median < 50, "median transmit->report < 50 ms");
  c.expect(r.packets_lost == 0 && r.packets_delivered == r.packets_sent, "zero losses");
  return c.done("median " + num(median) + " ms, " + std::to_string(r.packets_delivered) + "/" +
                std::to_string(r.packets_sent) + " delivered");
}

Outcome clean_shutdown() {
  const auto r = run("clean_shutdown.scn");
  Checks c;
  c.expect(r.teardown_clean == true, "wires released, DECOMMISSIONED per ctid, no orphans");
  c.expect(metric_or(r, "teardown_wires", 0) == 5, "5 active wires at close");
  std::string notes;
  for (const auto& n : r.notes) notes += " " + n;
  return c.done("5 wires released and acknowledged" + notes);
}

Outcome watchdog() {
  const auto r = run("watchdog.scn");
  Checks c;
  const double detect = r.watchdog_detect_ms.value_or(1e9);
  const double bound = metric_or(r, "watchdog_bound_ms", 0);
  std::string worst;
  double worst_ms = 0;
  int providers = 0;
  for (const auto& [name, v] : r.values) {
    if (!name.ends_with(".PeerDown_ms")) continue;
    ++providers;
    if (v >= worst_ms) {
      worst_ms = v;
      worst = name;
    }
  }
  c.expect(providers == 3, "PEER-DOWN seen by all 3 providers");
  c.expect(providers > 0 && worst_ms <= 1000, "PEER-DOWN within 1 s");
  c.expect(bound > 0 && detect <= bound, "detection within interval x misses + one tick");
  return c.done("detected after " + num(detect) + " ms (bound " + num(bound) + "), slowest PEER-DOWN " +
                num(worst_ms) + " ms");
}

Outcome access_switch() {
  const auto r = run("access_switch.scn");
  Checks c;
  c.expect(metric_or(r, "ctids_preserved", 0) == 1, "provider-visible ctids unchanged");
  c.expect(metric_or(r, "seq_gaps", 1) == 0, "post-switch traffic seq-contiguous");
  c.expect(metric_or(r, "secure_channel", 0) == 1, "internet access gives secure channel");
  return c.done("ctids preserved, 0 seq gaps, secure channel");
}

Outcome migration() {
  const auto r = run("as_migration.scn");
  Checks c;
  c.expect(r.packets_lost == 0, "no losses");
  c.expect(r.conserved() && metric_or(r, "conservation_ok", 0) == 1, "conservation");
  c.expect(metric_or(r, "seq_gaps", 1) == 0, "in order");
  c.expect(r.packets_delivered == r.packets_sent, "all delivered exactly once");
  return c.done(std::to_string(r.packets_delivered) + "/" + std::to_string(r.packets_sent) +
                " delivered once in order, conserved");
}

Outcome codec() {
  Checks c;
  oracle::FrameGen gen(7001);
  std::size_t roundtrips = 0;
  for (int i = 0; i < 20000; ++i) {
    const auto f = gen.frame();
    const auto bytes = encode_frame(f);
    if (bytes != oracle::assemble_frame(f)) {
      c.expect(false, "encoding matches independent assembler");
      break;
    }
    const auto back = decode_stream(bytes);
    if (back.frames.size() != 1 || back.frames[0] != f || back.consumed != bytes.size()) {
      c.expect(false, "decode(encode(f)) == f");
      break;
    }
    ++roundtrips;
  }
  for (int round = 0; round < 500; ++round) {
    std::string stream;
    std::vector<Frame> frames;
    for (std::uint64_t i = 0, n = 1 + gen.below(8); i < n; ++i) {
      frames.push_back(gen.frame());
      stream += encode_frame(frames.back());
    }
    StreamDecoder dec;
    std::vector<Frame> chunked;
    for (std::size_t pos = 0; pos < stream.size();) {
      const auto len = std::min<std::size_t>(stream.size() - pos, 1 + gen.below(round % 2 ? 4 : 300));
      for (auto& f : dec.feed(std::string_view(stream).substr(pos, len))) chunked.push_back(std::move(f));
      pos += len;
    }
    if (chunked != frames || decode_stream(stream).frames != frames) {
      c.expect(false, "chunked decode equals whole decode");
      break;
    }
  }
  const std::string valid = [&] {
    std::string s;
    for (int i = 0; i < 20; ++i) s += encode_frame(gen.frame());
    return s;
  }();
  std::size_t fuzzed = 0;
  std::size_t rejected = 0;
  for (int i = 0; i < 100000; ++i) {
    std::string input;
    if (i % 2 == 0) {
      input = gen.payload(300);
    } else {
      input = valid.substr(gen.below(valid.size()), gen.below(800));
      for (int m = 0; m < 4 && !input.empty(); ++m) input[gen.below(input.size())] = static_cast<char>(gen.below(256));
    }
    try {
      StreamDecoder dec;
      for (std::size_t pos = 0; pos < input.size();) {
        const auto len = 1 + gen.below(64);
        dec.feed(std::string_view(input).substr(pos, len));
        pos += len;
      }
    } catch (const ProtocolViolation&) {
      ++rejected;
    }
    ++fuzzed;
  }
  return c.done(std::to_string(roundtrips) + " round-trips, 500 chunked streams, " + std::to_string(fuzzed) +
                " fuzz inputs (" + std::to_string(rejected) + " rejected cleanly)");
}

Outcome routing() {
  Checks c;
  std::mt19937_64 rng(4242);
  std::size_t lookups = 0;
  const std::string alphabet = "ab-1";
  auto word = [&](std::size_t max) {
    std::string s(1 + rng() % max, 'a');
    for (auto& ch : s) ch = alphabet[rng() % alphabet.size()];
    return s;
  };
  while (lookups < 10000) {
    SubscriptionDirectory dir;
    const int providers = 1 + static_cast<int>(rng() % 5);
    for (int p = 0; p < providers; ++p) dir.add_provider("p" + std::to_string(p), "sip:p" + std::to_string(p) + "@x");
    for (int i = 0, n = static_cast<int>(rng() % 12); i < n; ++i) {
      std::string pattern = word(5);
      if (rng() % 3 != 0) pattern += "*";
      try {
        dir.add_rule(pattern, "p" + std::to_string(rng() % providers));
      } catch (const Error&) {
      }
    }
    for (int i = 0; i < 10; ++i) {
      const auto probe = word(7);
      if (dir.lookup_provider(Ctid{probe}) != oracle::lookup(dir.rules(), probe)) {
        c.expect(false, "lookup_provider matches brute-force longest prefix (" + probe + ")");
        return c.done(std::to_string(lookups) + " lookups");
      }
      ++lookups;
    }
  }
  const auto r = route_oracle::run(20, 500, 99);
  c.expect(r.mismatches == 0, "route_packet matches table lookup: " + r.first_mismatch);
  c.expect(r.checked >= 10000, "10^4 routing probes");
  return c.done(std::to_string(lookups) + " provider lookups; " + std::to_string(r.checked) + " packets (" +
                std::to_string(r.forwarded) + " forwarded, " + std::to_string(r.buffered) + " buffered, " +
                std::to_string(r.rejected) + " reported)");
}

Outcome state_machine() {
  Checks c;
  std::size_t cells = 0;
  for (auto f : oracle::kAllFixtures) {
    for (auto k : oracle::kAllKinds) {
      TxnGenerator txns;
      const auto s = oracle::make_fixture(f, txns);
      const auto t = on_signal(s, oracle::make_kind(s, k, txns), 500, txns);
      const auto want = oracle::expected_transition(f, k);
      const auto cell = std::string(oracle::fixture_name(f)) + " x " + oracle::kind_name(k);
      c.expect(t.session.state == want.next, cell + " next state");
      c.expect(oracle::action_signature(t.actions) == want.actions, cell + " actions");
      ++cells;
    }
  }
  std::mt19937 rng(3);
  TxnGenerator txns;
  auto closed = oracle::make_fixture(oracle::Fixture::Closed, txns);
  for (int i = 0; i < 10000; ++i) {
    auto msg = oracle::make_kind(closed, oracle::kAllKinds[rng() % std::size(oracle::kAllKinds)], txns);
    msg.cseq = rng() % 6;
    const auto t = on_signal(closed, msg, i, txns);
    if (t.session.state != SessionState::Closed) {
      c.expect(false, "Closed is absorbing");
      break;
    }
    closed = t.session;
  }
  return c.done(std::to_string(cells) + " (state x message) cells, Closed absorbing over 10000 messages");
}

}  // namespace
}  // namespace msbc

int main() {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<std::string, std::function<msbc::Outcome()>>> criteria{
      {"add/remove connected thing", msbc::add_remove},
      {"transfer", msbc::transfer},
      {"clean shutdown", msbc::clean_shutdown},
      {"watchdog", msbc::watchdog},
      {"access switch", msbc::access_switch},
      {"application server migration", msbc::migration},
      {"codec properties", msbc::codec},
      {"routing oracle", msbc::routing},
      {"state machine totality", msbc::state_machine},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    msbc::Outcome o;
    try {
      o = criteria[i].second();
    } catch (const msbc::harness::ScenarioFailed& e) {
      o = {false, "line " + std::to_string(e.line()) + " '" + e.step() + "': " + e.expectation()};
    } catch (const std::exception& e) {
      o = {false, e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
