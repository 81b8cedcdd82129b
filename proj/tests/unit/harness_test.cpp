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

#include <gtest/gtest.h>

#include "msbc/harness.hpp"

namespace msbc::harness {
namespace {

const std::string kHeader =
    "scenario small\n"
    "directory provider health subscriber=sip:health@providers.msbc\n"
    "directory gateway sip:home@lgw.msbc\n"
    "directory rule heart-* -> health\n"
    "step start_broker keepalive_interval_ms=500\n"
    "step start_gateway name=health role=asgw subscriber=sip:health@providers.msbc provider=health\n"
    "step start_gateway name=home role=lgw subscriber=sip:home@lgw.msbc\n";

TEST(Distribution, MedianAndPercentile) {
  Distribution d;
  for (double v : {5.0, 1.0, 3.0, 2.0}) d.add(v);
  EXPECT_DOUBLE_EQ(d.median(), 2.5);
  EXPECT_DOUBLE_EQ(d.min(), 1.0);
  EXPECT_DOUBLE_EQ(d.max(), 5.0);
  d.add(4.0);
  EXPECT_DOUBLE_EQ(d.median(), 3.0);
  Distribution h;
  for (int i = 1; i <= 100; ++i) h.add(i);
  EXPECT_DOUBLE_EQ(h.percentile(95), 95.0);
  EXPECT_DOUBLE_EQ(h.percentile(100), 100.0);
  EXPECT_DOUBLE_EQ(h.percentile(0.5), 1.0);
  EXPECT_THROW(Distribution{}.median(), Error);
}

TEST(Metrics, Lookup) {
  MetricsReport r;
  r.distributions["transfer_rtt_ms"].add(2);
  r.distributions["transfer_rtt_ms"].add(4);
  r.values["seq_gaps"] = 0;
  r.packets_sent = 3;
  r.packets_delivered = 2;
  r.packets_lost = 1;
  EXPECT_EQ(r.metric("median(transfer_rtt_ms)"), 3.0);
  EXPECT_EQ(r.metric("count(transfer_rtt_ms)"), 2.0);
  EXPECT_EQ(r.metric("max(transfer_rtt_ms)"), 4.0);
  EXPECT_EQ(r.metric("seq_gaps"), 0.0);
  EXPECT_EQ(r.metric("packets_lost"), 1.0);
  EXPECT_EQ(r.metric("median(nothing)"), std::nullopt);
  EXPECT_TRUE(r.conserved());
  EXPECT_NE(r.format().find("seq_gaps=0"), std::string::npos);
}

TEST(Payload, Deterministic) {
  const Ctid c{"heart-1"};
  EXPECT_EQ(make_payload(7, c, 3, 256), make_payload(7, c, 3, 256));
  EXPECT_NE(make_payload(7, c, 3, 256), make_payload(8, c, 3, 256));
  EXPECT_NE(make_payload(7, c, 3, 256), make_payload(7, c, 4, 256));
  EXPECT_EQ(make_payload(7, c, 3, 256).size(), 256u);
}

TEST(Parse, Valid) {
  const auto s = parse_scenario(kHeader + "step attach gateway=home ctid=heart-1\n");
  EXPECT_EQ(s.name, "small");
  ASSERT_EQ(s.steps.size(), 4u);
  EXPECT_EQ(s.steps[3].verb, "attach");
  EXPECT_EQ(*s.steps[3].arg("ctid"), "heart-1");
  EXPECT_EQ(s.steps[3].line, 8u);
}

TEST(Parse, Errors) {
  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      parse_scenario(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of(kHeader + "step teleport gateway=home\n"), 8u);
  EXPECT_EQ(line_of(kHeader + "step attach gateway=home\n"), 8u);
  EXPECT_EQ(line_of(kHeader + "step attach gateway=nobody ctid=heart-1\n"), 8u);
  EXPECT_EQ(line_of(kHeader + "step start_gateway name=x role=king subscriber=a\n"), 8u);
  EXPECT_EQ(line_of(kHeader + "step assert_metric packets_lost\n"), 8u);
  EXPECT_EQ(line_of(kHeader + "step assert_metric packets_lost < lots\n"), 8u);
  EXPECT_EQ(line_of("scenario x\ndirectory rule a-* -> nobody\n"), 2u);
}

TEST(Run, EmptyScenario) {
  const auto r = run_scenario(parse_scenario("scenario empty\n"));
  EXPECT_EQ(r.packets_sent, 0u);
  EXPECT_TRUE(r.conserved());
}

TEST(Run, FailedExpectationNamesTheLine) {
  const auto s = parse_scenario(kHeader +
                                "step attach gateway=home ctid=heart-1\n"
                                "step transmit gateway=home ctid=heart-1 count=5 size=16\n"
                                "step assert_metric packets_lost > 0\n");
  try {
    run_scenario(s);
    FAIL();
  } catch (const ScenarioFailed& f) {
    EXPECT_EQ(f.line(), 10u);
    EXPECT_TRUE(f.step().starts_with("assert_metric")) << f.step();
    EXPECT_EQ(f.report().packets_sent, 5u);
  }
}

TEST(Run, SameSeedSameTraffic) {
  const auto s = parse_scenario(kHeader +
                                "step attach gateway=home ctid=heart-1\n"
                                "step transmit gateway=home ctid=heart-1 count=20 size=64\n"
                                "step transmit gateway=health ctid=heart-1 count=5 size=32\n"
                                "step expect_data gateway=health ctid=heart-1 count=20\n");
  const auto a = run_scenario(s, 42);
  const auto b = run_scenario(s, 42);
  EXPECT_EQ(a.packets_sent, 25u);
  EXPECT_EQ(a.packets_delivered, b.packets_delivered);
  EXPECT_EQ(a.packets_lost, 0u);
  EXPECT_EQ(a.metric("seq_gaps"), 0.0);
  EXPECT_EQ(a.metric("conservation_ok"), 1.0);
}

TEST(SmartHome, ShortRun) {
  SmartHomeOptions o;
  o.duration = std::chrono::milliseconds(1500);
  o.heart_period = std::chrono::milliseconds(100);
  const auto r = simulate_smart_home(o);
  EXPECT_GT(r.packets_sent, 10u);
  EXPECT_EQ(r.packets_lost, 0u);
  EXPECT_TRUE(r.conserved());
  EXPECT_EQ(r.teardown_clean, true);
}

}  // namespace
}  // namespace msbc::harness
