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

#include <condition_variable>
#include <mutex>
#include <thread>

#include "msbc/broker_server.hpp"
#include "msbc/gateway.hpp"

namespace msbc {
namespace {

using namespace std::chrono_literals;

class Collector : public Receiver {
 public:
  bool allow = true;

  void on_data(const Ctid& ctid, std::string_view data) override {
    std::lock_guard lock(mu_);
    data_.emplace_back(ctid.str(), std::string(data));
    cv_.notify_all();
  }
  void on_event(const GatewayEvent& e) override {
    std::lock_guard lock(mu_);
    events_.push_back(e);
    cv_.notify_all();
  }
  bool authorize(const Ctid&) override { return allow; }

  bool wait_data(std::size_t n, std::chrono::milliseconds t = 2s) {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, t, [&] { return data_.size() >= n; });
  }
  bool wait_event(GatewayEventKind k, std::chrono::milliseconds t = 2s) {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, t, [&] {
      for (const auto& e : events_)
        if (e.kind == k) return true;
      return false;
    });
  }
  std::vector<std::pair<std::string, std::string>> data() {
    std::lock_guard lock(mu_);
    return data_;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::pair<std::string, std::string>> data_;
  std::vector<GatewayEvent> events_;
};

SubscriptionDirectory directory() {
  SubscriptionDirectory d;
  d.add_provider("health", "sip:health@providers.msbc");
  d.add_provider("grocery", "sip:grocery@providers.msbc");
  d.add_gateway("sip:home@lgw.msbc");
  d.add_rule("heart-*", "health");
  d.add_rule("milk-*", "grocery");
  return d;
}

struct Rig : ::testing::Test {
  std::unique_ptr<BrokerServer> broker;
  std::shared_ptr<Collector> home_rx = std::make_shared<Collector>();
  std::shared_ptr<Collector> health_rx = std::make_shared<Collector>();
  std::unique_ptr<Gateway> home;
  std::unique_ptr<Gateway> health;

  void SetUp() override {
    BrokerConfig c;
    c.signaling_endpoint = "127.0.0.1:0";
    c.payload_endpoint = "127.0.0.1:0";
    c.keepalive_interval_ms = 500;
    c.tick_ms = 10;
    broker = std::make_unique<BrokerServer>(c, directory());
    broker->start();
    health = Gateway::open(config(Role::asgw, "sip:health@providers.msbc", "health"), health_rx);
    home = Gateway::open(config(Role::lgw, "sip:home@lgw.msbc"), home_rx);
    ASSERT_TRUE(health->wait_open(2s)) << (health->last_error() ? to_string(*health->last_error()) : "none");
    ASSERT_TRUE(home->wait_open(2s)) << (home->last_error() ? to_string(*home->last_error()) : "none");
  }

  void TearDown() override {
    if (home) home->close();
    if (health) health->close();
    broker->stop();
  }

  GatewayConfig config(Role role, std::string subscriber, std::optional<std::string> provider = std::nullopt) {
    GatewayConfig g;
    g.role = role;
    g.subscriber = std::move(subscriber);
    g.provider = std::move(provider);
    g.broker_signaling_endpoint = broker->signaling_endpoint().str();
    g.keepalive_interval = 500ms;
    g.reconnect_backoff.initial = 20ms;
    return g;
  }

  std::size_t live_wires() {
    return broker->inspect([](const Interconnect& core) {
      std::size_t n = 0;
      for (const auto& [id, e] : core.wire_table())
        if (e.state != WireState::Released) ++n;
      return n;
    });
  }
};

template <typename F>
Errc error_code(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::InvalidFrame;
}

TEST(Backoff, Doubles) {
  Backoff b;
  EXPECT_EQ(b.delay(0), 100ms);
  EXPECT_EQ(b.delay(1), 200ms);
  EXPECT_EQ(b.delay(5), 3200ms);
  EXPECT_EQ(b.delay(6), 5000ms);
  EXPECT_EQ(b.delay(1000), 5000ms);
}

TEST(GatewayConfig, Validation) {
  GatewayConfig g;
  g.subscriber = "sip:home@lgw.msbc";
  EXPECT_NO_THROW(g.validate());
  g.role = Role::asgw;
  EXPECT_THROW(g.validate(), Error);
  g.provider = "health";
  g.max_frame_size = 10;
  EXPECT_THROW(g.validate(), Error);
}

TEST(Gateway, UnreachableBrokerNeverOpens) {
  GatewayConfig g;
  g.subscriber = "sip:home@lgw.msbc";
  g.broker_signaling_endpoint = "127.0.0.1:1";
  g.auto_reconnect = false;
  auto gw = Gateway::open(g, std::make_shared<Collector>());
  EXPECT_FALSE(gw->wait_open(300ms));
  EXPECT_EQ(error_code([&] { gw->transmit(Ctid{"heart-1"}, "x"); }), Errc::NotOpen);
  gw->close();
  EXPECT_EQ(gw->state(), GatewayState::Closed);
}

TEST_F(Rig, TransmitBothWays) {
  ASSERT_EQ(home->attach_device(Ctid{"heart-1"}).get(), AttachOutcome::commissioned);
  EXPECT_EQ(home->transmit(Ctid{"heart-1"}, "bpm=70").get(), DeliveryOutcome::delivered);
  ASSERT_TRUE(health_rx->wait_data(1));
  EXPECT_EQ(health_rx->data()[0], (std::pair<std::string, std::string>{"heart-1", "bpm=70"}));
  EXPECT_EQ(health->ctids(), std::set<Ctid>{Ctid{"heart-1"}});
  EXPECT_EQ(health->transmit(Ctid{"heart-1"}, "slow down").get(), DeliveryOutcome::delivered);
  ASSERT_TRUE(home_rx->wait_data(1));
  EXPECT_EQ(home_rx->data()[0].second, "slow down");
  EXPECT_EQ(home->stats().delivered, 1u);
  EXPECT_EQ(health->stats().seq_gaps, 0u);
}

TEST_F(Rig, AttachErrors) {
  ASSERT_EQ(home->attach_device(Ctid{"heart-1"}).get(), AttachOutcome::commissioned);
  EXPECT_EQ(error_code([&] { home->attach_device(Ctid{"heart-1"}); }), Errc::AlreadyAttached);
  EXPECT_EQ(error_code([&] { home->transmit(Ctid{"heart-2"}, "x"); }), Errc::NotCommissioned);
  EXPECT_EQ(error_code([&] { home->detach_device(Ctid{"heart-2"}); }), Errc::NotCommissioned);
  EXPECT_EQ(error_code([&] { home->transmit(Ctid{"heart-1"}, std::string(kDefaultFrameSize + 1, 'x')); }),
            Errc::FrameTooLarge);
  EXPECT_EQ(error_code([&] { health->attach_device(Ctid{"heart-9"}); }), Errc::InvalidConfig);
  EXPECT_EQ(home->attach_device(Ctid{"milk-1"}).get(), AttachOutcome::provider_unavailable);
  EXPECT_EQ(home->attach_device(Ctid{"toaster"}).get(), AttachOutcome::denied);
}

TEST_F(Rig, ProviderRefusal) {
  health_rx->allow = false;
  EXPECT_EQ(home->attach_device(Ctid{"heart-1"}).get(), AttachOutcome::denied);
  EXPECT_TRUE(home->ctids().empty());
  EXPECT_EQ(live_wires(), 0u);
}

TEST_F(Rig, DetachTellsProvider) {
  ASSERT_EQ(home->attach_device(Ctid{"heart-1"}).get(), AttachOutcome::commissioned);
  EXPECT_TRUE(home->detach_device(Ctid{"heart-1"}).get());
  EXPECT_TRUE(health_rx->wait_event(GatewayEventKind::Decommissioned));
  EXPECT_TRUE(home->ctids().empty());
}

TEST_F(Rig, CloseIsIdempotentAndReleasesWires) {
  ASSERT_EQ(home->attach_device(Ctid{"heart-1"}).get(), AttachOutcome::commissioned);
  ASSERT_EQ(home->attach_device(Ctid{"heart-2"}).get(), AttachOutcome::commissioned);
  home->close();
  home->close();
  EXPECT_EQ(home->state(), GatewayState::Closed);
  EXPECT_TRUE(health_rx->wait_event(GatewayEventKind::Decommissioned));
  for (int i = 0; i < 100 && live_wires() != 0; ++i) std::this_thread::sleep_for(10ms);
  EXPECT_EQ(live_wires(), 0u);
  EXPECT_EQ(error_code([&] { home->transmit(Ctid{"heart-1"}, "x"); }), Errc::NotOpen);
}

TEST_F(Rig, ProviderReconnectDeliversBufferedTraffic) {
  ASSERT_EQ(home->attach_device(Ctid{"heart-1"}).get(), AttachOutcome::commissioned);
  health->drop_connection();
  for (int i = 0; i < 50 && broker->inspect([](const Interconnect& c) {
                              return !c.live_provider_session("health").has_value();
                            }) == false;
       ++i)
    std::this_thread::sleep_for(10ms);
  std::vector<std::future<DeliveryOutcome>> pending;
  for (int i = 0; i < 10; ++i) pending.push_back(home->transmit(Ctid{"heart-1"}, "m" + std::to_string(i)));
  ASSERT_TRUE(health->reconnect().get());
  for (auto& f : pending) EXPECT_EQ(f.get(), DeliveryOutcome::delivered);
  ASSERT_TRUE(health_rx->wait_data(10));
  const auto got = health_rx->data();
  for (int i = 0; i < 10; ++i) EXPECT_EQ(got[i].second, "m" + std::to_string(i));
  EXPECT_EQ(health->stats().seq_gaps, 0u);
}

TEST_F(Rig, LocalSwitchKeepsDevices) {
  ASSERT_EQ(home->attach_device(Ctid{"heart-1"}).get(), AttachOutcome::commissioned);
  ASSERT_TRUE(home->switch_endpoint(AccessType::internet, "127.0.0.2").get());
  EXPECT_TRUE(home->secure_transport());
  EXPECT_EQ(home->ctids(), std::set<Ctid>{Ctid{"heart-1"}});
  EXPECT_EQ(home->transmit(Ctid{"heart-1"}, "after").get(), DeliveryOutcome::delivered);
  EXPECT_FALSE(health_rx->wait_event(GatewayEventKind::PeerDown, 100ms));
}

}  // namespace
}  // namespace msbc
