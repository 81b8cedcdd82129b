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

#include <random>

#include "dialogs.hpp"
#include "msbc/session.hpp"

namespace msbc {
namespace {

using oracle::Fixture;
using oracle::Kind;

TEST(MakeInvite, FieldMapping) {
  TxnGenerator txns;
  SessionFactory f(txns);
  SessionOffer offer;
  offer.payload_endpoint = "127.0.0.1:7000";
  auto [s, inv] = f.make_invite("house-01", Role::lgw, std::nullopt, AccessType::radio, offer, 5);
  EXPECT_EQ(s.state, SessionState::InviteSent);
  EXPECT_TRUE(inv.is_request);
  EXPECT_EQ(inv.method, Method::Invite);
  EXPECT_EQ(inv.cseq, 1u);
  EXPECT_EQ(inv.access, AccessType::radio);
  ASSERT_TRUE(inv.body);
  EXPECT_EQ(inv.body->role, Role::lgw);
  EXPECT_EQ(inv.from, "house-01");
  EXPECT_EQ(s.call_id, inv.call_id);
}

TEST(MakeInvite, AsgwNeedsProvider) {
  TxnGenerator txns;
  SessionFactory f(txns);
  SessionOffer offer;
  offer.payload_endpoint = "127.0.0.1:7000";
  EXPECT_THROW(f.make_invite("sip:x@y", Role::asgw, std::nullopt, AccessType::radio, offer, 0), Error);
}

TEST(MakeInvite, DistinctCallIds) {
  TxnGenerator txns;
  SessionFactory f(txns);
  SessionOffer offer;
  offer.payload_endpoint = "127.0.0.1:7000";
  std::set<std::string> ids;
  for (int i = 0; i < 1000; ++i)
    ids.insert(f.make_invite("a", Role::lgw, std::nullopt, AccessType::radio, offer, 0).second.call_id);
  EXPECT_EQ(ids.size(), 1000u);
}

TEST(AnswerOffer, Examples) {
  SessionOffer offer;
  offer.payload_endpoint = "127.0.0.1:7000";
  auto a = answer_offer(offer, AccessType::radio, AccessType::radio, 16384, "127.0.0.1:5061");
  EXPECT_EQ(a.security, Security::plain);
  EXPECT_EQ(a.max_frame_size, 16384u);
  EXPECT_EQ(a.payload_endpoint, "127.0.0.1:5061");
  EXPECT_EQ(answer_offer(offer, AccessType::internet, AccessType::radio, 16384, "h:1").security, Security::secure);
  EXPECT_EQ(answer_offer(offer, AccessType::radio, AccessType::radio, 8192, "h:1").max_frame_size, 8192u);
  EXPECT_THROW(answer_offer(offer, AccessType::radio, AccessType::radio, 63, "h:1"), Error);
}

TEST(AnswerOffer, AllAccessCombinations) {
  std::mt19937 rng(1);
  for (auto oa : {AccessType::radio, AccessType::internet}) {
    for (auto la : {AccessType::radio, AccessType::internet}) {
      for (int i = 0; i < 200; ++i) {
        SessionOffer offer;
        offer.payload_endpoint = "127.0.0.1:7000";
        offer.max_frame_size = kMinFrameSize + rng() % (kMaxFrameSize - kMinFrameSize + 1);
        const std::uint32_t local = kMinFrameSize + rng() % (kMaxFrameSize - kMinFrameSize + 1);
        const auto a = answer_offer(offer, oa, la, local, "h:1");
        const bool either_internet = oa == AccessType::internet || la == AccessType::internet;
        EXPECT_EQ(a.security == Security::secure, either_internet);
        EXPECT_LE(a.max_frame_size, offer.max_frame_size);
        EXPECT_LE(a.max_frame_size, local);
        EXPECT_EQ(a.max_frame_size, std::min(offer.max_frame_size, local));
      }
    }
  }
}

TEST(OnSignal, EstablishAndTeardown) {
  TxnGenerator txns;
  auto s = oracle::make_fixture(Fixture::InviteSent, txns);
  auto ok = oracle::make_kind(s, Kind::OkInvite, txns);
  auto t = on_signal(s, ok, 10, txns);
  EXPECT_EQ(t.session.state, SessionState::Established);
  EXPECT_TRUE(t.session.negotiated);
  EXPECT_EQ(oracle::action_signature(t.actions), "ACK+OPEN");
  EXPECT_EQ(t.session.last_activity, 10);

  auto bye = oracle::make_kind(t.session, Kind::Bye, txns);
  auto closed = on_signal(t.session, bye, 20, txns);
  EXPECT_EQ(closed.session.state, SessionState::Closed);
  EXPECT_FALSE(closed.session.negotiated);
  EXPECT_EQ(oracle::action_signature(closed.actions), "200");
}

TEST(OnSignal, MismatchedCallIdLeavesStateAlone) {
  TxnGenerator txns;
  auto s = oracle::make_fixture(Fixture::EstablishedClient, txns);
  auto msg = oracle::make_kind(s, Kind::Foreign, txns);
  auto t = on_signal(s, msg, 99, txns);
  EXPECT_EQ(t.session, s);
  EXPECT_EQ(oracle::action_signature(t.actions), "481");
}

// Every fixture against every message kind, compared with the table.
TEST(OnSignal, ExhaustiveTransitionTable) {
  for (auto f : oracle::kAllFixtures) {
    for (auto k : oracle::kAllKinds) {
      TxnGenerator txns;
      const auto s = oracle::make_fixture(f, txns);
      const auto msg = oracle::make_kind(s, k, txns);
      const auto t = on_signal(s, msg, 500, txns);
      const auto want = oracle::expected_transition(f, k);
      EXPECT_EQ(t.session.state, want.next) << oracle::fixture_name(f) << " x " << oracle::kind_name(k);
      EXPECT_EQ(oracle::action_signature(t.actions), want.actions)
          << oracle::fixture_name(f) << " x " << oracle::kind_name(k);
      EXPECT_EQ(t.session.negotiated.has_value(), t.session.state == SessionState::Established)
          << oracle::fixture_name(f) << " x " << oracle::kind_name(k);
    }
  }
}

TEST(OnSignal, ClosedIsAbsorbing) {
  std::mt19937 rng(8);
  TxnGenerator txns;
  auto s = oracle::make_fixture(Fixture::Closed, txns);
  for (int i = 0; i < 5000; ++i) {
    const auto k = oracle::kAllKinds[rng() % std::size(oracle::kAllKinds)];
    auto msg = oracle::make_kind(s, k, txns);
    msg.cseq = rng() % 5;
    auto t = on_signal(s, msg, i, txns);
    ASSERT_EQ(t.session.state, SessionState::Closed);
    for (const auto& a : t.actions) {
      const auto* send = std::get_if<action::SendSignal>(&a);
      ASSERT_NE(send, nullptr);
      ASSERT_FALSE(send->msg.is_request);
      ASSERT_TRUE(send->msg.status == 481 || send->msg.status == 200);
    }
    s = t.session;
  }
}

TEST(OnSignal, RandomWalksStayInTable) {
  std::mt19937 rng(9);
  for (int walk = 0; walk < 300; ++walk) {
    TxnGenerator txns;
    auto s = oracle::make_fixture(oracle::kAllFixtures[rng() % std::size(oracle::kAllFixtures)], txns);
    for (int step = 0; step < 20; ++step) {
      const auto k = oracle::kAllKinds[rng() % std::size(oracle::kAllKinds)];
      const auto t = on_signal(s, oracle::make_kind(s, k, txns), step, txns);
      const bool was_closed = s.state == SessionState::Closed;
      if (was_closed) ASSERT_EQ(t.session.state, SessionState::Closed);
      ASSERT_EQ(t.session.negotiated.has_value(), t.session.state == SessionState::Established);
      s = t.session;
    }
  }
}

TEST(OnSignal, InDialogTrafficRefreshesActivity) {
  TxnGenerator txns;
  auto s = oracle::make_fixture(Fixture::EstablishedServer, txns);
  auto t = on_signal(s, oracle::make_kind(s, Kind::Invite, txns), 777, txns);
  EXPECT_EQ(t.session.last_activity, 777);
}

TEST(Keepalive, Boundaries) {
  Session s;
  s.state = SessionState::Established;
  s.last_activity = 1000;
  EXPECT_EQ(keepalive_due(s, 1000, 200, 3), Keepalive::ok);
  EXPECT_EQ(keepalive_due(s, 1199, 200, 3), Keepalive::ok);
  EXPECT_EQ(keepalive_due(s, 1200, 200, 3), Keepalive::send_ping);
  EXPECT_EQ(keepalive_due(s, 1599, 200, 3), Keepalive::send_ping);
  EXPECT_EQ(keepalive_due(s, 1600, 200, 3), Keepalive::expired);
}

TEST(Keepalive, BusySessionNeverExpires) {
  Session s;
  s.state = SessionState::Established;
  for (TimeMs now = 0; now < 100000; now += 150) {
    s.last_activity = now;
    ASSERT_EQ(keepalive_due(s, now + 149, 200, 3), Keepalive::ok);
  }
}

}  // namespace
}  // namespace msbc
