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

// Signaling dialog between a gateway and the interconnect server.
//
// Gateway side:  Idle --make_invite--> InviteSent --200--> Established
// Server side:   accept_invite --> InviteReceived --ACK--> Established
// Either side:   Established --make_bye--> Closing --final--> Closed
//                any --BYE--> Closed (answered with 200)
//
// Every transition is a pure function of (session, message, now); clocks are
// injected by the caller.

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "msbc/wire_protocol.hpp"

namespace msbc {

using TimeMs = std::int64_t;

enum class SessionState { Idle, InviteSent, InviteReceived, Established, Closing, Closed };

const char* to_string(SessionState) noexcept;

struct NegotiatedChannel {
  Security security = Security::plain;
  std::uint32_t max_frame_size = kDefaultFrameSize;
  std::string payload_endpoint;

  friend bool operator==(const NegotiatedChannel&, const NegotiatedChannel&) = default;
};

struct Session {
  std::string subscriber;
  std::string peer;  // identity on the far end of the dialog (To for the caller)
  std::string call_id;
  Role role = Role::lgw;
  std::optional<std::string> provider;
  SessionState state = SessionState::Idle;
  std::optional<NegotiatedChannel> negotiated;
  AccessType access = AccessType::radio;
  TimeMs last_activity = 0;
  std::string remote_endpoint;

  // Dialog bookkeeping.
  std::uint32_t local_cseq = 0;
  std::uint32_t remote_cseq = 0;
  Method last_request = Method::Invite;
  std::optional<NegotiatedChannel> pending;  // answer sent, waiting for ACK

  friend bool operator==(const Session&, const Session&) = default;
};

namespace action {
struct SendSignal {
  SignalMessage msg;
  friend bool operator==(const SendSignal&, const SendSignal&) = default;
};
struct OpenPayload {
  NegotiatedChannel channel;
  friend bool operator==(const OpenPayload&, const OpenPayload&) = default;
};
struct Rejected {
  int status = 0;
  friend bool operator==(const Rejected&, const Rejected&) = default;
};
}  // namespace action

using SessionAction = std::variant<action::SendSignal, action::OpenPayload, action::Rejected>;

struct Transition {
  Session session;
  std::vector<SessionAction> actions;
};

/// Issues INVITEs with fresh Call-IDs. Seeded so that runs can be replayed.
class SessionFactory {
 public:
  explicit SessionFactory(TxnGenerator& txns, std::uint64_t seed = 0x6d736263)
      : txns_(txns), rng_(seed) {}

  /// Returns the new session (state InviteSent, CSeq 1) and its INVITE.
  /// Throws Error(InvalidConfig) for an asgw without provider.
  std::pair<Session, SignalMessage> make_invite(const std::string& subscriber, Role role,
                                                const std::optional<std::string>& provider, AccessType access,
                                                SessionOffer offer, TimeMs now,
                                                const std::string& to = "sip:m2m-is@msbc");

 private:
  TxnGenerator& txns_;
  std::mt19937_64 rng_;
  std::uint64_t issued_ = 0;
};

/// Offer/answer for the payload channel. The channel is secure iff either
/// side reaches the network over internet access; frame size is the smaller
/// of the two. Throws Error(Unacceptable) below the minimum frame size.
SessionOffer answer_offer(const SessionOffer& offer, AccessType offer_access, AccessType local_access,
                          std::uint32_t local_max_frame, const std::string& local_payload_endpoint);

/// Server side of an INVITE: builds the InviteReceived session and the 200
/// carrying `answer`.
std::pair<Session, SignalMessage> accept_invite(const SignalMessage& invite, const SessionOffer& answer,
                                                AccessType local_access, const std::string& local_identity,
                                                const std::string& remote_endpoint, TxnGenerator& txns,
                                                TimeMs now);

/// Final response to `request` outside any session (403, 488, 481, ...).
SignalMessage make_response(const SignalMessage& request, int status, const std::string& reason,
                            AccessType local_access, TxnGenerator& txns);

/// Starts a teardown: Established (or InviteSent) -> Closing, returns the BYE.
SignalMessage make_bye(Session& session, TxnGenerator& txns, TimeMs now);

Transition on_signal(const Session& session, const SignalMessage& msg, TimeMs now, TxnGenerator& txns);

enum class Keepalive { ok, send_ping, expired };

Keepalive keepalive_due(const Session& session, TimeMs now, TimeMs interval_ms, unsigned misses);

}  // namespace msbc
