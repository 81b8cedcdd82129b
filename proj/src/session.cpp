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

#include "msbc/session.hpp"

#include <algorithm>
#include <cstdio>

namespace msbc {

const char* to_string(SessionState s) noexcept {
  switch (s) {
    case SessionState::Idle: return "Idle";
    case SessionState::InviteSent: return "InviteSent";
    case SessionState::InviteReceived: return "InviteReceived";
    case SessionState::Established: return "Established";
    case SessionState::Closing: return "Closing";
    case SessionState::Closed: return "Closed";
  }
  return "?";
}

std::pair<Session, SignalMessage> SessionFactory::make_invite(const std::string& subscriber, Role role,
                                                              const std::optional<std::string>& provider,
                                                              AccessType access, SessionOffer offer, TimeMs now,
                                                              const std::string& to) {
  if (role == Role::asgw && (!provider || provider->empty()))
    throw Error(Errc::InvalidConfig, "asgw session needs a provider");
  if (subscriber.empty()) throw Error(Errc::InvalidConfig, "empty subscriber");

  char buf[48];
  std::snprintf(buf, sizeof buf, "%llu-%016llx", static_cast<unsigned long long>(++issued_),
                static_cast<unsigned long long>(rng_()));

  Session s;
  s.subscriber = subscriber;
  s.peer = to;
  s.call_id = std::string(buf) + "@msbc";
  s.role = role;
  s.provider = role == Role::asgw ? provider : std::nullopt;
  s.state = SessionState::InviteSent;
  s.access = access;
  s.last_activity = now;
  s.local_cseq = 1;
  s.last_request = Method::Invite;

  offer.role = role;
  offer.provider = s.provider;

  SignalMessage invite{txns_.next()};
  invite.is_request = true;
  invite.method = Method::Invite;
  invite.from = subscriber;
  invite.to = to;
  invite.call_id = s.call_id;
  invite.cseq = 1;
  invite.cseq_method = Method::Invite;
  invite.access = access;
  invite.body = std::move(offer);
  return {std::move(s), std::move(invite)};
}

SessionOffer answer_offer(const SessionOffer& offer, AccessType offer_access, AccessType local_access,
                          std::uint32_t local_max_frame, const std::string& local_payload_endpoint) {
  SessionOffer answer;
  answer.security = (offer_access == AccessType::internet || local_access == AccessType::internet)
                        ? Security::secure
                        : Security::plain;
  answer.max_frame_size = std::min(offer.max_frame_size, local_max_frame);
  if (answer.max_frame_size < kMinFrameSize)
    throw Error(Errc::Unacceptable, "negotiated frame size below " + std::to_string(kMinFrameSize));
  answer.payload_endpoint = local_payload_endpoint;
  answer.role = offer.role;
  answer.provider = offer.provider;
  return answer;
}

SignalMessage make_response(const SignalMessage& request, int status, const std::string& reason,
                            AccessType local_access, TxnGenerator& txns) {
  SignalMessage r{txns.next()};
  r.is_request = false;
  r.status = status;
  r.reason = reason;
  r.from = request.from;
  r.to = request.to;
  r.call_id = request.call_id;
  r.cseq = request.cseq;
  r.cseq_method = request.cseq_method;
  r.access = local_access;
  return r;
}

std::pair<Session, SignalMessage> accept_invite(const SignalMessage& invite, const SessionOffer& answer,
                                                AccessType local_access, const std::string& local_identity,
                                                const std::string& remote_endpoint, TxnGenerator& txns,
                                                TimeMs now) {
  Session s;
  s.subscriber = invite.from;
  s.peer = local_identity;
  s.call_id = invite.call_id;
  s.role = invite.body ? invite.body->role : Role::lgw;
  s.provider = invite.body ? invite.body->provider : std::nullopt;
  s.state = SessionState::InviteReceived;
  s.access = invite.access;
  s.last_activity = now;
  s.remote_endpoint = remote_endpoint;
  s.remote_cseq = invite.cseq;
  s.pending = NegotiatedChannel{answer.security, answer.max_frame_size, answer.payload_endpoint};

  auto ok = make_response(invite, 200, "OK", local_access, txns);
  ok.body = answer;
  return {std::move(s), std::move(ok)};
}

SignalMessage make_bye(Session& session, TxnGenerator& txns, TimeMs now) {
  SignalMessage bye{txns.next()};
  bye.is_request = true;
  bye.method = Method::Bye;
  bye.from = session.subscriber;
  bye.to = session.peer;
  bye.call_id = session.call_id;
  bye.cseq = ++session.local_cseq;
  bye.cseq_method = Method::Bye;
  bye.access = session.access;
  session.last_request = Method::Bye;
  session.state = SessionState::Closing;
  session.negotiated.reset();
  session.last_activity = now;
  return bye;
}

namespace {

SignalMessage ack_for(const Session& s, const SignalMessage& ok, TxnGenerator& txns) {
  SignalMessage ack{txns.next()};
  ack.is_request = true;
  ack.method = Method::Ack;
  ack.from = s.subscriber;
  ack.to = s.peer;
  ack.call_id = s.call_id;
  ack.cseq = ok.cseq;
  ack.cseq_method = Method::Ack;
  ack.access = s.access;
  return ack;
}

bool request_in_sequence(const Session& s, const SignalMessage& m) {
  if (m.method == Method::Ack) return s.remote_cseq != 0 && m.cseq == s.remote_cseq;
  return m.cseq > s.remote_cseq;
}

bool response_matches(const Session& s, const SignalMessage& m) {
  return s.local_cseq != 0 && m.cseq == s.local_cseq && m.cseq_method == s.last_request;
}

}  // namespace

Transition on_signal(const Session& session, const SignalMessage& msg, TimeMs now, TxnGenerator& txns) {
  Transition t{session, {}};
  Session& s = t.session;

  auto respond = [&](int status, const char* reason) {
    t.actions.push_back(action::SendSignal{make_response(msg, status, reason, s.access, txns)});
  };

  const bool in_dialog = s.state != SessionState::Idle && msg.call_id == s.call_id;
  if (!in_dialog) {
    if (msg.is_request && msg.method != Method::Ack) respond(481, "Call/Transaction Does Not Exist");
    return t;
  }

  if (msg.is_request) {
    if (s.state == SessionState::Closed) {
      if (msg.method == Method::Bye) respond(200, "OK");
      else if (msg.method == Method::Invite) respond(481, "Call/Transaction Does Not Exist");
      return t;
    }
    if (!request_in_sequence(s, msg)) {
      respond(481, "Call/Transaction Does Not Exist");
      return t;
    }
    s.last_activity = now;
    if (msg.method != Method::Ack) s.remote_cseq = msg.cseq;

    switch (msg.method) {
      case Method::Bye:
        respond(200, "OK");
        s.state = SessionState::Closed;
        s.negotiated.reset();
        s.pending.reset();
        break;
      case Method::Invite:
        respond(501, "Not Implemented");
        break;
      case Method::Ack:
        if (s.state == SessionState::InviteReceived) {
          s.state = SessionState::Established;
          s.negotiated = s.pending;
          s.pending.reset();
        }
        break;
    }
    return t;
  }

  // Responses: only ones answering our outstanding request count.
  if (s.state == SessionState::Closed || !response_matches(s, msg)) return t;
  s.last_activity = now;
  if (msg.status < 200) return t;

  switch (s.state) {
    case SessionState::InviteSent:
      if (msg.status == 200) {
        NegotiatedChannel ch{msg.body->security, msg.body->max_frame_size, msg.body->payload_endpoint};
        s.state = SessionState::Established;
        s.negotiated = ch;
        t.actions.push_back(action::SendSignal{ack_for(s, msg, txns)});
        t.actions.push_back(action::OpenPayload{std::move(ch)});
      } else {
        s.state = SessionState::Closed;
        t.actions.push_back(action::Rejected{msg.status});
      }
      break;
    case SessionState::Closing:
      s.state = SessionState::Closed;
      break;
    default:
      break;
  }
  return t;
}

Keepalive keepalive_due(const Session& session, TimeMs now, TimeMs interval_ms, unsigned misses) {
  const TimeMs gap = now - session.last_activity;
  if (gap >= interval_ms * static_cast<TimeMs>(misses)) return Keepalive::expired;
  if (gap >= interval_ms) return Keepalive::send_ping;
  return Keepalive::ok;
}

}  // namespace msbc
