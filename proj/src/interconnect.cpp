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

#include "msbc/interconnect.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace msbc {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view value, std::size_t line, std::string_view key) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size())
    throw ParseError(line, "bad number for " + std::string(key));
  return out;
}

std::optional<std::uint32_t> wire_param(const ControlMessage& m) {
  const auto* w = m.param("Wire");
  if (w == nullptr) return std::nullopt;
  std::uint32_t out = 0;
  auto [ptr, ec] = std::from_chars(w->data(), w->data() + w->size(), out);
  if (ec != std::errc{} || ptr != w->data() + w->size() || out == 0) return std::nullopt;
  return out;
}

std::optional<Ctid> ctid_param(const ControlMessage& m) {
  const auto* c = m.param("Ctid");
  if (c == nullptr || !Ctid::valid(*c)) return std::nullopt;
  return Ctid{*c};
}

}  // namespace

void BrokerConfig::validate() const {
  if (keepalive_interval_ms <= 0 || keepalive_misses == 0 || buffer_max_packets == 0 || buffer_max_bytes == 0 ||
      tick_ms <= 0)
    throw Error(Errc::InvalidConfig, "all limits must be > 0");
  if (max_frame_size < kMinFrameSize || max_frame_size > kMaxFrameSize)
    throw Error(Errc::InvalidConfig, "max_frame_size out of range");
  if (signaling_endpoint.find(':') == std::string::npos || payload_endpoint.find(':') == std::string::npos)
    throw Error(Errc::InvalidConfig, "endpoints must be host:port");
}

BrokerConfig parse_broker_config(std::string_view text) {
  BrokerConfig cfg;
  std::size_t lineno = 0;
  while (!text.empty()) {
    ++lineno;
    const auto eol = text.find('\n');
    auto line = trim(text.substr(0, eol));
    text.remove_prefix(eol == std::string_view::npos ? text.size() : eol + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(lineno, "expected key=value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key == "signaling_endpoint") cfg.signaling_endpoint = value;
    else if (key == "payload_endpoint") cfg.payload_endpoint = value;
    else if (key == "keepalive_interval_ms") cfg.keepalive_interval_ms = parse_number<TimeMs>(value, lineno, key);
    else if (key == "keepalive_misses") cfg.keepalive_misses = parse_number<unsigned>(value, lineno, key);
    else if (key == "buffer_max_packets") cfg.buffer_max_packets = parse_number<std::size_t>(value, lineno, key);
    else if (key == "buffer_max_bytes") cfg.buffer_max_bytes = parse_number<std::size_t>(value, lineno, key);
    else if (key == "directory_path") cfg.directory_path = value;
    else if (key == "tick_ms") cfg.tick_ms = parse_number<TimeMs>(value, lineno, key);
    else if (key == "max_frame_size") cfg.max_frame_size = parse_number<std::uint32_t>(value, lineno, key);
    else if (key == "identity") cfg.identity = value;
    else if (key == "event_log_path") cfg.event_log_path = value;
    else if (key == "access") {
      auto a = parse_access(value);
      if (!a) throw ParseError(lineno, "access must be radio or internet");
      cfg.access = *a;
    } else {
      throw ParseError(lineno, "unknown key '" + std::string(key) + "'");
    }
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ParseError(lineno, e.what());
  }
  return cfg;
}

BrokerConfig load_broker_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::InvalidConfig, "cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  auto cfg = parse_broker_config(buf.str());
  // Relative directory paths are resolved against the config file.
  if (!cfg.directory_path.empty() && std::filesystem::path(cfg.directory_path).is_relative())
    cfg.directory_path = (path.parent_path() / cfg.directory_path).string();
  return cfg;
}

const char* to_string(WireState s) noexcept {
  switch (s) {
    case WireState::Pending: return "Pending";
    case WireState::Active: return "Active";
    case WireState::Buffering: return "Buffering";
    case WireState::Released: return "Released";
  }
  return "?";
}

std::string format_event(const BrokerEvent& e) {
  std::string out = "ts=" + std::to_string(e.ts) + " event=" + e.kind;
  out += " session=" + (e.session ? std::to_string(*e.session) : std::string("-"));
  out += " ctid=" + (e.ctid ? *e.ctid : std::string("-"));
  out += " wire=" + (e.wire ? std::to_string(e.wire->value) : std::string("-"));
  if (!e.detail.empty()) out += " detail=" + e.detail;
  return out;
}

BrokerEvent parse_event(std::string_view line) {
  BrokerEvent e;
  bool seen_ts = false, seen_kind = false;
  while (!line.empty()) {
    const auto sp = line.find(' ');
    auto field = line.substr(0, sp);
    line.remove_prefix(sp == std::string_view::npos ? line.size() : sp + 1);
    const auto eq = field.find('=');
    if (eq == std::string_view::npos) throw ParseError(1, "event field without '='");
    auto key = field.substr(0, eq);
    auto value = field.substr(eq + 1);
    if (key == "detail") {
      // detail is last and may contain spaces
      e.detail = std::string(value);
      if (!line.empty()) e.detail += " " + std::string(line);
      break;
    }
    if (key == "ts") {
      e.ts = parse_number<TimeMs>(value, 1, key);
      seen_ts = true;
    } else if (key == "event") {
      e.kind = std::string(value);
      seen_kind = true;
    } else if (key == "session") {
      if (value != "-") e.session = parse_number<SessionId>(value, 1, key);
    } else if (key == "ctid") {
      if (value != "-") e.ctid = std::string(value);
    } else if (key == "wire") {
      if (value != "-") e.wire = WireId{parse_number<std::uint32_t>(value, 1, key)};
    } else {
      throw ParseError(1, "unknown event field '" + std::string(key) + "'");
    }
  }
  if (!seen_ts || !seen_kind) throw ParseError(1, "event needs ts and event");
  return e;
}

Interconnect::Interconnect(BrokerConfig config, SubscriptionDirectory directory,
                           std::string advertised_payload_endpoint)
    : config_(std::move(config)),
      directory_(std::move(directory)),
      advertised_payload_endpoint_(std::move(advertised_payload_endpoint)) {
  config_.validate();
  directory_.validate();
}

void Interconnect::emit(TimeMs now, std::string kind, std::optional<SessionId> sid, std::optional<std::string> ctid,
                        std::optional<WireId> wire, std::string detail) {
  if (!sink_) return;
  sink_(BrokerEvent{now, std::move(kind), sid, std::move(ctid), wire, std::move(detail)});
}

ControlMessage Interconnect::control(Verb verb) { return ControlMessage{txns_.next(), verb, {}}; }

Interconnect::BrokerSession* Interconnect::find_session(SessionId sid) {
  auto it = sessions_.find(sid);
  return it == sessions_.end() ? nullptr : &it->second;
}

Interconnect::BrokerSession* Interconnect::live_session(SessionId sid) {
  auto* s = find_session(sid);
  return (s != nullptr && s->live) ? s : nullptr;
}

void Interconnect::send_payload(SessionId sid, Frame frame, Outputs& out) {
  auto* s = find_session(sid);
  if (s == nullptr || !s->payload_conn) return;
  out.push_back(out::Send{*s->payload_conn, std::move(frame)});
}

void Interconnect::send_control(SessionId sid, ControlMessage msg, Outputs& out) {
  send_payload(sid, Frame{std::move(msg)}, out);
}

void Interconnect::report(SessionId sid, const TxnId& txn, WireId wire, std::uint64_t seq, int status,
                          Outputs& out) {
  if (live_session(sid) == nullptr) return;
  send_payload(sid, Frame{DeliveryReport{txn, wire, seq, status}}, out);
}

WireId Interconnect::allocate_wire(BrokerSession& s) {
  std::uint32_t w = 1;
  for (auto used : s.wires) {
    if (used != w) break;
    ++w;
  }
  s.wires.insert(w);
  return WireId{w};
}

void Interconnect::free_wire(SessionId sid, WireId wire) {
  by_wire_.erase({sid, wire.value});
  if (auto* s = find_session(sid)) s->wires.erase(wire.value);
}

std::vector<SessionInfo> Interconnect::sessions() const {
  std::vector<SessionInfo> out;
  for (const auto& [id, s] : sessions_)
    out.push_back(SessionInfo{id, s.dialog, s.signal_conn, s.payload_conn, s.secure_transport, s.live});
  return out;
}

std::optional<SessionId> Interconnect::live_provider_session(const std::string& provider) const {
  auto it = providers_live_.find(provider);
  if (it == providers_live_.end()) return std::nullopt;
  return it->second;
}

std::size_t Interconnect::buffered_packets(const std::string& provider) const {
  auto it = provider_buffer_.find(provider);
  return it == provider_buffer_.end() ? 0 : it->second.first;
}

std::size_t Interconnect::buffered_bytes(const std::string& provider) const {
  auto it = provider_buffer_.find(provider);
  return it == provider_buffer_.end() ? 0 : it->second.second;
}

// ---------------------------------------------------------------------------
// Signaling

Outputs Interconnect::on_signal(ConnId conn, const SignalMessage& msg, const std::string& remote, TimeMs now) {
  Outputs out;
  auto reply = [&](int status, const char* reason) {
    out.push_back(out::Send{conn, Frame{make_response(msg, status, reason, config_.access, txns_)}});
  };

  if (auto it = signal_conns_.find(conn); it != signal_conns_.end()) {
    const SessionId sid = it->second;
    auto& s = sessions_.at(sid);
    const auto before = s.dialog.state;
    Transition tr = msbc::on_signal(s.dialog, msg, now, txns_);
    s.dialog = std::move(tr.session);
    for (auto& a : tr.actions)
      if (auto* send = std::get_if<action::SendSignal>(&a)) out.push_back(out::Send{conn, Frame{send->msg}});

    if (before == SessionState::InviteReceived && s.dialog.state == SessionState::Established) {
      emit(now, "session_established", sid, std::nullopt, std::nullopt, s.dialog.subscriber);
      if (s.payload_conn) become_live(s, now, out);
    } else if (s.dialog.state == SessionState::Closed && before != SessionState::Closed) {
      on_session_lost(sid, "bye", now, out);
    }
    return out;
  }

  // A fresh signaling connection must open with an INVITE.
  if (!msg.is_request) return out;
  if (msg.method != Method::Invite) {
    reply(481, "Call/Transaction Does Not Exist");
    return out;
  }
  const auto& offer = *msg.body;
  if (!directory_.admits(msg.from, offer.role, offer.provider)) {
    emit(now, "session_rejected", std::nullopt, std::nullopt, std::nullopt, msg.from);
    reply(403, "Forbidden");
    return out;
  }
  SessionOffer answer;
  try {
    answer = answer_offer(offer, msg.access, config_.access, config_.max_frame_size, advertised_payload_endpoint_);
  } catch (const Error&) {
    reply(488, "Not Acceptable Here");
    return out;
  }
  if (by_call_id_.contains(msg.call_id)) {
    reply(481, "Call/Transaction Does Not Exist");
    return out;
  }

  auto [dialog, ok] = accept_invite(msg, answer, config_.access, config_.identity, remote, txns_, now);
  const SessionId sid = next_session_++;
  BrokerSession bs;
  bs.id = sid;
  bs.dialog = std::move(dialog);
  bs.signal_conn = conn;
  bs.last_ping = now;
  auto& fresh = sessions_.emplace(sid, std::move(bs)).first->second;

  // One live dialog per subscriber; a new INVITE supersedes the old one. A
  // local gateway that re-registers keeps its wires.
  if (auto it = by_subscriber_.find(msg.from); it != by_subscriber_.end()) {
    const auto old = it->second;
    const bool adopt = offer.role == Role::lgw && sessions_.at(old).dialog.role == Role::lgw;
    on_session_lost(old, "superseded", now, out, adopt ? &fresh : nullptr);
  }
  signal_conns_[conn] = sid;
  by_call_id_[msg.call_id] = sid;
  by_subscriber_[msg.from] = sid;
  emit(now, "session_invite", sid, std::nullopt, std::nullopt,
       std::string(to_string(offer.role)) + "," + to_string(answer.security) + "," + remote);
  out.push_back(out::Send{conn, Frame{std::move(ok)}});
  return out;
}

// ---------------------------------------------------------------------------
// Payload channel

void Interconnect::attach(ConnId conn, const ControlMessage& msg, bool secure_transport, TimeMs now, Outputs& out) {
  auto refuse = [&](const char* reason) {
    auto err = control(Verb::Error);
    err.set("Reason", reason);
    out.push_back(out::Send{conn, Frame{std::move(err)}});
    out.push_back(out::Close{conn});
  };
  const auto* call_id = msg.param("Call-ID");
  if (msg.verb != Verb::Ping || call_id == nullptr) return refuse("attach-required");
  auto it = by_call_id_.find(*call_id);
  if (it == by_call_id_.end()) return refuse("unknown-call");
  auto& s = sessions_.at(it->second);
  if (s.payload_conn) return refuse("already-attached");
  const auto& channel = s.dialog.negotiated ? s.dialog.negotiated : s.dialog.pending;
  if (!channel) return refuse("no-dialog");
  if (channel->security == Security::secure && !secure_transport) return refuse("insecure-transport");

  s.payload_conn = conn;
  s.secure_transport = secure_transport;
  s.dialog.last_activity = now;
  payload_conns_[conn] = s.id;
  emit(now, "payload_attached", s.id, std::nullopt, std::nullopt, secure_transport ? "tls" : "plain");
  s.pong_owed = true;
  if (s.dialog.state == SessionState::Established) become_live(s, now, out);
}

void Interconnect::become_live(BrokerSession& s, TimeMs now, Outputs& out) {
  if (s.live) return;
  s.live = true;
  if (s.dialog.role == Role::lgw) {
    // Wires adopted from a superseded session are announced before the PONG,
    // so the gateway knows them by the time it resumes.
    for (const auto& [id, e] : entries_) {
      if (e.lgw_session != s.id || (e.state != WireState::Active && e.state != WireState::Buffering)) continue;
      auto m = control(Verb::Commissioned);
      m.set("Ctid", e.ctid.str()).set("Wire", std::to_string(e.lgw_wire.value));
      send_control(s.id, std::move(m), out);
    }
  }
  if (s.pong_owed) {
    auto pong = control(Verb::Pong);
    pong.set("Call-ID", s.dialog.call_id);
    send_control(s.id, std::move(pong), out);
    s.pong_owed = false;
  }
  emit(now, "session_open", s.id, std::nullopt, std::nullopt,
       std::string(to_string(s.dialog.role)) + (s.dialog.provider ? "," + *s.dialog.provider : ""));
  if (s.dialog.role == Role::asgw && s.dialog.provider) {
    if (auto it = providers_live_.find(*s.dialog.provider); it != providers_live_.end() && it->second != s.id)
      on_session_lost(it->second, "superseded", now, out);
    providers_live_[*s.dialog.provider] = s.id;
    on_provider_return(s, now, out);
  }
}

Outputs Interconnect::on_payload_frame(ConnId conn, const Frame& frame, bool secure_transport, TimeMs now) {
  Outputs out;
  auto it = payload_conns_.find(conn);
  if (it == payload_conns_.end()) {
    if (const auto* c = std::get_if<ControlMessage>(&frame)) {
      attach(conn, *c, secure_transport, now, out);
    } else {
      out.push_back(out::Close{conn});
    }
    return out;
  }
  auto& s = sessions_.at(it->second);
  s.dialog.last_activity = now;

  std::visit(
      [&](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, WirePacket>) {
          if (!s.live) return report(s.id, f.txn, f.wire, f.seq, kStatusNoSuchWire, out);
          route_packet(s, f, now, out);
        } else if constexpr (std::is_same_v<T, DeliveryReport>) {
          on_report(s, f, out);
        } else if constexpr (std::is_same_v<T, ControlMessage>) {
          on_control(s, f, now, out);
        } else {
          // Signaling never travels on the payload channel.
          on_session_lost(s.id, "protocol", now, out);
        }
      },
      frame);
  return out;
}

void Interconnect::on_control(BrokerSession& s, const ControlMessage& msg, TimeMs now, Outputs& out) {
  auto error = [&](const char* reason, const std::optional<Ctid>& ctid) {
    auto err = control(Verb::Error);
    if (ctid) err.set("Ctid", ctid->str());
    err.set("Reason", reason);
    send_control(s.id, std::move(err), out);
  };
  const auto ctid = ctid_param(msg);

  switch (msg.verb) {
    case Verb::Ping: {
      auto pong = control(Verb::Pong);
      if (const auto* token = msg.param("Token")) pong.set("Token", *token);
      send_control(s.id, std::move(pong), out);
      return;
    }
    case Verb::Pong:
      return;
    case Verb::Commission:
      if (!s.live || s.dialog.role != Role::lgw) return error("not-lgw", ctid);
      return handle_commission(s, *ctid, now, out);
    case Verb::Decommission:
      if (!s.live) return error("not-established", ctid);
      return handle_decommission(s, *ctid, now, out);
    case Verb::Authorized: {
      if (s.dialog.role != Role::asgw) return error("not-asgw", ctid);
      return on_authorized(s, *ctid, WireId{*wire_param(msg)}, now, out);
    }
    case Verb::Denied:
      if (s.dialog.role != Role::asgw) return error("not-asgw", ctid);
      return on_denied(s, *ctid, now, out);
    case Verb::Decommissioned: {
      auto w = wire_param(msg);
      if (!w) return error("missing-wire", ctid);
      return on_release_ack(s, *ctid, WireId{*w}, now);
    }
    default:
      return error("unexpected-verb", ctid);
  }
}

// ---------------------------------------------------------------------------
// Wire lifecycle

void Interconnect::handle_commission(BrokerSession& lgw, const Ctid& ctid, TimeMs now, Outputs& out) {
  if (by_ctid_.contains(ctid)) {
    auto err = control(Verb::Error);
    err.set("Ctid", ctid.str()).set("Reason", "duplicate");
    send_control(lgw.id, std::move(err), out);
    emit(now, "commission_duplicate", lgw.id, ctid.str());
    return;
  }
  const auto provider = directory_.lookup_provider(ctid);
  if (!provider) {
    auto denied = control(Verb::Denied);
    denied.set("Ctid", ctid.str()).set("Reason", "no-provider");
    send_control(lgw.id, std::move(denied), out);
    emit(now, "wire_denied", lgw.id, ctid.str(), std::nullopt, "no-provider");
    return;
  }
  auto live = providers_live_.find(*provider);
  if (live == providers_live_.end()) {
    auto err = control(Verb::Error);
    err.set("Ctid", ctid.str()).set("Reason", "provider-unavailable");
    send_control(lgw.id, std::move(err), out);
    emit(now, "provider_unavailable", lgw.id, ctid.str(), std::nullopt, *provider);
    return;
  }
  auto& asgw = sessions_.at(live->second);

  WireTableEntry e{.id = next_entry_++, .ctid = ctid, .provider = *provider};
  e.lgw_session = lgw.id;
  e.lgw_wire = allocate_wire(lgw);
  e.asgw_session = asgw.id;
  e.asgw_wire = allocate_wire(asgw);
  e.state = WireState::Pending;
  e.deadline = now + config_.keepalive_interval_ms * config_.keepalive_misses;
  by_wire_[{lgw.id, e.lgw_wire.value}] = e.id;
  by_wire_[{asgw.id, e.asgw_wire->value}] = e.id;
  by_ctid_.emplace(ctid, e.id);

  auto authorize = control(Verb::Authorize);
  authorize.set("Ctid", ctid.str()).set("Wire", std::to_string(e.asgw_wire->value));
  send_control(asgw.id, std::move(authorize), out);
  emit(now, "authorize", asgw.id, ctid.str(), e.asgw_wire);
  entries_.emplace(e.id, std::move(e));
}

void Interconnect::on_authorized(BrokerSession& asgw, const Ctid& ctid, WireId wire, TimeMs now, Outputs& out) {
  if (auto it = by_ctid_.find(ctid); it != by_ctid_.end()) {
    auto& e = entries_.at(it->second);
    if (e.state == WireState::Pending && e.asgw_session == asgw.id && e.asgw_wire == wire) {
      e.state = WireState::Active;
      auto to_lgw = control(Verb::Commissioned);
      to_lgw.set("Ctid", ctid.str()).set("Wire", std::to_string(e.lgw_wire.value));
      send_control(e.lgw_session, std::move(to_lgw), out);
      auto to_asgw = control(Verb::Commissioned);
      to_asgw.set("Ctid", ctid.str()).set("Wire", std::to_string(wire.value));
      send_control(asgw.id, std::move(to_asgw), out);
      emit(now, "wire_commissioned", e.lgw_session, ctid.str(), e.lgw_wire,
           "asgw=" + std::to_string(asgw.id) + ":" + std::to_string(wire.value));
      return;
    }
  }

  auto rit = restores_.find({asgw.id, ctid});
  if (rit == restores_.end() || rit->second.wire != wire) return;
  const auto entry_id = rit->second.entry;
  restores_.erase(rit);
  auto eit = entries_.find(entry_id);
  if (eit == entries_.end() || eit->second.state != WireState::Buffering) {
    free_wire(asgw.id, wire);
    return;
  }
  auto& e = eit->second;
  e.asgw_session = asgw.id;
  e.asgw_wire = wire;
  e.seq_to_asgw = 0;
  e.state = WireState::Active;
  by_wire_[{asgw.id, wire.value}] = e.id;

  auto up = control(Verb::PeerUp);
  up.set("Ctid", ctid.str()).set("Wire", std::to_string(wire.value));
  send_control(asgw.id, std::move(up), out);
  emit(now, "wire_restored", asgw.id, ctid.str(), wire, std::to_string(e.buffer.size()) + " buffered");

  auto& counters = provider_buffer_[e.provider];
  auto pending = std::move(e.buffer);
  e.buffer.clear();
  counters.first -= std::min(counters.first, pending.size());
  counters.second -= std::min(counters.second, e.buffer_bytes);
  e.buffer_bytes = 0;
  for (auto& p : pending) forward(e, true, std::move(p), out);
}

void Interconnect::on_denied(BrokerSession& asgw, const Ctid& ctid, TimeMs now, Outputs& out) {
  if (auto it = by_ctid_.find(ctid); it != by_ctid_.end()) {
    auto& e = entries_.at(it->second);
    if (e.state == WireState::Pending && e.asgw_session == asgw.id) {
      auto denied = control(Verb::Denied);
      denied.set("Ctid", ctid.str());
      send_control(e.lgw_session, std::move(denied), out);
      emit(now, "wire_denied", e.lgw_session, ctid.str(), std::nullopt, e.provider);
      free_wire(e.lgw_session, e.lgw_wire);
      free_wire(asgw.id, *e.asgw_wire);
      by_ctid_.erase(it);
      entries_.erase(e.id);
      return;
    }
  }

  auto rit = restores_.find({asgw.id, ctid});
  if (rit == restores_.end()) return;
  const auto entry_id = rit->second.entry;
  free_wire(asgw.id, rit->second.wire);
  restores_.erase(rit);
  auto eit = entries_.find(entry_id);
  if (eit == entries_.end() || eit->second.state != WireState::Buffering) return;
  // Re-authorization refused: the device loses its wire.
  release(eit->second, Verb::PeerDown, Verb::PeerDown, now, out);
  maybe_free(entry_id, now);
}

void Interconnect::discard_buffer(WireTableEntry& e, Outputs& out) {
  auto& counters = provider_buffer_[e.provider];
  for (const auto& p : e.buffer) report(p.src, p.src_txn, p.src_wire, p.src_seq, kStatusPeerUnavailable, out);
  counters.first -= std::min(counters.first, e.buffer.size());
  counters.second -= std::min(counters.second, e.buffer_bytes);
  e.buffer.clear();
  e.buffer_bytes = 0;
}

void Interconnect::release(WireTableEntry& e, Verb lgw_notice, Verb asgw_notice, TimeMs now, Outputs& out) {
  discard_buffer(e, out);
  e.state = WireState::Released;
  by_ctid_.erase(e.ctid);

  if (live_session(e.lgw_session) != nullptr) {
    auto m = control(lgw_notice);
    m.set("Ctid", e.ctid.str()).set("Wire", std::to_string(e.lgw_wire.value));
    send_control(e.lgw_session, std::move(m), out);
  } else {
    e.lgw_acked = true;
  }
  if (e.asgw_session && live_session(*e.asgw_session) != nullptr) {
    auto m = control(asgw_notice);
    m.set("Ctid", e.ctid.str()).set("Wire", std::to_string(e.asgw_wire->value));
    send_control(*e.asgw_session, std::move(m), out);
  } else {
    e.asgw_acked = true;
  }
  emit(now, "wire_released", e.lgw_session, e.ctid.str(), e.lgw_wire, e.provider);
}

void Interconnect::maybe_free(std::uint64_t entry_id, TimeMs now) {
  auto it = entries_.find(entry_id);
  if (it == entries_.end()) return;
  auto& e = it->second;
  if (e.state != WireState::Released || !e.lgw_acked || !e.asgw_acked) return;
  free_wire(e.lgw_session, e.lgw_wire);
  if (e.asgw_session && e.asgw_wire) free_wire(*e.asgw_session, *e.asgw_wire);
  emit(now, "wire_freed", e.lgw_session, e.ctid.str(), e.lgw_wire);
  entries_.erase(it);
}

void Interconnect::on_release_ack(BrokerSession& s, const Ctid& ctid, WireId wire, TimeMs now) {
  auto it = by_wire_.find({s.id, wire.value});
  if (it == by_wire_.end()) return;
  const auto entry_id = it->second;
  auto& e = entries_.at(entry_id);
  if (e.state != WireState::Released || e.ctid != ctid) return;
  if (e.lgw_session == s.id && e.lgw_wire == wire) e.lgw_acked = true;
  if (e.asgw_session == s.id && e.asgw_wire == wire) e.asgw_acked = true;
  maybe_free(entry_id, now);
}

void Interconnect::handle_decommission(BrokerSession& requester, const Ctid& ctid, TimeMs now, Outputs& out) {
  auto it = by_ctid_.find(ctid);
  bool ok = it != by_ctid_.end();
  WireTableEntry* e = ok ? &entries_.at(it->second) : nullptr;
  if (ok) {
    const bool owner = e->lgw_session == requester.id || e->asgw_session == requester.id;
    ok = owner && (e->state == WireState::Active || e->state == WireState::Buffering);
  }
  if (!ok) {
    auto err = control(Verb::Error);
    err.set("Ctid", ctid.str()).set("Reason", "unknown-ctid");
    send_control(requester.id, std::move(err), out);
    return;
  }
  const auto id = e->id;
  release(*e, Verb::Decommissioned, Verb::Decommissioned, now, out);
  maybe_free(id, now);
}

// ---------------------------------------------------------------------------
// Routing

void Interconnect::forward(WireTableEntry& e, bool to_asgw, BufferedPacket pkt, Outputs& out) {
  const SessionId dest = to_asgw ? *e.asgw_session : e.lgw_session;
  const WireId dest_wire = to_asgw ? *e.asgw_wire : e.lgw_wire;
  auto* d = live_session(dest);
  if (d == nullptr || !d->dialog.negotiated || pkt.payload.size() > d->dialog.negotiated->max_frame_size) {
    report(pkt.src, pkt.src_txn, pkt.src_wire, pkt.src_seq, kStatusPeerUnavailable, out);
    return;
  }
  const std::uint64_t seq = to_asgw ? ++e.seq_to_asgw : ++e.seq_to_lgw;
  TxnId txn = txns_.next();
  send_payload(dest, Frame{WirePacket{txn, dest_wire, seq, pkt.payload}}, out);
  in_flight_.emplace(std::make_pair(dest, txn),
                     InFlight{pkt.src, pkt.src_txn, pkt.src_wire, pkt.src_seq, e.id, seq, std::move(pkt.payload),
                              to_asgw});
}

void Interconnect::route_packet(BrokerSession& src, const WirePacket& pkt, TimeMs now, Outputs& out) {
  (void)now;
  auto it = by_wire_.find({src.id, pkt.wire.value});
  if (it == by_wire_.end()) return report(src.id, pkt.txn, pkt.wire, pkt.seq, kStatusNoSuchWire, out);
  auto& e = entries_.at(it->second);
  if (e.state == WireState::Pending) return report(src.id, pkt.txn, pkt.wire, pkt.seq, kStatusNoSuchWire, out);
  if (e.state == WireState::Released) return report(src.id, pkt.txn, pkt.wire, pkt.seq, kStatusPeerUnavailable, out);

  const bool from_lgw = e.lgw_session == src.id && e.lgw_wire == pkt.wire;
  BufferedPacket p{src.id, pkt.txn, pkt.wire, pkt.seq, pkt.payload};
  if (!from_lgw) return forward(e, false, std::move(p), out);

  if (e.state == WireState::Active) return forward(e, true, std::move(p), out);

  // Buffering: the provider is away.
  auto& counters = provider_buffer_[e.provider];
  if (counters.first + 1 > config_.buffer_max_packets || counters.second + p.payload.size() > config_.buffer_max_bytes)
    return report(src.id, pkt.txn, pkt.wire, pkt.seq, kStatusPeerUnavailable, out);
  counters.first += 1;
  counters.second += p.payload.size();
  e.buffer_bytes += p.payload.size();
  e.buffer.push_back(std::move(p));
}

void Interconnect::on_report(BrokerSession& s, const DeliveryReport& r, Outputs& out) {
  auto it = in_flight_.find({s.id, r.txn});
  if (it == in_flight_.end()) return;
  InFlight f = std::move(it->second);
  in_flight_.erase(it);
  report(f.src, f.src_txn, f.src_wire, f.src_seq, r.status, out);
}

// ---------------------------------------------------------------------------
// Liveness

void Interconnect::on_provider_return(BrokerSession& asgw, TimeMs now, Outputs& out) {
  const auto& provider = *asgw.dialog.provider;
  for (auto& [id, e] : entries_) {
    if (e.state != WireState::Buffering || e.provider != provider) continue;
    if (restores_.contains({asgw.id, e.ctid})) continue;
    const WireId wire = allocate_wire(asgw);
    restores_.emplace(std::make_pair(asgw.id, e.ctid),
                      PendingRestore{id, wire, now + config_.keepalive_interval_ms * config_.keepalive_misses});
    by_wire_[{asgw.id, wire.value}] = id;
    auto authorize = control(Verb::Authorize);
    authorize.set("Ctid", e.ctid.str()).set("Wire", std::to_string(wire.value));
    send_control(asgw.id, std::move(authorize), out);
    emit(now, "authorize", asgw.id, e.ctid.str(), wire, "restore");
  }
}

void Interconnect::on_session_lost(SessionId sid, const std::string& reason, TimeMs now, Outputs& out,
                                   BrokerSession* heir) {
  auto sit = sessions_.find(sid);
  if (sit == sessions_.end()) return;
  auto& s = sit->second;
  const bool was_live = s.live;
  s.live = false;
  const Role role = s.dialog.role;

  if (s.dialog.role == Role::asgw && s.dialog.provider) {
    auto pit = providers_live_.find(*s.dialog.provider);
    if (pit != providers_live_.end() && pit->second == sid) providers_live_.erase(pit);
  }

  // Frames in flight towards the lost session.
  std::map<std::uint64_t, std::vector<InFlight>> requeue;
  for (auto it = in_flight_.begin(); it != in_flight_.end();) {
    if (it->first.first != sid) {
      ++it;
      continue;
    }
    auto f = std::move(it->second);
    it = in_flight_.erase(it);
    if (f.to_asgw) {
      requeue[f.entry].push_back(std::move(f));
    } else {
      report(f.src, f.src_txn, f.src_wire, f.src_seq, kStatusPeerUnavailable, out);
    }
  }

  for (auto& [id, e] : entries_) {
    if (role == Role::lgw && e.lgw_session == sid) {
      if (heir != nullptr && (e.state == WireState::Active || e.state == WireState::Buffering)) {
        by_wire_.erase({sid, e.lgw_wire.value});
        e.lgw_session = heir->id;
        e.lgw_wire = allocate_wire(*heir);
        e.seq_to_lgw = 0;
        by_wire_[{heir->id, e.lgw_wire.value}] = id;
        emit(now, "wire_adopted", heir->id, e.ctid.str(), e.lgw_wire);
        continue;
      }
      if (e.state == WireState::Released) {
        e.lgw_acked = true;
        continue;
      }
      if (e.state == WireState::Pending) {
        // Nothing visible yet on the provider side beyond the AUTHORIZE.
        e.state = WireState::Released;
        by_ctid_.erase(e.ctid);
        e.lgw_acked = e.asgw_acked = true;
        continue;
      }
      // The session is no longer live, so release() skips the LGW side.
      release(e, Verb::PeerDown, Verb::PeerDown, now, out);
      e.lgw_acked = true;
      emit(now, "peer_down", e.asgw_session.value_or(0), e.ctid.str(), e.asgw_wire, "lgw-lost");
    } else if (role == Role::asgw && e.asgw_session == sid) {
      if (e.state == WireState::Released) {
        e.asgw_acked = true;
        continue;
      }
      if (e.state == WireState::Pending) {
        auto err = control(Verb::Error);
        err.set("Ctid", e.ctid.str()).set("Reason", "provider-unavailable");
        send_control(e.lgw_session, std::move(err), out);
        e.state = WireState::Released;
        by_ctid_.erase(e.ctid);
        e.lgw_acked = e.asgw_acked = true;
        continue;
      }
      by_wire_.erase({sid, e.asgw_wire->value});
      e.asgw_session.reset();
      e.asgw_wire.reset();
      e.seq_to_asgw = 0;
      e.state = WireState::Buffering;
      if (auto rq = requeue.find(id); rq != requeue.end()) {
        auto& packets = rq->second;
        std::sort(packets.begin(), packets.end(),
                  [](const InFlight& a, const InFlight& b) { return a.dest_seq < b.dest_seq; });
        auto& counters = provider_buffer_[e.provider];
        for (auto p = packets.rbegin(); p != packets.rend(); ++p) {
          counters.first += 1;
          counters.second += p->payload.size();
          e.buffer_bytes += p->payload.size();
          e.buffer.push_front(BufferedPacket{p->src, p->src_txn, p->src_wire, p->src_seq, std::move(p->payload)});
        }
      }
      emit(now, "wire_buffering", e.lgw_session, e.ctid.str(), e.lgw_wire, e.provider);
    }
  }

  for (auto it = restores_.begin(); it != restores_.end();) {
    if (it->first.first != sid) {
      ++it;
      continue;
    }
    by_wire_.erase({sid, it->second.wire.value});
    it = restores_.erase(it);
  }

  std::vector<std::uint64_t> done;
  for (const auto& [id, e] : entries_)
    if (e.state == WireState::Released && e.lgw_acked && e.asgw_acked) done.push_back(id);
  for (auto id : done) maybe_free(id, now);
  // Anything still referencing the dead session's wires is dropped from the index.
  for (auto it = by_wire_.begin(); it != by_wire_.end();) {
    if (it->first.first == sid && !entries_.contains(it->second)) it = by_wire_.erase(it);
    else ++it;
  }

  out.push_back(out::Close{s.signal_conn});
  if (s.payload_conn) out.push_back(out::Close{*s.payload_conn});
  signal_conns_.erase(s.signal_conn);
  if (s.payload_conn) payload_conns_.erase(*s.payload_conn);
  by_call_id_.erase(s.dialog.call_id);
  if (auto bit = by_subscriber_.find(s.dialog.subscriber); bit != by_subscriber_.end() && bit->second == sid)
    by_subscriber_.erase(bit);
  emit(now, reason == "bye" ? "session_closed" : "session_lost", sid, std::nullopt, std::nullopt,
       reason + (was_live ? "" : ",not-live"));
  sessions_.erase(sit);
}

Outputs Interconnect::on_connection_closed(ConnId conn, TimeMs now) {
  Outputs out;
  if (auto it = signal_conns_.find(conn); it != signal_conns_.end()) {
    on_session_lost(it->second, "transport", now, out);
  } else if (auto pit = payload_conns_.find(conn); pit != payload_conns_.end()) {
    on_session_lost(pit->second, "transport", now, out);
  }
  // The connection itself is already gone.
  std::erase_if(out, [conn](const Output& o) {
    const auto* c = std::get_if<out::Close>(&o);
    return c != nullptr && c->conn == conn;
  });
  return out;
}

std::optional<TimeMs> Interconnect::next_expiry() const {
  std::optional<TimeMs> out;
  for (const auto& [sid, s] : sessions_) {
    const TimeMs at = s.dialog.last_activity + config_.keepalive_interval_ms * config_.keepalive_misses;
    if (!out || at < *out) out = at;
  }
  return out;
}

Outputs Interconnect::tick(TimeMs now) {
  Outputs out;
  std::vector<SessionId> expired;
  for (auto& [sid, s] : sessions_) {
    switch (keepalive_due(s.dialog, now, config_.keepalive_interval_ms, config_.keepalive_misses)) {
      case Keepalive::expired:
        expired.push_back(sid);
        break;
      case Keepalive::send_ping:
        if (s.payload_conn && now - s.last_ping >= config_.keepalive_interval_ms) {
          auto ping = control(Verb::Ping);
          ping.set("Token", std::to_string(now));
          send_control(sid, std::move(ping), out);
          s.last_ping = now;
        }
        break;
      case Keepalive::ok:
        break;
    }
  }
  for (auto sid : expired) on_session_lost(sid, "watchdog", now, out);

  // Authorizations the provider never answered.
  std::vector<std::uint64_t> stale;
  for (const auto& [id, e] : entries_)
    if (e.state == WireState::Pending && now >= e.deadline) stale.push_back(id);
  for (auto id : stale) {
    auto& e = entries_.at(id);
    auto err = control(Verb::Error);
    err.set("Ctid", e.ctid.str()).set("Reason", "provider-unavailable");
    send_control(e.lgw_session, std::move(err), out);
    emit(now, "authorize_timeout", e.lgw_session, e.ctid.str());
    by_ctid_.erase(e.ctid);
    free_wire(e.lgw_session, e.lgw_wire);
    free_wire(*e.asgw_session, *e.asgw_wire);
    entries_.erase(id);
  }
  for (auto it = restores_.begin(); it != restores_.end();) {
    if (now >= it->second.deadline) {
      free_wire(it->first.first, it->second.wire);
      it = restores_.erase(it);
    } else {
      ++it;
    }
  }
  return out;
}

}  // namespace msbc
