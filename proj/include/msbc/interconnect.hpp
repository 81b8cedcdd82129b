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

// M2M interconnect server core.
//
// The core owns the session registry, the wire table and the directory and
// is driven by one serialized stream of transport events and clock ticks. It
// performs no I/O: every handler returns the frames to write and the
// connections to close. The network server in broker_server.hpp feeds it.

#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "msbc/directory.hpp"
#include "msbc/session.hpp"
#include "msbc/wire_protocol.hpp"

namespace msbc {

using SessionId = std::uint64_t;
using ConnId = std::uint64_t;

struct BrokerConfig {
  std::string signaling_endpoint = "127.0.0.1:5060";
  std::string payload_endpoint = "127.0.0.1:5061";
  TimeMs keepalive_interval_ms = 5000;
  unsigned keepalive_misses = 3;
  std::size_t buffer_max_packets = 1024;
  std::size_t buffer_max_bytes = 4 * 1024 * 1024;
  std::string directory_path;

  TimeMs tick_ms = 50;
  std::uint32_t max_frame_size = kDefaultFrameSize;
  AccessType access = AccessType::radio;
  std::string identity = "sip:m2m-is@msbc";
  std::string event_log_path;  // empty: events go to the logger only

  /// Throws Error(InvalidConfig).
  void validate() const;
};

/// key=value lines, '#' comments. Unknown keys are an error.
BrokerConfig parse_broker_config(std::string_view text);
BrokerConfig load_broker_config(const std::filesystem::path& path);

enum class WireState { Pending, Active, Buffering, Released };

const char* to_string(WireState) noexcept;

struct BufferedPacket {
  SessionId src = 0;
  TxnId src_txn;
  WireId src_wire;
  std::uint64_t src_seq = 0;
  std::string payload;
};

struct WireTableEntry {
  std::uint64_t id = 0;
  Ctid ctid;
  std::string provider;
  SessionId lgw_session = 0;
  WireId lgw_wire;
  std::optional<SessionId> asgw_session;
  std::optional<WireId> asgw_wire;
  WireState state = WireState::Pending;
  std::deque<BufferedPacket> buffer;
  std::size_t buffer_bytes = 0;

  // Next sequence number emitted towards each side.
  std::uint64_t seq_to_lgw = 0;
  std::uint64_t seq_to_asgw = 0;

  // Released entries stay in the table until both sides acknowledged, so
  // their wire ids cannot be reused while frames may still be in flight.
  bool lgw_acked = false;
  bool asgw_acked = false;
  TimeMs deadline = 0;  // Pending only
};

/// One line of the structured event log.
struct BrokerEvent {
  TimeMs ts = 0;
  std::string kind;
  std::optional<SessionId> session;
  std::optional<std::string> ctid;
  std::optional<WireId> wire;
  std::string detail;
};

/// "ts=<ms> event=<kind> session=<id|-> ctid=<ctid|-> wire=<n|->[ detail=<...>]"
std::string format_event(const BrokerEvent& e);
/// Inverse of format_event. Throws Error(ParseError).
BrokerEvent parse_event(std::string_view line);

namespace out {
struct Send {
  ConnId conn = 0;
  Frame frame;
};
struct Close {
  ConnId conn = 0;
};
}  // namespace out

using Output = std::variant<out::Send, out::Close>;
using Outputs = std::vector<Output>;

struct SessionInfo {
  SessionId id = 0;
  Session dialog;
  ConnId signal_conn = 0;
  std::optional<ConnId> payload_conn;
  bool secure_transport = false;
  bool live = false;
};

class Interconnect {
 public:
  /// `advertised_payload_endpoint` goes into every SDP-style answer.
  Interconnect(BrokerConfig config, SubscriptionDirectory directory, std::string advertised_payload_endpoint);

  Outputs on_signal(ConnId conn, const SignalMessage& msg, const std::string& remote, TimeMs now);
  Outputs on_payload_frame(ConnId conn, const Frame& frame, bool secure_transport, TimeMs now);
  Outputs on_connection_closed(ConnId conn, TimeMs now);
  /// Keepalive, watchdog expiry and authorization timeouts.
  Outputs tick(TimeMs now);
  /// Earliest time a session's watchdog expires; nullopt when idle.
  std::optional<TimeMs> next_expiry() const;

  void set_event_sink(std::function<void(const BrokerEvent&)> sink) { sink_ = std::move(sink); }

  const BrokerConfig& config() const noexcept { return config_; }
  const SubscriptionDirectory& directory() const noexcept { return directory_; }
  const std::map<std::uint64_t, WireTableEntry>& wire_table() const noexcept { return entries_; }
  std::vector<SessionInfo> sessions() const;
  std::optional<SessionId> live_provider_session(const std::string& provider) const;
  std::size_t buffered_packets(const std::string& provider) const;
  std::size_t buffered_bytes(const std::string& provider) const;
  std::size_t in_flight() const noexcept { return in_flight_.size(); }

 private:
  struct BrokerSession {
    SessionId id = 0;
    Session dialog;
    ConnId signal_conn = 0;
    std::optional<ConnId> payload_conn;
    bool secure_transport = false;
    bool live = false;
    bool pong_owed = false;
    TimeMs last_ping = 0;
    std::set<std::uint32_t> wires;  // allocated, reserved or quarantined
  };

  struct InFlight {
    SessionId src = 0;
    TxnId src_txn;
    WireId src_wire;
    std::uint64_t src_seq = 0;
    std::uint64_t entry = 0;
    std::uint64_t dest_seq = 0;
    std::string payload;
    bool to_asgw = false;
  };

  struct PendingRestore {
    std::uint64_t entry = 0;
    WireId wire;
    TimeMs deadline = 0;
  };

  // Named operations.
  void handle_commission(BrokerSession& lgw, const Ctid& ctid, TimeMs now, Outputs& out);
  void route_packet(BrokerSession& src, const WirePacket& pkt, TimeMs now, Outputs& out);
  /// `heir`, when set, takes over the local-gateway side of every live wire.
  void on_session_lost(SessionId sid, const std::string& reason, TimeMs now, Outputs& out,
                       BrokerSession* heir = nullptr);
  void on_provider_return(BrokerSession& asgw, TimeMs now, Outputs& out);
  void handle_decommission(BrokerSession& requester, const Ctid& ctid, TimeMs now, Outputs& out);

  void on_control(BrokerSession& s, const ControlMessage& msg, TimeMs now, Outputs& out);
  void on_report(BrokerSession& s, const DeliveryReport& report, Outputs& out);
  void on_authorized(BrokerSession& asgw, const Ctid& ctid, WireId wire, TimeMs now, Outputs& out);
  void on_denied(BrokerSession& asgw, const Ctid& ctid, TimeMs now, Outputs& out);
  void on_release_ack(BrokerSession& s, const Ctid& ctid, WireId wire, TimeMs now);
  void attach(ConnId conn, const ControlMessage& msg, bool secure_transport, TimeMs now, Outputs& out);
  void become_live(BrokerSession& s, TimeMs now, Outputs& out);

  void forward(WireTableEntry& e, bool to_asgw, BufferedPacket pkt, Outputs& out);
  void release(WireTableEntry& e, Verb lgw_notice, Verb asgw_notice, TimeMs now, Outputs& out);
  void discard_buffer(WireTableEntry& e, Outputs& out);
  void maybe_free(std::uint64_t entry_id, TimeMs now);
  WireId allocate_wire(BrokerSession& s);
  void free_wire(SessionId sid, WireId wire);

  void send_control(SessionId sid, ControlMessage msg, Outputs& out);
  void send_payload(SessionId sid, Frame frame, Outputs& out);
  void report(SessionId sid, const TxnId& txn, WireId wire, std::uint64_t seq, int status, Outputs& out);
  ControlMessage control(Verb verb);
  BrokerSession* live_session(SessionId sid);
  BrokerSession* find_session(SessionId sid);
  void emit(TimeMs now, std::string kind, std::optional<SessionId> sid = std::nullopt,
            std::optional<std::string> ctid = std::nullopt, std::optional<WireId> wire = std::nullopt,
            std::string detail = {});

  BrokerConfig config_;
  SubscriptionDirectory directory_;
  std::string advertised_payload_endpoint_;
  TxnGenerator txns_;
  std::function<void(const BrokerEvent&)> sink_;

  SessionId next_session_ = 1;
  std::uint64_t next_entry_ = 1;
  std::map<SessionId, BrokerSession> sessions_;
  std::map<ConnId, SessionId> signal_conns_;
  std::map<ConnId, SessionId> payload_conns_;
  std::map<std::string, SessionId> by_call_id_;
  std::map<std::string, SessionId> by_subscriber_;
  std::map<std::string, SessionId> providers_live_;

  std::map<std::uint64_t, WireTableEntry> entries_;
  std::map<std::pair<SessionId, std::uint32_t>, std::uint64_t> by_wire_;
  std::map<Ctid, std::uint64_t> by_ctid_;  // non-Released entries
  std::map<std::pair<SessionId, Ctid>, PendingRestore> restores_;
  std::map<std::pair<SessionId, TxnId>, InFlight> in_flight_;
  std::map<std::string, std::pair<std::size_t, std::size_t>> provider_buffer_;  // packets, bytes
};

}  // namespace msbc
