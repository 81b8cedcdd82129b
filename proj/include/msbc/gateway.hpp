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

// Gateway SDK.
//
// A Gateway is either the local gateway (LGW) in front of a machine domain or
// the application server gateway (ASGW) of one service provider. It keeps one
// dialog and one payload channel to the interconnect server and hides
// reconnects behind a small state machine:
//
//   Closed --open--> Connecting --200 + PONG--> Open
//   Open --transport lost / watchdog--> Degraded --backoff--> Connecting
//   any --close--> Closed
//
// All socket work happens on one internal thread. Receiver callbacks run on
// that thread and must not block.

#pragma once

#include <chrono>
#include <cstdint>
#include <future>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include "msbc/session.hpp"
#include "msbc/wire_protocol.hpp"

namespace msbc {

/// Exponential reconnect delay: initial * multiplier^attempt, capped.
struct Backoff {
  std::chrono::milliseconds initial{100};
  double multiplier = 2.0;
  std::chrono::milliseconds cap{5000};

  std::chrono::milliseconds delay(unsigned attempt) const noexcept;
};

enum class GatewayState { Closed, Connecting, Open, Degraded };

const char* to_string(GatewayState) noexcept;

enum class GatewayEventKind {
  Opened,
  Commissioned,
  Denied,
  ProviderUnavailable,
  PeerDown,
  PeerUp,
  Decommissioned,
  ConnectionLost,
  ConnectionRestored,
};

const char* to_string(GatewayEventKind) noexcept;

struct GatewayEvent {
  GatewayEventKind kind = GatewayEventKind::Opened;
  std::optional<Ctid> ctid;
  std::string detail;
};

enum class DeliveryOutcome { delivered, peer_unavailable, no_wire };
enum class AttachOutcome { commissioned, denied, provider_unavailable, duplicate };

const char* to_string(DeliveryOutcome) noexcept;
const char* to_string(AttachOutcome) noexcept;

struct GatewayConfig {
  Role role = Role::lgw;
  std::string subscriber;
  std::optional<std::string> provider;  // asgw only
  std::string broker_signaling_endpoint = "127.0.0.1:5060";
  AccessType access = AccessType::radio;
  Backoff reconnect_backoff;
  bool auto_reconnect = true;
  std::string local_address;  // bind address; empty picks any
  std::uint32_t max_frame_size = kDefaultFrameSize;
  std::chrono::milliseconds report_timeout{2000};
  std::chrono::milliseconds keepalive_interval{5000};
  unsigned keepalive_misses = 3;
  std::chrono::milliseconds signaling_timeout{2000};
  std::chrono::milliseconds close_timeout{1000};
  std::uint64_t seed = 1;

  /// Throws Error(InvalidConfig).
  void validate() const;
};

class Receiver {
 public:
  virtual ~Receiver() = default;
  virtual void on_data(const Ctid& ctid, std::string_view data) = 0;
  virtual void on_event(const GatewayEvent& event) { (void)event; }
  /// ASGW only: called once per AUTHORIZE. Defaults to accepting.
  virtual bool authorize(const Ctid& ctid) {
    (void)ctid;
    return true;
  }
};

struct GatewayStats {
  std::uint64_t sent = 0;
  std::uint64_t delivered = 0;
  std::uint64_t peer_unavailable = 0;
  std::uint64_t no_wire = 0;
  std::uint64_t received = 0;
  std::uint64_t seq_gaps = 0;  // inbound packets whose seq was not the expected one
  std::uint64_t reconnects = 0;
};

class Gateway {
 public:
  /// Starts connecting in the background and returns immediately. Readiness
  /// is signalled by an Opened event or wait_open(). Throws Error(InvalidConfig).
  static std::unique_ptr<Gateway> open(GatewayConfig config, std::shared_ptr<Receiver> receiver);
  ~Gateway();

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  GatewayState state() const;
  bool wait_open(std::chrono::milliseconds timeout) const;
  /// Why the gateway last left Open or failed to get there.
  std::optional<Errc> last_error() const;

  /// LGW only. Throws NotOpen, AlreadyAttached, or InvalidConfig on an ASGW.
  std::future<AttachOutcome> attach_device(const Ctid& ctid);
  /// Resolves true once the wire is decommissioned. Throws NotOpen, NotCommissioned.
  std::future<bool> detach_device(const Ctid& ctid);
  /// Resolves with the end-to-end delivery outcome. Throws NotOpen,
  /// NotCommissioned, FrameTooLarge.
  std::future<DeliveryOutcome> transmit(const Ctid& ctid, std::string data);

  /// Decommissions every wire, ends the dialog and stops. Idempotent.
  void close();

  /// Fault injection. kill_link stops all traffic in both directions without
  /// closing anything, like a pulled cable, until restore_link().
  void kill_link();
  void restore_link();
  /// Closes the transports abruptly without BYE; stays Degraded until
  /// reconnect() or switch_endpoint().
  void drop_connection();
  /// Opens a new dialog from another local address and access type, then
  /// abandons the old one. Resolves true once Open again.
  std::future<bool> switch_endpoint(AccessType access, std::string local_address);
  std::future<bool> reconnect();

  /// LGW: attached devices. ASGW: devices with an authorized wire.
  std::set<Ctid> ctids() const;
  std::optional<NegotiatedChannel> channel() const;
  bool secure_transport() const;
  GatewayStats stats() const;
  GatewayConfig config() const;

 private:
  struct Impl;
  explicit Gateway(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace msbc
