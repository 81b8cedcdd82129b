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

// Text framing shared by signaling and payload channels.
//
//   frame       = start-line *(header-line) CRLF [payload CRLF]
//   start-line  = "MSBC" SP kind SP txn CRLF     ; SEND | REPORT | CONTROL | SIGNAL
//   header-line = key ":" SP value CRLF
//
// SEND and SIGNAL carry a Length header; exactly that many payload bytes
// follow the blank line, then a CRLF. Payloads are never scanned, so they may
// contain CR, LF or anything that looks like a frame.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "msbc/error.hpp"

namespace msbc {

inline constexpr std::uint32_t kMinFrameSize = 64;
inline constexpr std::uint32_t kMaxFrameSize = 1048576;
inline constexpr std::uint32_t kDefaultFrameSize = 16384;

inline constexpr int kStatusDelivered = 200;
inline constexpr int kStatusPeerUnavailable = 480;
inline constexpr int kStatusNoSuchWire = 481;

/// Connected Thing Identifier. 1..64 chars of [A-Za-z0-9._-], compared byte-wise.
class Ctid {
 public:
  /// Throws Error(InvalidFrame) when the value violates the charset or length.
  explicit Ctid(std::string value);

  static bool valid(std::string_view value) noexcept;

  const std::string& str() const noexcept { return value_; }

  friend bool operator==(const Ctid&, const Ctid&) = default;
  friend auto operator<=>(const Ctid&, const Ctid&) = default;

 private:
  std::string value_;
};

/// Per-session wire number. 0 is the service wire.
struct WireId {
  std::uint32_t value = 0;

  constexpr bool is_service() const noexcept { return value == 0; }

  friend constexpr bool operator==(WireId, WireId) = default;
  friend constexpr auto operator<=>(WireId, WireId) = default;
};

inline constexpr WireId kServiceWire{0};

/// Transaction id: 8..32 chars, same charset as Ctid.
class TxnId {
 public:
  explicit TxnId(std::string value);

  static bool valid(std::string_view value) noexcept;

  const std::string& str() const noexcept { return value_; }

  friend bool operator==(const TxnId&, const TxnId&) = default;
  friend auto operator<=>(const TxnId&, const TxnId&) = default;

 private:
  std::string value_;
};

/// Monotonic transaction id source. Ids are "t" followed by at least eight
/// lowercase hex digits of a 64-bit counter, so they never repeat.
class TxnGenerator {
 public:
  TxnId next();

  std::uint64_t issued() const noexcept { return counter_; }

 private:
  std::uint64_t counter_ = 0;
};

enum class Role { lgw, asgw };
enum class AccessType { radio, internet };
enum class Security { plain, secure };

const char* to_string(Role) noexcept;
const char* to_string(AccessType) noexcept;
const char* to_string(Security) noexcept;
std::optional<Role> parse_role(std::string_view) noexcept;
std::optional<AccessType> parse_access(std::string_view) noexcept;
std::optional<Security> parse_security(std::string_view) noexcept;

struct WirePacket {
  TxnId txn;
  WireId wire;
  std::uint64_t seq = 0;
  std::string payload;

  friend bool operator==(const WirePacket&, const WirePacket&) = default;
};

struct DeliveryReport {
  TxnId txn;
  WireId wire;
  std::uint64_t seq = 0;
  int status = kStatusDelivered;

  friend bool operator==(const DeliveryReport&, const DeliveryReport&) = default;
};

enum class Verb {
  Commission,
  Commissioned,
  Decommission,
  Decommissioned,
  Authorize,
  Authorized,
  Denied,
  Ping,
  Pong,
  PeerDown,
  PeerUp,
  Error,
};

const char* to_string(Verb) noexcept;
std::optional<Verb> parse_verb(std::string_view) noexcept;

struct ControlMessage {
  TxnId txn;
  Verb verb = Verb::Ping;
  std::vector<std::pair<std::string, std::string>> params;

  const std::string* param(std::string_view key) const noexcept;
  ControlMessage& set(std::string key, std::string value);

  friend bool operator==(const ControlMessage&, const ControlMessage&) = default;
};

struct SessionOffer {
  Security security = Security::plain;
  std::uint32_t max_frame_size = kDefaultFrameSize;
  std::string payload_endpoint;
  Role role = Role::lgw;
  std::optional<std::string> provider;

  friend bool operator==(const SessionOffer&, const SessionOffer&) = default;
};

enum class Method { Invite, Ack, Bye };

const char* to_string(Method) noexcept;
std::optional<Method> parse_method(std::string_view) noexcept;

struct SignalMessage {
  TxnId txn;
  bool is_request = true;
  Method method = Method::Invite;  // request method
  int status = 0;                  // response only
  std::string reason;              // response only
  std::string from;
  std::string to;
  std::string call_id;
  std::uint32_t cseq = 1;
  Method cseq_method = Method::Invite;
  AccessType access = AccessType::radio;
  std::optional<SessionOffer> body;

  friend bool operator==(const SignalMessage&, const SignalMessage&) = default;
};

using Frame = std::variant<WirePacket, DeliveryReport, ControlMessage, SignalMessage>;

/// Serializes a frame. Deterministic; throws Error(InvalidFrame) if the frame
/// breaks an invariant of its type.
std::string encode_frame(const Frame& frame);

std::string encode_offer(const SessionOffer& offer);
/// Throws Error(InvalidFrame).
SessionOffer decode_offer(std::string_view body);

struct DecodeLimits {
  std::size_t max_payload = kMaxFrameSize;
  std::size_t max_line = 1024;
  std::size_t max_headers = 64;
};

struct DecodeResult {
  std::vector<Frame> frames;
  std::size_t consumed = 0;
};

/// Parses every complete frame at the front of `buffer`. Never consumes a
/// partial frame. Throws ProtocolViolation on bytes that cannot begin or
/// continue a valid stream.
DecodeResult decode_stream(std::string_view buffer, const DecodeLimits& limits = {});

/// Incremental wrapper over decode_stream. Single owner; offsets in
/// violations are relative to the start of the whole stream.
class StreamDecoder {
 public:
  explicit StreamDecoder(DecodeLimits limits = {}) : limits_(limits) {}

  std::vector<Frame> feed(std::string_view bytes);

  void set_max_payload(std::size_t n) noexcept { limits_.max_payload = n; }
  std::size_t buffered() const noexcept { return buffer_.size(); }

 private:
  DecodeLimits limits_;
  std::string buffer_;
  std::size_t base_offset_ = 0;
};

}  // namespace msbc
