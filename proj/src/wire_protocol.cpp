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

#include "msbc/wire_protocol.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <limits>

namespace msbc {

const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidFrame: return "InvalidFrame";
    case Errc::ProtocolViolation: return "ProtocolViolation";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::Unacceptable: return "Unacceptable";
    case Errc::OutOfDialog: return "OutOfDialog";
    case Errc::NotFound: return "NotFound";
    case Errc::ParseError: return "ParseError";
    case Errc::ConnectFailed: return "ConnectFailed";
    case Errc::Rejected: return "Rejected";
    case Errc::NotOpen: return "NotOpen";
    case Errc::NotCommissioned: return "NotCommissioned";
    case Errc::AlreadyAttached: return "AlreadyAttached";
    case Errc::FrameTooLarge: return "FrameTooLarge";
    case Errc::ConnectionLost: return "ConnectionLost";
    case Errc::UnknownTarget: return "UnknownTarget";
    case Errc::ScenarioFailed: return "ScenarioFailed";
  }
  return "Unknown";
}

namespace {

constexpr std::string_view kCrlf = "\r\n";
constexpr std::string_view kMagic = "MSBC ";

bool id_char(char c) noexcept {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.' ||
         c == '_' || c == '-';
}

bool id_string(std::string_view s, std::size_t min_len, std::size_t max_len) noexcept {
  return s.size() >= min_len && s.size() <= max_len && std::all_of(s.begin(), s.end(), id_char);
}

bool printable(char c) noexcept {
  const auto u = static_cast<unsigned char>(c);
  return u >= 0x20 && u <= 0x7e;
}

bool header_value_ok(std::string_view v) noexcept {
  return std::all_of(v.begin(), v.end(), printable);
}

bool header_key_ok(std::string_view k) noexcept {
  return id_string(k, 1, 64);
}

template <typename T>
std::optional<T> parse_uint(std::string_view s) noexcept {
  if (s.empty() || s.size() > 20) return std::nullopt;
  if (s.size() > 1 && s.front() == '0') return std::nullopt;
  T value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

bool endpoint_ok(std::string_view ep) noexcept {
  const auto colon = ep.rfind(':');
  if (colon == std::string_view::npos || colon == 0) return false;
  if (!header_value_ok(ep)) return false;
  auto port = parse_uint<std::uint32_t>(ep.substr(colon + 1));
  return port && *port <= 65535;
}

bool verb_needs_ctid(Verb v) noexcept {
  switch (v) {
    case Verb::Commission:
    case Verb::Commissioned:
    case Verb::Decommission:
    case Verb::Decommissioned:
    case Verb::Authorize:
    case Verb::Authorized:
    case Verb::Denied:
    case Verb::PeerDown:
    case Verb::PeerUp:
      return true;
    default:
      return false;
  }
}

bool verb_needs_wire(Verb v) noexcept {
  return v == Verb::Commissioned || v == Verb::Authorized;
}

// Empty string when the control message is well formed, otherwise the reason.
std::string check_control(const ControlMessage& m) {
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& [k, v] = m.params[i];
    if (!header_key_ok(k)) return "bad param key '" + k + "'";
    if (!header_value_ok(v)) return "bad param value for '" + k + "'";
    for (std::size_t j = 0; j < i; ++j)
      if (m.params[j].first == k) return "duplicate param '" + k + "'";
  }
  if (verb_needs_ctid(m.verb)) {
    const auto* c = m.param("Ctid");
    if (c == nullptr || !Ctid::valid(*c)) return std::string("verb ") + to_string(m.verb) + " needs a valid Ctid";
  }
  if (verb_needs_wire(m.verb)) {
    const auto* w = m.param("Wire");
    if (w == nullptr) return std::string("verb ") + to_string(m.verb) + " needs Wire";
    auto n = parse_uint<std::uint32_t>(*w);
    if (!n || *n == 0) return "Wire param must be a bearer wire";
  }
  return {};
}

std::string check_offer(const SessionOffer& o) {
  if (o.max_frame_size < kMinFrameSize || o.max_frame_size > kMaxFrameSize)
    return "max-frame-size out of range";
  if (!endpoint_ok(o.payload_endpoint)) return "bad payload-endpoint";
  if (o.role == Role::asgw && (!o.provider || o.provider->empty())) return "asgw offer needs provider";
  if (o.provider && (o.provider->empty() || !id_string(*o.provider, 1, 64))) return "bad provider";
  return {};
}

std::string check_signal(const SignalMessage& m) {
  for (const auto* field : {&m.from, &m.to, &m.call_id})
    if (field->empty() || !header_value_ok(*field)) return "bad From/To/Call-ID";
  if (m.is_request) {
    if (m.cseq_method != m.method) return "CSeq method must match request method";
    if (m.method == Method::Invite && !m.body) return "INVITE needs a session offer";
    if (m.method != Method::Invite && m.body) return "ACK/BYE carry no body";
  } else {
    if (m.status < 100 || m.status > 699) return "status out of range";
    if (!header_value_ok(m.reason)) return "bad reason";
    if (m.status == 200 && m.cseq_method == Method::Invite && !m.body) return "200 to INVITE needs an answer";
  }
  if (m.body) {
    auto err = check_offer(*m.body);
    if (!err.empty()) return err;
  }
  return {};
}

void header(std::string& out, std::string_view key, std::string_view value) {
  out.append(key);
  out.append(": ");
  out.append(value);
  out.append(kCrlf);
}

void start_line(std::string& out, std::string_view kind, const TxnId& txn) {
  out.append(kMagic);
  out.append(kind);
  out.push_back(' ');
  out.append(txn.str());
  out.append(kCrlf);
}

[[noreturn]] void invalid(const std::string& why) { throw Error(Errc::InvalidFrame, why); }

struct Encoder {
  std::string out;

  void operator()(const WirePacket& p) {
    if (p.wire.is_service()) invalid("SEND on the service wire");
    if (p.seq == 0) invalid("seq starts at 1");
    if (p.payload.size() > kMaxFrameSize) invalid("payload too long");
    start_line(out, "SEND", p.txn);
    header(out, "Wire", std::to_string(p.wire.value));
    header(out, "Seq", std::to_string(p.seq));
    header(out, "Length", std::to_string(p.payload.size()));
    out.append(kCrlf);
    out.append(p.payload);
    out.append(kCrlf);
  }

  void operator()(const DeliveryReport& r) {
    if (r.wire.is_service()) invalid("REPORT on the service wire");
    if (r.seq == 0) invalid("seq starts at 1");
    if (r.status < 100 || r.status > 699) invalid("status out of range");
    start_line(out, "REPORT", r.txn);
    header(out, "Wire", std::to_string(r.wire.value));
    header(out, "Seq", std::to_string(r.seq));
    header(out, "Status", std::to_string(r.status));
    out.append(kCrlf);
  }

  void operator()(const ControlMessage& c) {
    if (auto err = check_control(c); !err.empty()) invalid(err);
    start_line(out, "CONTROL", c.txn);
    header(out, "Wire", "0");
    header(out, "Verb", to_string(c.verb));
    for (const auto& [k, v] : c.params) header(out, k, v);
    out.append(kCrlf);
  }

  void operator()(const SignalMessage& s) {
    if (auto err = check_signal(s); !err.empty()) invalid(err);
    const std::string body = s.body ? encode_offer(*s.body) : std::string{};
    start_line(out, "SIGNAL", s.txn);
    if (s.is_request) {
      header(out, "Method", to_string(s.method));
    } else {
      header(out, "Status", std::to_string(s.status));
      header(out, "Reason", s.reason);
    }
    header(out, "From", s.from);
    header(out, "To", s.to);
    header(out, "Call-ID", s.call_id);
    header(out, "CSeq", std::to_string(s.cseq) + " " + to_string(s.cseq_method));
    header(out, "Access-Type", to_string(s.access));
    header(out, "Length", std::to_string(body.size()));
    out.append(kCrlf);
    out.append(body);
    out.append(kCrlf);
  }
};

using Headers = std::vector<std::pair<std::string_view, std::string_view>>;

// Cursor over one frame. `base` is the absolute stream offset of buf[0].
class FrameParser {
 public:
  FrameParser(std::string_view buf, std::size_t base, const DecodeLimits& limits)
      : buf_(buf), base_(base), limits_(limits) {}

  // nullopt: incomplete. On success `end` is one past the frame.
  std::optional<Frame> parse(std::size_t pos, std::size_t& end);

 private:
  [[noreturn]] void fail(std::size_t pos, const std::string& why) const {
    throw ProtocolViolation(base_ + pos, why);
  }

  // Returns the line content (without CRLF) and advances pos past CRLF.
  std::optional<std::string_view> line(std::size_t& pos) const;

  const std::string_view* find(const Headers& hs, std::string_view key, std::size_t at) const;
  std::string_view require(const Headers& hs, std::string_view key, std::size_t at) const;

  std::string_view buf_;
  std::size_t base_;
  const DecodeLimits& limits_;
};

std::optional<std::string_view> FrameParser::line(std::size_t& pos) const {
  const std::size_t limit = std::min(buf_.size(), pos + limits_.max_line + 2);
  for (std::size_t i = pos; i < limit; ++i) {
    const char c = buf_[i];
    if (c == '\r') {
      if (i + 1 >= buf_.size()) return std::nullopt;
      if (buf_[i + 1] != '\n') fail(i + 1, "CR not followed by LF");
      auto content = buf_.substr(pos, i - pos);
      if (content.size() > limits_.max_line) fail(pos, "line too long");
      pos = i + 2;
      return content;
    }
    if (!printable(c)) fail(i, "non-printable byte in header section");
  }
  if (buf_.size() - pos > limits_.max_line + 1) fail(pos, "line too long");
  return std::nullopt;
}

const std::string_view* FrameParser::find(const Headers& hs, std::string_view key, std::size_t at) const {
  const std::string_view* found = nullptr;
  for (const auto& [k, v] : hs) {
    if (k == key) {
      if (found != nullptr) fail(at, "duplicate header " + std::string(key));
      found = &v;
    }
  }
  return found;
}

std::string_view FrameParser::require(const Headers& hs, std::string_view key, std::size_t at) const {
  const auto* v = find(hs, key, at);
  if (v == nullptr) fail(at, "missing header " + std::string(key));
  return *v;
}

std::optional<Frame> FrameParser::parse(std::size_t pos, std::size_t& end) {
  const std::size_t frame_start = pos;
  const std::size_t avail = std::min(kMagic.size(), buf_.size() - pos);
  for (std::size_t i = 0; i < avail; ++i)
    if (buf_[pos + i] != kMagic[i]) fail(pos + i, "expected frame start 'MSBC '");

  auto start = line(pos);
  if (!start) return std::nullopt;
  auto rest = start->substr(kMagic.size());
  const auto sp = rest.find(' ');
  if (sp == std::string_view::npos) fail(frame_start, "start line needs kind and txn");
  const auto kind = rest.substr(0, sp);
  const auto txn_text = rest.substr(sp + 1);
  if (kind != "SEND" && kind != "REPORT" && kind != "CONTROL" && kind != "SIGNAL")
    fail(frame_start + kMagic.size(), "unknown frame kind");
  if (!TxnId::valid(txn_text)) fail(frame_start + kMagic.size() + sp + 1, "bad txn id");

  Headers headers;
  const std::size_t headers_at = pos;
  for (;;) {
    const std::size_t line_at = pos;
    auto l = line(pos);
    if (!l) return std::nullopt;
    if (l->empty()) break;
    if (headers.size() >= limits_.max_headers) fail(line_at, "too many headers");
    const auto colon = l->find(": ");
    if (colon == std::string_view::npos) fail(line_at, "header line needs ': '");
    auto key = l->substr(0, colon);
    if (!header_key_ok(key)) fail(line_at, "bad header key");
    headers.emplace_back(key, l->substr(colon + 2));
  }

  TxnId txn{std::string(txn_text)};

  auto number = [&](std::string_view key) -> std::uint64_t {
    auto n = parse_uint<std::uint64_t>(require(headers, key, headers_at));
    if (!n) fail(headers_at, "bad number in " + std::string(key));
    return *n;
  };

  auto payload = [&](std::size_t length) -> std::optional<std::string_view> {
    if (length > limits_.max_payload) fail(headers_at, "Length exceeds limit");
    if (buf_.size() - pos < length + 2) return std::nullopt;
    auto p = buf_.substr(pos, length);
    if (buf_[pos + length] != '\r' || buf_[pos + length + 1] != '\n')
      fail(pos + length, "payload not followed by CRLF");
    pos += length + 2;
    return p;
  };

  auto wire_number = [&](std::string_view key, bool bearer) -> WireId {
    auto n = number(key);
    if (n > std::numeric_limits<std::uint32_t>::max()) fail(headers_at, "wire id out of range");
    if (bearer && n == 0) fail(headers_at, "bearer wire must be >= 1");
    return WireId{static_cast<std::uint32_t>(n)};
  };

  if (kind == "SEND") {
    WirePacket p{txn, wire_number("Wire", true), number("Seq"), {}};
    if (p.seq == 0) fail(headers_at, "seq starts at 1");
    auto body = payload(number("Length"));
    if (!body) return std::nullopt;
    p.payload.assign(*body);
    end = pos;
    return Frame{std::move(p)};
  }

  if (kind == "REPORT") {
    DeliveryReport r{txn, wire_number("Wire", true), number("Seq"), 0};
    if (r.seq == 0) fail(headers_at, "seq starts at 1");
    auto status = number("Status");
    if (status < 100 || status > 699) fail(headers_at, "status out of range");
    r.status = static_cast<int>(status);
    end = pos;
    return Frame{std::move(r)};
  }

  if (kind == "CONTROL") {
    if (headers.size() < 2 || headers[0].first != "Wire" || headers[1].first != "Verb")
      fail(headers_at, "CONTROL must start with Wire then Verb");
    if (headers[0].second != "0") fail(headers_at, "control messages travel on wire 0");
    auto verb = parse_verb(headers[1].second);
    if (!verb) fail(headers_at, "unknown verb");
    ControlMessage c{txn, *verb, {}};
    for (std::size_t i = 2; i < headers.size(); ++i)
      c.params.emplace_back(std::string(headers[i].first), std::string(headers[i].second));
    if (auto err = check_control(c); !err.empty()) fail(headers_at, err);
    end = pos;
    return Frame{std::move(c)};
  }

  // SIGNAL
  SignalMessage s{txn};
  const auto* method = find(headers, "Method", headers_at);
  const auto* status = find(headers, "Status", headers_at);
  if ((method == nullptr) == (status == nullptr)) fail(headers_at, "SIGNAL needs exactly one of Method/Status");
  if (method != nullptr) {
    auto m = parse_method(*method);
    if (!m) fail(headers_at, "unknown method");
    s.is_request = true;
    s.method = *m;
  } else {
    s.is_request = false;
    auto st = parse_uint<std::uint32_t>(*status);
    if (!st || *st < 100 || *st > 699) fail(headers_at, "bad status");
    s.status = static_cast<int>(*st);
    s.reason = std::string(require(headers, "Reason", headers_at));
  }
  s.from = std::string(require(headers, "From", headers_at));
  s.to = std::string(require(headers, "To", headers_at));
  s.call_id = std::string(require(headers, "Call-ID", headers_at));
  {
    auto cseq = require(headers, "CSeq", headers_at);
    const auto space = cseq.find(' ');
    if (space == std::string_view::npos) fail(headers_at, "CSeq needs number and method");
    auto n = parse_uint<std::uint32_t>(cseq.substr(0, space));
    auto m = parse_method(cseq.substr(space + 1));
    if (!n || !m) fail(headers_at, "bad CSeq");
    s.cseq = *n;
    s.cseq_method = *m;
  }
  auto access = parse_access(require(headers, "Access-Type", headers_at));
  if (!access) fail(headers_at, "Access-Type must be radio or internet");
  s.access = *access;
  auto body = payload(number("Length"));
  if (!body) return std::nullopt;
  if (!body->empty()) {
    try {
      s.body = decode_offer(*body);
    } catch (const Error& e) {
      fail(headers_at, e.what());
    }
  }
  if (auto err = check_signal(s); !err.empty()) fail(headers_at, err);
  end = pos;
  return Frame{std::move(s)};
}

}  // namespace

Ctid::Ctid(std::string value) : value_(std::move(value)) {
  if (!valid(value_)) throw Error(Errc::InvalidFrame, "invalid CTID '" + value_ + "'");
}

bool Ctid::valid(std::string_view value) noexcept { return id_string(value, 1, 64); }

TxnId::TxnId(std::string value) : value_(std::move(value)) {
  if (!valid(value_)) throw Error(Errc::InvalidFrame, "invalid txn id '" + value_ + "'");
}

bool TxnId::valid(std::string_view value) noexcept { return id_string(value, 8, 32); }

TxnId TxnGenerator::next() {
  std::array<char, 24> buf{};
  std::snprintf(buf.data(), buf.size(), "t%08llx", static_cast<unsigned long long>(++counter_));
  return TxnId{std::string(buf.data())};
}

const char* to_string(Role r) noexcept { return r == Role::lgw ? "lgw" : "asgw"; }
const char* to_string(AccessType a) noexcept { return a == AccessType::radio ? "radio" : "internet"; }
const char* to_string(Security s) noexcept { return s == Security::plain ? "plain" : "secure"; }

std::optional<Role> parse_role(std::string_view s) noexcept {
  if (s == "lgw") return Role::lgw;
  if (s == "asgw") return Role::asgw;
  return std::nullopt;
}

std::optional<AccessType> parse_access(std::string_view s) noexcept {
  if (s == "radio") return AccessType::radio;
  if (s == "internet") return AccessType::internet;
  return std::nullopt;
}

std::optional<Security> parse_security(std::string_view s) noexcept {
  if (s == "plain") return Security::plain;
  if (s == "secure") return Security::secure;
  return std::nullopt;
}

namespace {
constexpr std::array<std::pair<Verb, const char*>, 12> kVerbNames{{
    {Verb::Commission, "COMMISSION"},
    {Verb::Commissioned, "COMMISSIONED"},
    {Verb::Decommission, "DECOMMISSION"},
    {Verb::Decommissioned, "DECOMMISSIONED"},
    {Verb::Authorize, "AUTHORIZE"},
    {Verb::Authorized, "AUTHORIZED"},
    {Verb::Denied, "DENIED"},
    {Verb::Ping, "PING"},
    {Verb::Pong, "PONG"},
    {Verb::PeerDown, "PEER-DOWN"},
    {Verb::PeerUp, "PEER-UP"},
    {Verb::Error, "ERROR"},
}};
}  // namespace

const char* to_string(Verb v) noexcept {
  for (const auto& [verb, name] : kVerbNames)
    if (verb == v) return name;
  return "?";
}

std::optional<Verb> parse_verb(std::string_view s) noexcept {
  for (const auto& [verb, name] : kVerbNames)
    if (s == name) return verb;
  return std::nullopt;
}

const char* to_string(Method m) noexcept {
  switch (m) {
    case Method::Invite: return "INVITE";
    case Method::Ack: return "ACK";
    case Method::Bye: return "BYE";
  }
  return "?";
}

std::optional<Method> parse_method(std::string_view s) noexcept {
  if (s == "INVITE") return Method::Invite;
  if (s == "ACK") return Method::Ack;
  if (s == "BYE") return Method::Bye;
  return std::nullopt;
}

const std::string* ControlMessage::param(std::string_view key) const noexcept {
  for (const auto& [k, v] : params)
    if (k == key) return &v;
  return nullptr;
}

ControlMessage& ControlMessage::set(std::string key, std::string value) {
  for (auto& [k, v] : params) {
    if (k == key) {
      v = std::move(value);
      return *this;
    }
  }
  params.emplace_back(std::move(key), std::move(value));
  return *this;
}

std::string encode_offer(const SessionOffer& offer) {
  if (auto err = check_offer(offer); !err.empty()) invalid(err);
  std::string out;
  header(out, "security", to_string(offer.security));
  header(out, "max-frame-size", std::to_string(offer.max_frame_size));
  header(out, "payload-endpoint", offer.payload_endpoint);
  header(out, "role", to_string(offer.role));
  if (offer.provider) header(out, "provider", *offer.provider);
  return out;
}

SessionOffer decode_offer(std::string_view body) {
  SessionOffer offer;
  bool seen[5] = {};
  constexpr std::array<std::string_view, 5> keys{"security", "max-frame-size", "payload-endpoint", "role",
                                                 "provider"};
  while (!body.empty()) {
    const auto eol = body.find(kCrlf);
    if (eol == std::string_view::npos) invalid("offer line without CRLF");
    auto l = body.substr(0, eol);
    body.remove_prefix(eol + 2);
    const auto colon = l.find(": ");
    if (colon == std::string_view::npos) invalid("offer line needs ': '");
    auto key = l.substr(0, colon);
    auto value = l.substr(colon + 2);
    const auto idx = static_cast<std::size_t>(std::find(keys.begin(), keys.end(), key) - keys.begin());
    if (idx == keys.size()) invalid("unknown offer key '" + std::string(key) + "'");
    if (seen[idx]) invalid("duplicate offer key '" + std::string(key) + "'");
    seen[idx] = true;
    switch (idx) {
      case 0: {
        auto s = parse_security(value);
        if (!s) invalid("bad security");
        offer.security = *s;
        break;
      }
      case 1: {
        auto n = parse_uint<std::uint32_t>(value);
        if (!n) invalid("bad max-frame-size");
        offer.max_frame_size = *n;
        break;
      }
      case 2: offer.payload_endpoint = std::string(value); break;
      case 3: {
        auto r = parse_role(value);
        if (!r) invalid("bad role");
        offer.role = *r;
        break;
      }
      case 4: offer.provider = std::string(value); break;
    }
  }
  if (!seen[0] || !seen[1] || !seen[2] || !seen[3]) invalid("offer missing a required key");
  if (auto err = check_offer(offer); !err.empty()) invalid(err);
  return offer;
}

std::string encode_frame(const Frame& frame) {
  Encoder enc;
  std::visit(enc, frame);
  return std::move(enc.out);
}

DecodeResult decode_stream(std::string_view buffer, const DecodeLimits& limits) {
  DecodeResult result;
  FrameParser parser(buffer, 0, limits);
  std::size_t pos = 0;
  while (pos < buffer.size()) {
    std::size_t end = pos;
    auto frame = parser.parse(pos, end);
    if (!frame) break;
    result.frames.push_back(std::move(*frame));
    pos = end;
  }
  result.consumed = pos;
  return result;
}

std::vector<Frame> StreamDecoder::feed(std::string_view bytes) {
  buffer_.append(bytes);
  DecodeResult r;
  try {
    r = decode_stream(buffer_, limits_);
  } catch (const ProtocolViolation& v) {
    throw ProtocolViolation(base_offset_ + v.offset(), v.reason());
  }
  buffer_.erase(0, r.consumed);
  base_offset_ += r.consumed;
  return std::move(r.frames);
}

}  // namespace msbc
