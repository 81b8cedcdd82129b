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

// Stream transport plumbing: non-blocking TCP sockets, an optional TLS layer
// driven through memory BIOs, and a Link that turns bytes into frames.

#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msbc/wire_protocol.hpp"

namespace msbc::net {

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }
};

/// Milliseconds on the process-wide monotonic clock. Brokers, gateways and
/// the harness all stamp events with this.
std::int64_t steady_now_ms() noexcept;

/// Throws Error(InvalidConfig).
Endpoint parse_endpoint(std::string_view text);

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) noexcept : fd_(fd) {}
  ~Socket() { reset(); }
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void reset() noexcept;

 private:
  int fd_ = -1;
};

/// Bound, listening, non-blocking socket. Port 0 picks an ephemeral port;
/// `bound` reports the actual address.
Socket listen_tcp(const Endpoint& at, Endpoint& bound);

/// Accepts one pending connection (non-blocking). nullopt when none is ready.
std::optional<Socket> accept_tcp(const Socket& listener, std::string& remote);

/// Connects with a deadline, optionally binding a local address first.
/// Returns a non-blocking socket. Throws Error(ConnectFailed).
Socket connect_tcp(const Endpoint& to, const std::string& local_host, std::chrono::milliseconds timeout,
                   std::string* local_out = nullptr);

/// Process-wide TLS material. The server side uses an ephemeral self-signed
/// certificate created on first use.
class TlsSession {
 public:
  static std::unique_ptr<TlsSession> server();
  static std::unique_ptr<TlsSession> client();
  ~TlsSession();

  TlsSession(const TlsSession&) = delete;
  TlsSession& operator=(const TlsSession&) = delete;

  /// Ciphertext from the network; returns decrypted application bytes.
  /// Throws Error(ProtocolViolation) on TLS failure.
  std::string feed(std::string_view cipher);
  /// Queues plaintext; it is encrypted as soon as the handshake allows.
  void write(std::string_view plain);
  /// Ciphertext ready for the network.
  std::string drain();
  bool established() const noexcept;

 private:
  struct Impl;
  explicit TlsSession(std::unique_ptr<Impl> impl);
  void pump();
  std::unique_ptr<Impl> impl_;
};

/// One framed connection. Not thread-safe; owned by a single event loop.
class Link {
 public:
  Link(Socket sock, std::unique_ptr<TlsSession> tls, DecodeLimits limits = {});

  int fd() const noexcept { return sock_.fd(); }
  bool secure() const noexcept { return tls_ != nullptr; }
  bool closed() const noexcept { return closed_; }
  bool wants_write() const noexcept { return !out_.empty(); }

  /// Reads whatever is available. Returns decoded frames; sets closed() on
  /// EOF or error. Throws ProtocolViolation on malformed input.
  std::vector<Frame> read_available();
  void send(const Frame& frame);
  void send_raw(std::string_view bytes);
  /// Writes as much buffered output as the socket accepts.
  void flush();
  /// Blocks (polling) until output drains or the deadline passes.
  bool flush_blocking(std::chrono::milliseconds timeout);
  void close() noexcept;

  void set_max_payload(std::size_t n) noexcept { decoder_.set_max_payload(n); }

  /// Server side: while sniffing, read_available() only buffers raw bytes so
  /// the caller can decide between TLS and plain framing from the first byte.
  void set_sniffing(bool on) noexcept { sniffing_ = on; }
  bool sniffing() const noexcept { return sniffing_; }
  const std::string& raw() const noexcept { return raw_; }
  /// Ends sniffing, optionally wrapping the link in `tls`, and decodes the
  /// bytes buffered so far.
  std::vector<Frame> end_sniff(std::unique_ptr<TlsSession> tls);

 private:
  std::vector<Frame> consume_plain(std::string_view plain);

  Socket sock_;
  std::unique_ptr<TlsSession> tls_;
  StreamDecoder decoder_;
  std::string out_;
  std::string raw_;
  bool closed_ = false;
  bool sniffing_ = false;
};

/// Wakes a poll loop from another thread.
class WakeFd {
 public:
  WakeFd();
  int fd() const noexcept { return sock_.fd(); }
  void notify() noexcept;
  void drain() noexcept;

 private:
  Socket sock_;
};

}  // namespace msbc::net
