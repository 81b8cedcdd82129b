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

#include "msbc/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/ssl.h>
#include <openssl/x509.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <mutex>

namespace msbc::net {

namespace {

void set_nonblocking(int fd) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr)
    throw Error(Errc::ConnectFailed, "cannot resolve " + ep.host);
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

std::string to_text(const sockaddr_in& addr) {
  char buf[INET_ADDRSTRLEN] = {};
  ::inet_ntop(AF_INET, &addr.sin_addr, buf, sizeof buf);
  return std::string(buf) + ":" + std::to_string(ntohs(addr.sin_port));
}

std::string ssl_error_text() {
  std::string out;
  while (unsigned long e = ERR_get_error()) {
    char buf[256];
    ERR_error_string_n(e, buf, sizeof buf);
    if (!out.empty()) out += "; ";
    out += buf;
  }
  return out.empty() ? "tls failure" : out;
}

SSL_CTX* server_context() {
  static SSL_CTX* ctx = nullptr;
  static std::once_flag once;
  std::call_once(once, [] {
    ctx = SSL_CTX_new(TLS_server_method());
    SSL_CTX_set_min_proto_version(ctx, TLS1_2_VERSION);
    EVP_PKEY* key = EVP_EC_gen("P-256");
    X509* cert = X509_new();
    X509_set_version(cert, 2);
    ASN1_INTEGER_set(X509_get_serialNumber(cert), 1);
    X509_gmtime_adj(X509_getm_notBefore(cert), 0);
    X509_gmtime_adj(X509_getm_notAfter(cert), 60L * 60 * 24 * 365);
    X509_set_pubkey(cert, key);
    X509_NAME* name = X509_get_subject_name(cert);
    X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC, reinterpret_cast<const unsigned char*>("m2m-is.msbc"), -1,
                               -1, 0);
    X509_set_issuer_name(cert, name);
    X509_sign(cert, key, EVP_sha256());
    SSL_CTX_use_certificate(ctx, cert);
    SSL_CTX_use_PrivateKey(ctx, key);
    X509_free(cert);
    EVP_PKEY_free(key);
  });
  return ctx;
}

SSL_CTX* client_context() {
  static SSL_CTX* ctx = nullptr;
  static std::once_flag once;
  std::call_once(once, [] {
    ctx = SSL_CTX_new(TLS_client_method());
    SSL_CTX_set_min_proto_version(ctx, TLS1_2_VERSION);
    SSL_CTX_set_verify(ctx, SSL_VERIFY_NONE, nullptr);
  });
  return ctx;
}

}  // namespace

std::int64_t steady_now_ms() noexcept {
  using namespace std::chrono;
  return duration_cast<milliseconds>(steady_clock::now().time_since_epoch()).count();
}

Endpoint parse_endpoint(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0)
    throw Error(Errc::InvalidConfig, "endpoint must be host:port, got '" + std::string(text) + "'");
  Endpoint ep;
  ep.host = std::string(text.substr(0, colon));
  auto port = text.substr(colon + 1);
  unsigned value = 0;
  auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
  if (ec != std::errc{} || ptr != port.data() + port.size() || value > 65535)
    throw Error(Errc::InvalidConfig, "bad port in '" + std::string(text) + "'");
  ep.port = static_cast<std::uint16_t>(value);
  return ep;
}

void Socket::reset() noexcept {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

Socket listen_tcp(const Endpoint& at, Endpoint& bound) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw Error(Errc::ConnectFailed, std::strerror(errno));
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  auto addr = resolve(at);
  if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw Error(Errc::ConnectFailed, "bind " + at.str() + ": " + std::strerror(errno));
  if (::listen(s.fd(), 128) != 0) throw Error(Errc::ConnectFailed, std::strerror(errno));
  set_nonblocking(s.fd());
  socklen_t len = sizeof addr;
  ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  bound = parse_endpoint(to_text(addr));
  return s;
}

std::optional<Socket> accept_tcp(const Socket& listener, std::string& remote) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  const int fd = ::accept4(listener.fd(), reinterpret_cast<sockaddr*>(&addr), &len, SOCK_NONBLOCK | SOCK_CLOEXEC);
  if (fd < 0) return std::nullopt;
  set_nodelay(fd);
  remote = to_text(addr);
  return Socket(fd);
}

Socket connect_tcp(const Endpoint& to, const std::string& local_host, std::chrono::milliseconds timeout,
                   std::string* local_out) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw Error(Errc::ConnectFailed, std::strerror(errno));
  if (!local_host.empty()) {
    auto local = resolve(Endpoint{local_host, 0});
    if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&local), sizeof local) != 0)
      throw Error(Errc::ConnectFailed, "bind " + local_host + ": " + std::strerror(errno));
  }
  set_nonblocking(s.fd());
  set_nodelay(s.fd());
  auto addr = resolve(to);
  if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    if (errno != EINPROGRESS) throw Error(Errc::ConnectFailed, to.str() + ": " + std::strerror(errno));
    pollfd p{s.fd(), POLLOUT, 0};
    const int n = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (n <= 0) throw Error(Errc::ConnectFailed, to.str() + ": timeout");
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) throw Error(Errc::ConnectFailed, to.str() + ": " + std::strerror(err));
  }
  if (local_out != nullptr) {
    sockaddr_in local{};
    socklen_t len = sizeof local;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&local), &len);
    *local_out = to_text(local);
  }
  return s;
}

// ---------------------------------------------------------------------------

struct TlsSession::Impl {
  SSL* ssl = nullptr;
  BIO* rbio = nullptr;  // network -> ssl
  BIO* wbio = nullptr;  // ssl -> network
  std::string pending;

  ~Impl() {
    if (ssl != nullptr) SSL_free(ssl);  // frees both BIOs
  }
};

TlsSession::TlsSession(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
TlsSession::~TlsSession() = default;

std::unique_ptr<TlsSession> TlsSession::server() {
  auto impl = std::make_unique<Impl>();
  impl->ssl = SSL_new(server_context());
  impl->rbio = BIO_new(BIO_s_mem());
  impl->wbio = BIO_new(BIO_s_mem());
  SSL_set_bio(impl->ssl, impl->rbio, impl->wbio);
  SSL_set_accept_state(impl->ssl);
  return std::unique_ptr<TlsSession>(new TlsSession(std::move(impl)));
}

std::unique_ptr<TlsSession> TlsSession::client() {
  auto impl = std::make_unique<Impl>();
  impl->ssl = SSL_new(client_context());
  impl->rbio = BIO_new(BIO_s_mem());
  impl->wbio = BIO_new(BIO_s_mem());
  SSL_set_bio(impl->ssl, impl->rbio, impl->wbio);
  SSL_set_connect_state(impl->ssl);
  std::unique_ptr<TlsSession> s(new TlsSession(std::move(impl)));
  s->pump();  // emits the ClientHello
  return s;
}

bool TlsSession::established() const noexcept { return SSL_is_init_finished(impl_->ssl) == 1; }

void TlsSession::pump() {
  SSL* ssl = impl_->ssl;
  if (!SSL_is_init_finished(ssl)) {
    const int rc = SSL_do_handshake(ssl);
    if (rc != 1) {
      const int err = SSL_get_error(ssl, rc);
      if (err != SSL_ERROR_WANT_READ && err != SSL_ERROR_WANT_WRITE)
        throw ProtocolViolation(0, "tls handshake: " + ssl_error_text());
      return;
    }
  }
  while (!impl_->pending.empty()) {
    const int n = SSL_write(ssl, impl_->pending.data(), static_cast<int>(impl_->pending.size()));
    if (n <= 0) {
      const int err = SSL_get_error(ssl, n);
      if (err == SSL_ERROR_WANT_READ || err == SSL_ERROR_WANT_WRITE) return;
      throw ProtocolViolation(0, "tls write: " + ssl_error_text());
    }
    impl_->pending.erase(0, static_cast<std::size_t>(n));
  }
}

std::string TlsSession::feed(std::string_view cipher) {
  if (!cipher.empty()) BIO_write(impl_->rbio, cipher.data(), static_cast<int>(cipher.size()));
  pump();
  std::string plain;
  if (!SSL_is_init_finished(impl_->ssl)) return plain;
  char buf[16384];
  for (;;) {
    const int n = SSL_read(impl_->ssl, buf, sizeof buf);
    if (n > 0) {
      plain.append(buf, static_cast<std::size_t>(n));
      continue;
    }
    const int err = SSL_get_error(impl_->ssl, n);
    if (err == SSL_ERROR_WANT_READ || err == SSL_ERROR_WANT_WRITE || err == SSL_ERROR_ZERO_RETURN) break;
    throw ProtocolViolation(0, "tls read: " + ssl_error_text());
  }
  pump();
  return plain;
}

void TlsSession::write(std::string_view plain) {
  impl_->pending.append(plain);
  pump();
}

std::string TlsSession::drain() {
  std::string out;
  char buf[16384];
  int n = 0;
  while ((n = BIO_read(impl_->wbio, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(n));
  return out;
}

// ---------------------------------------------------------------------------

Link::Link(Socket sock, std::unique_ptr<TlsSession> tls, DecodeLimits limits)
    : sock_(std::move(sock)), tls_(std::move(tls)), decoder_(limits) {
  if (tls_) {
    out_ += tls_->drain();
    flush();
  }
}

std::vector<Frame> Link::consume_plain(std::string_view bytes) {
  if (!tls_) return decoder_.feed(bytes);
  std::string plain = tls_->feed(bytes);
  out_ += tls_->drain();
  return decoder_.feed(plain);
}

std::vector<Frame> Link::read_available() {
  std::string chunk;
  char buf[65536];
  while (!closed_) {
    const ssize_t n = ::recv(sock_.fd(), buf, sizeof buf, 0);
    if (n > 0) {
      chunk.append(buf, static_cast<std::size_t>(n));
      continue;
    }
    if (n == 0) {
      closed_ = true;
      break;
    }
    if (errno == EINTR) continue;
    if (errno != EAGAIN && errno != EWOULDBLOCK) closed_ = true;
    break;
  }
  if (sniffing_) {
    raw_ += chunk;
    return {};
  }
  auto frames = consume_plain(chunk);
  flush();
  return frames;
}

std::vector<Frame> Link::end_sniff(std::unique_ptr<TlsSession> tls) {
  sniffing_ = false;
  tls_ = std::move(tls);
  std::string raw = std::move(raw_);
  raw_.clear();
  auto frames = consume_plain(raw);
  flush();
  return frames;
}

void Link::send(const Frame& frame) { send_raw(encode_frame(frame)); }

void Link::send_raw(std::string_view bytes) {
  if (closed_) return;
  if (tls_) {
    tls_->write(bytes);
    out_ += tls_->drain();
  } else {
    out_.append(bytes);
  }
  flush();
}

void Link::flush() {
  while (!out_.empty() && sock_.valid()) {
    const ssize_t n = ::send(sock_.fd(), out_.data(), out_.size(), MSG_NOSIGNAL);
    if (n > 0) {
      out_.erase(0, static_cast<std::size_t>(n));
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) return;
    closed_ = true;
    out_.clear();
    return;
  }
}

bool Link::flush_blocking(std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  flush();
  while (!out_.empty() && !closed_) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return false;
    pollfd p{sock_.fd(), POLLOUT, 0};
    ::poll(&p, 1, static_cast<int>(left.count()));
    flush();
  }
  return out_.empty();
}

void Link::close() noexcept {
  closed_ = true;
  sock_.reset();
}

WakeFd::WakeFd() : sock_(::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC)) {}

void WakeFd::notify() noexcept {
  std::uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(sock_.fd(), &one, sizeof one);
}

void WakeFd::drain() noexcept {
  std::uint64_t v = 0;
  [[maybe_unused]] auto n = ::read(sock_.fd(), &v, sizeof v);
}

}  // namespace msbc::net
