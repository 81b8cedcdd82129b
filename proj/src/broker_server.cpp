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

#include "msbc/broker_server.hpp"

#include <poll.h>

#include <spdlog/spdlog.h>

namespace msbc {

namespace {
constexpr unsigned char kTlsHandshakeRecord = 0x16;
}

BrokerServer::BrokerServer(BrokerConfig config, SubscriptionDirectory directory) : config_(std::move(config)) {
  config_.validate();
  // The advertised payload endpoint is only known after binding.
  core_ = std::make_unique<Interconnect>(config_, std::move(directory), config_.payload_endpoint);
}

BrokerServer::~BrokerServer() { stop(); }

void BrokerServer::add_event_listener(std::function<void(const BrokerEvent&)> listener) {
  listeners_.push_back(std::move(listener));
}

void BrokerServer::bind() {
  if (bound_) return;
  signaling_listener_ = net::listen_tcp(net::parse_endpoint(config_.signaling_endpoint), signaling_bound_);
  payload_listener_ = net::listen_tcp(net::parse_endpoint(config_.payload_endpoint), payload_bound_);
  auto directory = core_->directory();
  core_ = std::make_unique<Interconnect>(config_, std::move(directory), payload_bound_.str());
  core_->set_event_sink([this](const BrokerEvent& e) {
    spdlog::debug("{}", format_event(e));
    for (auto& l : listeners_) l(e);
  });
  bound_ = true;
  spdlog::info("signaling on {}, payload on {}", signaling_bound_.str(), payload_bound_.str());
}

void BrokerServer::start() {
  bind();
  running_ = true;
  thread_ = std::thread([this] { loop(); });
}

void BrokerServer::run() {
  bind();
  running_ = true;
  loop();
}

void BrokerServer::stop() {
  if (!running_.exchange(false)) {
    if (thread_.joinable()) thread_.join();
    return;
  }
  wake_.notify();
  if (thread_.joinable() && thread_.get_id() != std::this_thread::get_id()) thread_.join();
}

void BrokerServer::apply(Outputs outputs) {
  for (auto& o : outputs) {
    if (auto* send = std::get_if<out::Send>(&o)) {
      auto it = conns_.find(send->conn);
      if (it != conns_.end()) it->second.link->send(send->frame);
    } else {
      const auto id = std::get<out::Close>(o).conn;
      auto it = conns_.find(id);
      if (it == conns_.end()) continue;
      it->second.link->flush_blocking(std::chrono::milliseconds(50));
      conns_.erase(it);
    }
  }
}

void BrokerServer::drop(ConnId id, TimeMs now) {
  auto outputs = core_->on_connection_closed(id, now);
  conns_.erase(id);
  apply(std::move(outputs));
}

void BrokerServer::dispatch(ConnId id, Conn& conn, std::vector<Frame> frames, TimeMs now) {
  for (auto& f : frames) {
    if (!conns_.contains(id)) return;
    if (!conn.payload) {
      const auto* sig = std::get_if<SignalMessage>(&f);
      if (sig == nullptr) {
        spdlog::warn("non-signal frame on signaling connection {}", conn.remote);
        return drop(id, now);
      }
      apply(core_->on_signal(id, *sig, conn.remote, now));
    } else {
      apply(core_->on_payload_frame(id, f, conn.link->secure(), now));
    }
  }
}

void BrokerServer::loop() {
  TimeMs next_tick = net::steady_now_ms() + config_.tick_ms;
  std::vector<pollfd> fds;
  std::vector<ConnId> ids;
  while (running_) {
    fds.clear();
    ids.clear();
    fds.push_back({wake_.fd(), POLLIN, 0});
    fds.push_back({signaling_listener_.fd(), POLLIN, 0});
    fds.push_back({payload_listener_.fd(), POLLIN, 0});
    for (auto& [id, c] : conns_) {
      fds.push_back({c.link->fd(), static_cast<short>(POLLIN | (c.link->wants_write() ? POLLOUT : 0)), 0});
      ids.push_back(id);
    }
    TimeMs due = next_tick;
    {
      std::lock_guard lock(mu_);
      if (auto e = core_->next_expiry()) due = std::min(due, *e);
    }
    const TimeMs wait = std::max<TimeMs>(0, due - net::steady_now_ms());
    ::poll(fds.data(), fds.size(), static_cast<int>(wait));
    if (!running_) break;
    if (fds[0].revents != 0) wake_.drain();

    std::lock_guard lock(mu_);
    const TimeMs now = net::steady_now_ms();
    std::string remote;
    for (int i = 1; i <= 2; ++i) {
      if ((fds[i].revents & POLLIN) == 0) continue;
      const auto& listener = i == 1 ? signaling_listener_ : payload_listener_;
      while (auto sock = net::accept_tcp(listener, remote)) {
        Conn c{std::make_unique<net::Link>(std::move(*sock), nullptr), i == 2, remote};
        if (c.payload) c.link->set_sniffing(true);
        conns_.emplace(next_conn_++, std::move(c));
      }
    }

    for (std::size_t k = 0; k < ids.size(); ++k) {
      const auto& pfd = fds[k + 3];
      if (pfd.revents == 0) continue;
      const ConnId id = ids[k];
      auto it = conns_.find(id);
      if (it == conns_.end()) continue;
      auto& conn = it->second;
      if (pfd.revents & POLLOUT) conn.link->flush();
      if ((pfd.revents & (POLLIN | POLLHUP | POLLERR)) == 0) continue;
      try {
        auto frames = conn.link->read_available();
        if (conn.link->sniffing() && !conn.link->raw().empty()) {
          const bool tls = static_cast<unsigned char>(conn.link->raw().front()) == kTlsHandshakeRecord;
          frames = conn.link->end_sniff(tls ? net::TlsSession::server() : nullptr);
        }
        const bool closed = conn.link->closed();
        dispatch(id, conn, std::move(frames), now);
        if (closed && conns_.contains(id)) drop(id, now);
      } catch (const ProtocolViolation& v) {
        spdlog::warn("dropping {}: {}", conn.remote, v.what());
        drop(id, now);
      }
    }

    if (now >= due) {
      apply(core_->tick(now));
      next_tick = now + config_.tick_ms;
    }
    for (auto& [id, c] : conns_) c.link->flush();
  }
  std::lock_guard lock(mu_);
  conns_.clear();
}

}  // namespace msbc
