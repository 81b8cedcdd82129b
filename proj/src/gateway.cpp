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

#include "msbc/gateway.hpp"

#include <poll.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "msbc/net.hpp"

namespace msbc {

std::chrono::milliseconds Backoff::delay(unsigned attempt) const noexcept {
  const double d = static_cast<double>(initial.count()) * std::pow(multiplier, static_cast<double>(attempt));
  if (!std::isfinite(d) || d >= static_cast<double>(cap.count())) return cap;
  return std::chrono::milliseconds(static_cast<std::int64_t>(d));
}

const char* to_string(GatewayState s) noexcept {
  switch (s) {
    case GatewayState::Closed: return "Closed";
    case GatewayState::Connecting: return "Connecting";
    case GatewayState::Open: return "Open";
    case GatewayState::Degraded: return "Degraded";
  }
  return "?";
}

const char* to_string(GatewayEventKind k) noexcept {
  switch (k) {
    case GatewayEventKind::Opened: return "Opened";
    case GatewayEventKind::Commissioned: return "Commissioned";
    case GatewayEventKind::Denied: return "Denied";
    case GatewayEventKind::ProviderUnavailable: return "ProviderUnavailable";
    case GatewayEventKind::PeerDown: return "PeerDown";
    case GatewayEventKind::PeerUp: return "PeerUp";
    case GatewayEventKind::Decommissioned: return "Decommissioned";
    case GatewayEventKind::ConnectionLost: return "ConnectionLost";
    case GatewayEventKind::ConnectionRestored: return "ConnectionRestored";
  }
  return "?";
}

const char* to_string(DeliveryOutcome o) noexcept {
  switch (o) {
    case DeliveryOutcome::delivered: return "delivered";
    case DeliveryOutcome::peer_unavailable: return "peer_unavailable";
    case DeliveryOutcome::no_wire: return "no_wire";
  }
  return "?";
}

const char* to_string(AttachOutcome o) noexcept {
  switch (o) {
    case AttachOutcome::commissioned: return "commissioned";
    case AttachOutcome::denied: return "denied";
    case AttachOutcome::provider_unavailable: return "provider_unavailable";
    case AttachOutcome::duplicate: return "duplicate";
  }
  return "?";
}

void GatewayConfig::validate() const {
  if (subscriber.empty()) throw Error(Errc::InvalidConfig, "subscriber is required");
  if (role == Role::asgw && (!provider || provider->empty()))
    throw Error(Errc::InvalidConfig, "an asgw needs a provider");
  if (max_frame_size < kMinFrameSize || max_frame_size > kMaxFrameSize)
    throw Error(Errc::InvalidConfig, "max_frame_size out of range");
  if (keepalive_interval.count() <= 0 || keepalive_misses == 0 || report_timeout.count() <= 0)
    throw Error(Errc::InvalidConfig, "timeouts must be > 0");
  if (reconnect_backoff.initial.count() <= 0 || reconnect_backoff.multiplier < 1.0 ||
      reconnect_backoff.cap < reconnect_backoff.initial)
    throw Error(Errc::InvalidConfig, "bad reconnect backoff");
  net::parse_endpoint(broker_signaling_endpoint);
}

namespace {

std::optional<std::uint32_t> wire_of(const ControlMessage& m) {
  const auto* w = m.param("Wire");
  if (w == nullptr) return std::nullopt;
  std::uint32_t out = 0;
  auto [ptr, ec] = std::from_chars(w->data(), w->data() + w->size(), out);
  if (ec != std::errc{} || ptr != w->data() + w->size() || out == 0) return std::nullopt;
  return out;
}

std::optional<Ctid> ctid_of(const ControlMessage& m) {
  const auto* c = m.param("Ctid");
  if (c == nullptr || !Ctid::valid(*c)) return std::nullopt;
  return Ctid{*c};
}

std::string reason_of(const ControlMessage& m) {
  const auto* r = m.param("Reason");
  return r ? *r : std::string();
}

}  // namespace

namespace {

std::uint64_t call_id_seed(const GatewayConfig& c) {
  std::random_device rd;
  const std::uint64_t entropy = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  return c.seed ^ std::hash<std::string>{}(c.subscriber + "/" + c.provider.value_or("")) ^ entropy;
}

}  // namespace

struct Gateway::Impl {
  Impl(GatewayConfig c, std::shared_ptr<Receiver> r)
      : cfg(std::move(c)), rx(std::move(r)), factory(txns, call_id_seed(cfg)) {}

  // Shared with API threads, guarded by mu.
  mutable std::mutex mu;
  mutable std::condition_variable cv;
  GatewayConfig cfg;
  GatewayState state = GatewayState::Connecting;
  std::optional<Errc> last_error;
  std::set<Ctid> view;       // ctids with a usable wire
  std::set<Ctid> attaching;  // LGW attaches in progress
  std::optional<NegotiatedChannel> channel;
  bool secure = false;
  GatewayStats stats;
  std::deque<std::function<void()>> commands;
  bool finished = false;

  std::shared_ptr<Receiver> rx;
  std::thread io;
  net::WakeFd wake;
  std::atomic<bool> link_killed{false};
  std::atomic<bool> abort_connect{false};

  // IO thread only.
  TxnGenerator txns;
  SessionFactory factory;
  Session dialog;
  std::unique_ptr<net::Link> sig;
  std::unique_ptr<net::Link> pay;
  std::vector<std::unique_ptr<net::Link>> zombies;
  std::map<Ctid, std::uint32_t> wires;
  std::map<std::uint32_t, Ctid> by_wire;
  std::map<std::uint32_t, std::uint64_t> seq_out;
  std::map<std::uint32_t, std::uint64_t> seq_in;
  std::set<Ctid> desired;  // LGW: devices to re-attach after a reconnect
  std::map<Ctid, std::promise<AttachOutcome>> attach_p;
  std::map<Ctid, std::promise<bool>> detach_p;
  struct PendingTx {
    std::promise<DeliveryOutcome> promise;
    TimeMs deadline = 0;
  };
  std::map<TxnId, PendingTx> pending_tx;
  std::vector<std::promise<bool>> reconnect_waiters;
  TimeMs last_rx = 0;
  TimeMs last_ping = 0;
  unsigned attempt = 0;
  TimeMs next_attempt = 0;
  bool hold_reconnect = false;
  bool ever_opened = false;
  bool closing = false;
  bool stop = false;

  // ---------------------------------------------------------------------
  // Plumbing

  void post(std::function<void()> fn) {
    {
      std::lock_guard lock(mu);
      commands.push_back(std::move(fn));
    }
    wake.notify();
  }

  void set_state(GatewayState s, std::optional<Errc> err = std::nullopt) {
    {
      std::lock_guard lock(mu);
      state = s;
      if (err) last_error = err;
    }
    cv.notify_all();
  }

  GatewayState current_state() const {
    std::lock_guard lock(mu);
    return state;
  }

  void emit(GatewayEventKind kind, std::optional<Ctid> ctid = std::nullopt, std::string detail = {}) {
    if (rx) rx->on_event(GatewayEvent{kind, std::move(ctid), std::move(detail)});
  }

  void count(std::uint64_t GatewayStats::*field) {
    std::lock_guard lock(mu);
    ++(stats.*field);
  }

  void send_payload(const Frame& f) {
    if (pay && !link_killed) pay->send(f);
  }

  void send_signal(const Frame& f) {
    if (sig && !link_killed) sig->send(f);
  }

  ControlMessage control(Verb v) { return ControlMessage{txns.next(), v, {}}; }

  void install_wire(const Ctid& ctid, std::uint32_t wire) {
    if (auto old = wires.find(ctid); old != wires.end()) by_wire.erase(old->second);
    wires.insert_or_assign(ctid, wire);
    by_wire.insert_or_assign(wire, ctid);
    seq_out[wire] = 0;
    seq_in[wire] = 1;
    std::lock_guard lock(mu);
    view.insert(ctid);
  }

  void remove_wire(const Ctid& ctid) {
    auto it = wires.find(ctid);
    if (it == wires.end()) return;
    by_wire.erase(it->second);
    seq_out.erase(it->second);
    seq_in.erase(it->second);
    wires.erase(it);
    std::lock_guard lock(mu);
    view.erase(ctid);
  }

  void clear_wires() {
    wires.clear();
    by_wire.clear();
    seq_out.clear();
    seq_in.clear();
    std::lock_guard lock(mu);
    view.clear();
  }

  void resolve_attach(const Ctid& ctid, AttachOutcome o) {
    {
      std::lock_guard lock(mu);
      attaching.erase(ctid);
    }
    auto it = attach_p.find(ctid);
    if (it == attach_p.end()) return;
    auto p = std::move(it->second);
    attach_p.erase(it);
    p.set_value(o);
  }

  void resolve_detach(const Ctid& ctid, bool ok) {
    auto it = detach_p.find(ctid);
    if (it == detach_p.end()) return;
    auto p = std::move(it->second);
    detach_p.erase(it);
    p.set_value(ok);
  }

  void resolve_tx(std::map<TxnId, PendingTx>::iterator it, DeliveryOutcome o) {
    auto p = std::move(it->second.promise);
    pending_tx.erase(it);
    {
      std::lock_guard lock(mu);
      switch (o) {
        case DeliveryOutcome::delivered: ++stats.delivered; break;
        case DeliveryOutcome::peer_unavailable: ++stats.peer_unavailable; break;
        case DeliveryOutcome::no_wire: ++stats.no_wire; break;
      }
    }
    p.set_value(o);
  }

  void fail_pending() {
    while (!pending_tx.empty()) resolve_tx(pending_tx.begin(), DeliveryOutcome::peer_unavailable);
    while (!attach_p.empty()) resolve_attach(attach_p.begin()->first, AttachOutcome::provider_unavailable);
    while (!detach_p.empty()) resolve_detach(detach_p.begin()->first, false);
  }

  void resolve_waiters(bool ok) {
    for (auto& w : reconnect_waiters) w.set_value(ok);
    reconnect_waiters.clear();
  }

  // ---------------------------------------------------------------------
  // Connection setup

  // Waits for frames on one link, honouring abort requests.
  std::vector<Frame> wait_frames(net::Link& link, TimeMs deadline) {
    while (true) {
      if (abort_connect) throw Error(Errc::ConnectFailed, "aborted");
      if (link_killed) throw Error(Errc::ConnectFailed, "link down");
      const TimeMs now = net::steady_now_ms();
      if (now >= deadline) throw Error(Errc::ConnectFailed, "timed out");
      link.flush();
      pollfd p{link.fd(), static_cast<short>(POLLIN | (link.wants_write() ? POLLOUT : 0)), 0};
      ::poll(&p, 1, static_cast<int>(std::min<TimeMs>(deadline - now, 20)));
      if (p.revents & POLLOUT) link.flush();
      if (p.revents & (POLLIN | POLLHUP | POLLERR)) {
        auto frames = link.read_available();
        if (!frames.empty()) return frames;
        if (link.closed()) throw Error(Errc::ConnectFailed, "connection closed by server");
      }
    }
  }

  void connect_once() {
    const TimeMs started = net::steady_now_ms();
    set_state(GatewayState::Connecting);
    GatewayConfig c;
    {
      std::lock_guard lock(mu);
      c = cfg;
    }
    try {
      if (link_killed) throw Error(Errc::ConnectFailed, "link down");
      std::string local;
      auto new_sig = std::make_unique<net::Link>(
          net::connect_tcp(net::parse_endpoint(c.broker_signaling_endpoint), c.local_address, c.signaling_timeout,
                           &local),
          nullptr);
      SessionOffer offer;
      offer.max_frame_size = c.max_frame_size;
      offer.payload_endpoint = local;
      auto [dlg, invite] =
          factory.make_invite(c.subscriber, c.role, c.provider, c.access, offer, started);
      new_sig->send(invite);

      const TimeMs deadline = started + c.signaling_timeout.count();
      std::optional<NegotiatedChannel> ch;
      while (!ch) {
        for (auto& f : wait_frames(*new_sig, deadline)) {
          const auto* m = std::get_if<SignalMessage>(&f);
          if (m == nullptr) throw Error(Errc::ConnectFailed, "unexpected frame on signaling");
          auto tr = on_signal(dlg, *m, net::steady_now_ms(), txns);
          dlg = std::move(tr.session);
          for (auto& a : tr.actions) {
            if (auto* s = std::get_if<action::SendSignal>(&a)) new_sig->send(s->msg);
            if (auto* o = std::get_if<action::OpenPayload>(&a)) ch = o->channel;
            if (auto* r = std::get_if<action::Rejected>(&a))
              throw Error(Errc::Rejected, "INVITE answered with " + std::to_string(r->status));
          }
        }
      }

      auto tls = ch->security == Security::secure ? net::TlsSession::client() : nullptr;
      const bool secure_link = tls != nullptr;
      DecodeLimits limits;
      limits.max_payload = ch->max_frame_size;
      auto new_pay = std::make_unique<net::Link>(
          net::connect_tcp(net::parse_endpoint(ch->payload_endpoint), c.local_address, c.signaling_timeout),
          std::move(tls), limits);
      auto hello = control(Verb::Ping);
      hello.set("Call-ID", dlg.call_id);
      new_pay->send(hello);

      // Frames that arrive ahead of the PONG (adopted wires) are handled once
      // the new channel is installed.
      std::vector<Frame> early;
      bool ponged = false;
      while (!ponged) {
        for (auto& f : wait_frames(*new_pay, deadline + c.signaling_timeout.count())) {
          const auto* m = std::get_if<ControlMessage>(&f);
          if (m != nullptr && m->verb == Verb::Pong && m->param("Call-ID") != nullptr &&
              *m->param("Call-ID") == dlg.call_id) {
            ponged = true;
            continue;
          }
          if (m != nullptr && m->verb == Verb::Error && m->param("Ctid") == nullptr)
            throw Error(Errc::ConnectFailed, "payload attach refused: " + reason_of(*m));
          early.push_back(std::move(f));
        }
      }

      // Make before break: the server has already superseded the old dialog.
      discard_links();
      if (!pending_tx.empty() || !attach_p.empty() || !detach_p.empty()) fail_pending();
      clear_wires();
      sig = std::move(new_sig);
      pay = std::move(new_pay);
      dialog = std::move(dlg);
      const TimeMs now = net::steady_now_ms();
      last_rx = last_ping = now;
      attempt = 0;
      {
        std::lock_guard lock(mu);
        channel = ch;
        secure = secure_link;
        state = GatewayState::Open;
        last_error.reset();
        if (ever_opened) ++stats.reconnects;
      }
      cv.notify_all();
      spdlog::debug("{} open ({}, {})", c.subscriber, to_string(ch->security), ch->payload_endpoint);
      for (auto& f : early) on_payload(f, now);
      emit(ever_opened ? GatewayEventKind::ConnectionRestored : GatewayEventKind::Opened);
      ever_opened = true;

      if (c.role == Role::lgw) {
        for (const auto& ctid : desired) {
          if (wires.contains(ctid)) continue;
          auto m = control(Verb::Commission);
          m.set("Ctid", ctid.str());
          send_payload(Frame{std::move(m)});
        }
      }
      resolve_waiters(true);
    } catch (const Error& e) {
      spdlog::debug("{} connect failed: {}", c.subscriber, e.what());
      resolve_waiters(false);
      if (abort_connect) return;
      const bool have_old = sig != nullptr;
      if (have_old) {
        // A failed handover leaves the previous dialog in place.
        set_state(GatewayState::Open, e.code());
        return;
      }
      if (e.code() == Errc::Rejected || (!ever_opened && !c.auto_reconnect)) {
        set_state(GatewayState::Closed, e.code());
        stop = true;
        return;
      }
      set_state(GatewayState::Degraded, e.code());
      if (c.auto_reconnect) {
        next_attempt = net::steady_now_ms() + c.reconnect_backoff.delay(attempt++).count();
      } else {
        hold_reconnect = true;
      }
    }
  }

  void discard_links() {
    if (sig) sig->close();
    if (pay) pay->close();
    sig.reset();
    pay.reset();
  }

  void connection_lost(const std::string& reason) {
    spdlog::debug("{} connection lost: {}", cfg.subscriber, reason);
    if (link_killed) {
      // An unplugged cable does not close anything.
      if (sig) zombies.push_back(std::move(sig));
      if (pay) zombies.push_back(std::move(pay));
    }
    discard_links();
    fail_pending();
    clear_wires();
    dialog = Session{};
    {
      std::lock_guard lock(mu);
      channel.reset();
      secure = false;
    }
    set_state(GatewayState::Degraded, Errc::ConnectionLost);
    emit(GatewayEventKind::ConnectionLost, std::nullopt, reason);
    bool retry;
    {
      std::lock_guard lock(mu);
      retry = cfg.auto_reconnect;
    }
    if (retry && !hold_reconnect) {
      next_attempt = net::steady_now_ms() + cfg.reconnect_backoff.delay(attempt++).count();
    } else {
      hold_reconnect = true;
    }
  }

  // ---------------------------------------------------------------------
  // Inbound traffic

  void on_signal_frame(const SignalMessage& m, TimeMs now) {
    auto tr = on_signal(dialog, m, now, txns);
    dialog = std::move(tr.session);
    for (auto& a : tr.actions)
      if (auto* s = std::get_if<action::SendSignal>(&a)) send_signal(Frame{s->msg});
    if (dialog.state == SessionState::Closed && !closing) connection_lost("bye");
  }

  void on_payload(const Frame& f, TimeMs now) {
    last_rx = now;
    if (const auto* p = std::get_if<WirePacket>(&f)) return on_packet(*p);
    if (const auto* r = std::get_if<DeliveryReport>(&f)) {
      auto it = pending_tx.find(r->txn);
      if (it == pending_tx.end()) return;
      const auto o = r->status == kStatusDelivered   ? DeliveryOutcome::delivered
                     : r->status == kStatusNoSuchWire ? DeliveryOutcome::no_wire
                                                      : DeliveryOutcome::peer_unavailable;
      return resolve_tx(it, o);
    }
    if (const auto* c = std::get_if<ControlMessage>(&f)) return on_control(*c);
    connection_lost("protocol");
  }

  void on_packet(const WirePacket& p) {
    auto it = by_wire.find(p.wire.value);
    if (it == by_wire.end()) {
      send_payload(Frame{DeliveryReport{txns.next(), p.wire, p.seq, kStatusNoSuchWire}});
      return;
    }
    const Ctid ctid = it->second;
    auto& expected = seq_in[p.wire.value];
    if (p.seq != expected) count(&GatewayStats::seq_gaps);
    expected = p.seq + 1;
    count(&GatewayStats::received);
    if (rx) rx->on_data(ctid, p.payload);
    send_payload(Frame{DeliveryReport{p.txn, p.wire, p.seq, kStatusDelivered}});
  }

  void ack_release(const Ctid& ctid, std::uint32_t wire) {
    auto ack = control(Verb::Decommissioned);
    ack.set("Ctid", ctid.str()).set("Wire", std::to_string(wire));
    send_payload(Frame{std::move(ack)});
  }

  void on_control(const ControlMessage& m) {
    const auto ctid = ctid_of(m);
    const auto wire = wire_of(m);
    switch (m.verb) {
      case Verb::Ping: {
        auto pong = control(Verb::Pong);
        if (const auto* t = m.param("Token")) pong.set("Token", *t);
        send_payload(Frame{std::move(pong)});
        return;
      }
      case Verb::Pong:
        return;
      case Verb::Commissioned:
        if (!ctid || !wire) return;
        install_wire(*ctid, *wire);
        if (cfg.role == Role::lgw) desired.insert(*ctid);
        resolve_attach(*ctid, AttachOutcome::commissioned);
        emit(GatewayEventKind::Commissioned, ctid);
        return;
      case Verb::Denied:
        if (!ctid) return;
        desired.erase(*ctid);
        resolve_attach(*ctid, AttachOutcome::denied);
        emit(GatewayEventKind::Denied, ctid, reason_of(m));
        return;
      case Verb::Error: {
        const auto reason = reason_of(m);
        spdlog::debug("{} ERROR {} {}", cfg.subscriber, ctid ? ctid->str() : "-", reason);
        if (!ctid) return;
        if (reason == "provider-unavailable") {
          desired.erase(*ctid);
          resolve_attach(*ctid, AttachOutcome::provider_unavailable);
          emit(GatewayEventKind::ProviderUnavailable, ctid);
        } else if (reason == "duplicate") {
          desired.erase(*ctid);
          resolve_attach(*ctid, AttachOutcome::duplicate);
        } else if (reason == "unknown-ctid") {
          resolve_detach(*ctid, false);
        }
        return;
      }
      case Verb::Authorize: {
        if (!ctid || !wire) return;
        const bool ok = rx ? rx->authorize(*ctid) : true;
        auto reply = control(ok ? Verb::Authorized : Verb::Denied);
        reply.set("Ctid", ctid->str());
        if (ok) reply.set("Wire", std::to_string(*wire));
        send_payload(Frame{std::move(reply)});
        return;
      }
      case Verb::PeerUp:
        if (!ctid || !wire) return;
        install_wire(*ctid, *wire);
        emit(GatewayEventKind::PeerUp, ctid);
        return;
      case Verb::PeerDown:
        if (!ctid || !wire) return;
        if (auto it = wires.find(*ctid); it != wires.end() && it->second == *wire) remove_wire(*ctid);
        desired.erase(*ctid);
        ack_release(*ctid, *wire);
        emit(GatewayEventKind::PeerDown, ctid);
        return;
      case Verb::Decommissioned:
        if (!ctid || !wire) return;
        if (auto it = wires.find(*ctid); it != wires.end() && it->second == *wire) remove_wire(*ctid);
        desired.erase(*ctid);
        ack_release(*ctid, *wire);
        resolve_detach(*ctid, true);
        emit(GatewayEventKind::Decommissioned, ctid);
        return;
      default:
        return;
    }
  }

  void service(std::unique_ptr<net::Link>& link, bool signaling, short revents, TimeMs now) {
    if (!link || revents == 0) return;
    if (revents & POLLOUT) link->flush();
    if ((revents & (POLLIN | POLLHUP | POLLERR)) == 0) return;
    std::vector<Frame> frames;
    try {
      frames = link->read_available();
    } catch (const ProtocolViolation& v) {
      spdlog::warn("{}: {}", cfg.subscriber, v.what());
      return connection_lost("protocol");
    }
    const bool closed = link->closed();
    for (auto& f : frames) {
      if (current_state() != GatewayState::Open) return;
      if (signaling) {
        if (const auto* m = std::get_if<SignalMessage>(&f)) on_signal_frame(*m, now);
      } else {
        on_payload(f, now);
      }
    }
    if (closed && link && current_state() == GatewayState::Open && !closing) connection_lost("transport");
  }

  // One poll round over the live links. Returns after `wait_ms` at most.
  void poll_links(TimeMs wait_ms, bool include_wake) {
    std::vector<pollfd> fds;
    if (include_wake) fds.push_back({wake.fd(), POLLIN, 0});
    const bool live = !link_killed && current_state() == GatewayState::Open;
    const std::size_t base = fds.size();
    if (live && sig) fds.push_back({sig->fd(), static_cast<short>(POLLIN | (sig->wants_write() ? POLLOUT : 0)), 0});
    const std::size_t pay_at = fds.size();
    if (live && pay) fds.push_back({pay->fd(), static_cast<short>(POLLIN | (pay->wants_write() ? POLLOUT : 0)), 0});
    ::poll(fds.data(), fds.size(), static_cast<int>(std::max<TimeMs>(0, wait_ms)));
    if (include_wake && fds[0].revents != 0) wake.drain();
    if (!live) return;
    const TimeMs now = net::steady_now_ms();
    const short sig_ev = (sig && base < pay_at) ? fds[base].revents : 0;
    const short pay_ev = (pay && pay_at < fds.size()) ? fds[pay_at].revents : 0;
    service(sig, true, sig_ev, now);
    if (current_state() == GatewayState::Open) service(pay, false, pay_ev, now);
  }

  void housekeeping(TimeMs now) {
    for (auto it = pending_tx.begin(); it != pending_tx.end();) {
      if (now >= it->second.deadline) {
        auto next = std::next(it);
        resolve_tx(it, DeliveryOutcome::peer_unavailable);
        it = next;
      } else {
        ++it;
      }
    }
    if (current_state() != GatewayState::Open || closing) return;
    const TimeMs interval = cfg.keepalive_interval.count();
    const TimeMs gap = now - last_rx;
    if (gap >= interval * static_cast<TimeMs>(cfg.keepalive_misses)) return connection_lost("watchdog");
    if (gap >= interval && now - last_ping >= interval) {
      auto ping = control(Verb::Ping);
      ping.set("Token", std::to_string(now));
      send_payload(Frame{std::move(ping)});
      last_ping = now;
    }
  }

  void flush_links() {
    if (link_killed) return;
    if (sig) sig->flush();
    if (pay) pay->flush();
  }

  // ---------------------------------------------------------------------
  // Commands (IO thread)

  void do_attach(const Ctid& ctid, std::promise<AttachOutcome> p) {
    if (current_state() != GatewayState::Open || wires.contains(ctid)) {
      {
        std::lock_guard lock(mu);
        attaching.erase(ctid);
      }
      p.set_value(wires.contains(ctid) ? AttachOutcome::duplicate : AttachOutcome::provider_unavailable);
      return;
    }
    desired.insert(ctid);
    attach_p.insert_or_assign(ctid, std::move(p));
    auto m = control(Verb::Commission);
    m.set("Ctid", ctid.str());
    send_payload(Frame{std::move(m)});
  }

  void do_detach(const Ctid& ctid, std::promise<bool> p) {
    desired.erase(ctid);
    if (current_state() != GatewayState::Open || !wires.contains(ctid)) return p.set_value(false);
    detach_p.insert_or_assign(ctid, std::move(p));
    auto m = control(Verb::Decommission);
    m.set("Ctid", ctid.str());
    send_payload(Frame{std::move(m)});
  }

  void do_transmit(const Ctid& ctid, std::string data, std::promise<DeliveryOutcome> p) {
    auto it = wires.find(ctid);
    count(&GatewayStats::sent);
    if (current_state() != GatewayState::Open || it == wires.end()) {
      std::lock_guard lock(mu);
      ++stats.no_wire;
      p.set_value(DeliveryOutcome::no_wire);
      return;
    }
    const std::uint32_t wire = it->second;
    TxnId txn = txns.next();
    const std::uint64_t seq = ++seq_out[wire];
    send_payload(Frame{WirePacket{txn, WireId{wire}, seq, std::move(data)}});
    pending_tx.emplace(std::move(txn), PendingTx{std::move(p), net::steady_now_ms() + cfg.report_timeout.count()});
  }

  void pump_until(const std::function<bool()>& done, TimeMs deadline) {
    while (!done() && current_state() == GatewayState::Open && !link_killed) {
      const TimeMs now = net::steady_now_ms();
      if (now >= deadline) return;
      flush_links();
      poll_links(std::min<TimeMs>(deadline - now, 20), false);
    }
  }

  void do_close() {
    closing = true;
    if (current_state() == GatewayState::Open && !link_killed) {
      const TimeMs deadline = net::steady_now_ms() + cfg.close_timeout.count();
      desired.clear();
      for (const auto& [ctid, wire] : wires) {
        auto m = control(Verb::Decommission);
        m.set("Ctid", ctid.str());
        send_payload(Frame{std::move(m)});
      }
      pump_until([&] { return wires.empty(); }, deadline);
      if (current_state() == GatewayState::Open && sig) {
        send_signal(Frame{make_bye(dialog, txns, net::steady_now_ms())});
        pump_until([&] { return dialog.state == SessionState::Closed; },
                   net::steady_now_ms() + cfg.close_timeout.count());
      }
      flush_links();
      if (sig) sig->flush_blocking(std::chrono::milliseconds(100));
    }
    discard_links();
    zombies.clear();
    fail_pending();
    clear_wires();
    resolve_waiters(false);
    {
      std::lock_guard lock(mu);
      channel.reset();
      secure = false;
    }
    set_state(GatewayState::Closed);
    stop = true;
  }

  void do_switch(std::optional<AccessType> access, std::optional<std::string> local, std::promise<bool> p) {
    {
      std::lock_guard lock(mu);
      if (access) cfg.access = *access;
      if (local) cfg.local_address = *local;
    }
    if (link_killed.exchange(false)) zombies.clear();
    hold_reconnect = false;
    reconnect_waiters.push_back(std::move(p));
    connect_once();
  }

  void do_drop() {
    if (current_state() != GatewayState::Open) {
      hold_reconnect = true;
      return;
    }
    hold_reconnect = true;
    connection_lost("dropped");
  }

  // ---------------------------------------------------------------------

  void run_commands() {
    std::deque<std::function<void()>> batch;
    {
      std::lock_guard lock(mu);
      batch.swap(commands);
    }
    for (auto& fn : batch) {
      if (stop) break;
      fn();
    }
  }

  void run() {
    next_attempt = net::steady_now_ms();
    while (!stop) {
      run_commands();
      if (stop) break;
      TimeMs now = net::steady_now_ms();
      const auto st = current_state();
      const bool want_connect = (st == GatewayState::Connecting || st == GatewayState::Degraded) &&
                                !hold_reconnect && now >= next_attempt;
      if (want_connect) {
        connect_once();
        continue;
      }
      TimeMs wait = 20;
      if ((st == GatewayState::Connecting || st == GatewayState::Degraded) && !hold_reconnect)
        wait = std::clamp<TimeMs>(next_attempt - now, 0, 20);
      flush_links();
      poll_links(wait, true);
      housekeeping(net::steady_now_ms());
      flush_links();
    }
    std::lock_guard lock(mu);
    finished = true;
    cv.notify_all();
  }
};

Gateway::Gateway(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

std::unique_ptr<Gateway> Gateway::open(GatewayConfig config, std::shared_ptr<Receiver> receiver) {
  config.validate();
  auto impl = std::make_unique<Impl>(std::move(config), std::move(receiver));
  auto* raw = impl.get();
  std::unique_ptr<Gateway> gw(new Gateway(std::move(impl)));
  raw->io = std::thread([raw] { raw->run(); });
  return gw;
}

Gateway::~Gateway() {
  close();
}

GatewayState Gateway::state() const {
  std::lock_guard lock(impl_->mu);
  return impl_->state;
}

bool Gateway::wait_open(std::chrono::milliseconds timeout) const {
  std::unique_lock lock(impl_->mu);
  impl_->cv.wait_for(lock, timeout, [&] {
    return impl_->state == GatewayState::Open || impl_->state == GatewayState::Closed;
  });
  return impl_->state == GatewayState::Open;
}

std::optional<Errc> Gateway::last_error() const {
  std::lock_guard lock(impl_->mu);
  return impl_->last_error;
}

std::future<AttachOutcome> Gateway::attach_device(const Ctid& ctid) {
  {
    std::lock_guard lock(impl_->mu);
    if (impl_->cfg.role != Role::lgw) throw Error(Errc::InvalidConfig, "only a local gateway attaches devices");
    if (impl_->state != GatewayState::Open) throw Error(Errc::NotOpen, "gateway is not open");
    if (impl_->view.contains(ctid) || impl_->attaching.contains(ctid))
      throw Error(Errc::AlreadyAttached, ctid.str());
    impl_->attaching.insert(ctid);
  }
  auto p = std::make_shared<std::promise<AttachOutcome>>();
  auto f = p->get_future();
  impl_->post([impl = impl_.get(), ctid, p] { impl->do_attach(ctid, std::move(*p)); });
  return f;
}

std::future<bool> Gateway::detach_device(const Ctid& ctid) {
  {
    std::lock_guard lock(impl_->mu);
    if (impl_->state != GatewayState::Open) throw Error(Errc::NotOpen, "gateway is not open");
    if (!impl_->view.contains(ctid)) throw Error(Errc::NotCommissioned, ctid.str());
  }
  auto p = std::make_shared<std::promise<bool>>();
  auto f = p->get_future();
  impl_->post([impl = impl_.get(), ctid, p] { impl->do_detach(ctid, std::move(*p)); });
  return f;
}

std::future<DeliveryOutcome> Gateway::transmit(const Ctid& ctid, std::string data) {
  {
    std::lock_guard lock(impl_->mu);
    if (impl_->state != GatewayState::Open) throw Error(Errc::NotOpen, "gateway is not open");
    if (!impl_->view.contains(ctid)) throw Error(Errc::NotCommissioned, ctid.str());
    if (impl_->channel && data.size() > impl_->channel->max_frame_size)
      throw Error(Errc::FrameTooLarge, std::to_string(data.size()) + " > " +
                                           std::to_string(impl_->channel->max_frame_size));
  }
  auto p = std::make_shared<std::promise<DeliveryOutcome>>();
  auto f = p->get_future();
  impl_->post([impl = impl_.get(), ctid, data = std::move(data), p]() mutable {
    impl->do_transmit(ctid, std::move(data), std::move(*p));
  });
  return f;
}

void Gateway::close() {
  if (!impl_->io.joinable()) return;
  if (impl_->io.get_id() == std::this_thread::get_id()) throw Error(Errc::InvalidConfig, "close() from a callback");
  impl_->abort_connect = impl_->current_state() == GatewayState::Connecting;
  impl_->post([impl = impl_.get()] {
    impl->abort_connect = false;
    if (!impl->stop) impl->do_close();
  });
  impl_->io.join();
}

void Gateway::kill_link() { impl_->link_killed = true; }

void Gateway::restore_link() {
  impl_->post([impl = impl_.get()] {
    if (!impl->link_killed.exchange(false)) return;
    impl->zombies.clear();
    impl->next_attempt = net::steady_now_ms();
  });
}

void Gateway::drop_connection() {
  impl_->post([impl = impl_.get()] { impl->do_drop(); });
}

std::future<bool> Gateway::switch_endpoint(AccessType access, std::string local_address) {
  auto p = std::make_shared<std::promise<bool>>();
  auto f = p->get_future();
  impl_->post([impl = impl_.get(), access, local = std::move(local_address), p] {
    impl->do_switch(access, local, std::move(*p));
  });
  return f;
}

std::future<bool> Gateway::reconnect() {
  auto p = std::make_shared<std::promise<bool>>();
  auto f = p->get_future();
  impl_->post([impl = impl_.get(), p] { impl->do_switch(std::nullopt, std::nullopt, std::move(*p)); });
  return f;
}

std::set<Ctid> Gateway::ctids() const {
  std::lock_guard lock(impl_->mu);
  return impl_->view;
}

std::optional<NegotiatedChannel> Gateway::channel() const {
  std::lock_guard lock(impl_->mu);
  return impl_->channel;
}

bool Gateway::secure_transport() const {
  std::lock_guard lock(impl_->mu);
  return impl_->secure;
}

GatewayStats Gateway::stats() const {
  std::lock_guard lock(impl_->mu);
  return impl_->stats;
}

GatewayConfig Gateway::config() const {
  std::lock_guard lock(impl_->mu);
  return impl_->cfg;
}

}  // namespace msbc
