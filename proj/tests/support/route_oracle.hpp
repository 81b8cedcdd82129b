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

// Packet routing checked against a plain lookup in a snapshot of the wire
// table. Tables come from random commission / outage / release histories.

#pragma once

#include <random>
#include <sstream>
#include <string>

#include "fake_net.hpp"

namespace msbc::route_oracle {

struct Result {
  std::size_t checked = 0;
  std::size_t forwarded = 0;
  std::size_t buffered = 0;
  std::size_t rejected = 0;
  std::size_t mismatches = 0;
  std::string first_mismatch;
};

enum class Expect { Report, Forward, Buffer };

struct Expected {
  Expect kind = Expect::Report;
  int status = 0;
  ConnId conn = 0;
  std::uint32_t wire = 0;
  std::uint64_t seq = 0;
  std::string provider;
};

inline const SessionInfo* find(const std::vector<SessionInfo>& ss, SessionId id) {
  for (const auto& s : ss)
    if (s.id == id) return &s;
  return nullptr;
}

inline Expected expect(const Interconnect& core, const std::vector<SessionInfo>& ss, const SessionInfo& src,
                       std::uint32_t wire, std::size_t size) {
  const auto& cfg = core.config();
  const WireTableEntry* hit = nullptr;
  bool from_lgw = false;
  for (const auto& [id, e] : core.wire_table()) {
    if (e.lgw_session == src.id && e.lgw_wire.value == wire) {
      hit = &e;
      from_lgw = true;
    } else if (e.asgw_session == src.id && e.asgw_wire && e.asgw_wire->value == wire) {
      hit = &e;
    }
  }
  Expected x;
  x.conn = *src.payload_conn;
  if (hit == nullptr || hit->state == WireState::Pending) {
    x.status = kStatusNoSuchWire;
    return x;
  }
  if (hit->state == WireState::Released) {
    x.status = kStatusPeerUnavailable;
    return x;
  }
  if (from_lgw && hit->state == WireState::Buffering) {
    if (core.buffered_packets(hit->provider) + 1 > cfg.buffer_max_packets ||
        core.buffered_bytes(hit->provider) + size > cfg.buffer_max_bytes) {
      x.status = kStatusPeerUnavailable;
      return x;
    }
    x.kind = Expect::Buffer;
    x.provider = hit->provider;
    return x;
  }
  const SessionId dest_id = from_lgw ? *hit->asgw_session : hit->lgw_session;
  const auto* dest = find(ss, dest_id);
  if (dest == nullptr || !dest->live || !dest->payload_conn || !dest->dialog.negotiated ||
      size > dest->dialog.negotiated->max_frame_size) {
    x.status = kStatusPeerUnavailable;
    return x;
  }
  x.kind = Expect::Forward;
  x.conn = *dest->payload_conn;
  x.wire = from_lgw ? hit->asgw_wire->value : hit->lgw_wire.value;
  x.seq = (from_lgw ? hit->seq_to_asgw : hit->seq_to_lgw) + 1;
  return x;
}

inline std::string check(const Expected& x, const Outputs& out, const WirePacket& pkt, std::size_t buffered_before,
                         std::size_t buffered_after) {
  std::ostringstream why;
  switch (x.kind) {
    case Expect::Buffer:
      if (!out.empty()) why << "expected buffering, got " << out.size() << " outputs";
      else if (buffered_after != buffered_before + 1) why << "buffer did not grow";
      break;
    case Expect::Report: {
      const auto* s = out.size() == 1 ? std::get_if<out::Send>(&out[0]) : nullptr;
      const auto* r = s ? std::get_if<DeliveryReport>(&s->frame) : nullptr;
      if (r == nullptr) why << "expected one report";
      else if (s->conn != x.conn || r->status != x.status || r->txn != pkt.txn || r->wire != pkt.wire ||
               r->seq != pkt.seq)
        why << "report mismatch: status " << r->status << " want " << x.status;
      break;
    }
    case Expect::Forward: {
      const auto* s = out.size() == 1 ? std::get_if<out::Send>(&out[0]) : nullptr;
      const auto* p = s ? std::get_if<WirePacket>(&s->frame) : nullptr;
      if (p == nullptr) why << "expected one forwarded packet";
      else if (s->conn != x.conn || p->wire.value != x.wire || p->seq != x.seq || p->payload != pkt.payload)
        why << "forward mismatch: wire " << p->wire.value << " want " << x.wire << ", seq " << p->seq << " want "
            << x.seq;
      break;
    }
  }
  return why.str();
}

/// Builds `tables` random broker states and probes each `probes` times.
inline Result run(int tables, int probes, std::uint64_t seed) {
  Result res;
  std::mt19937_64 rng(seed);
  const std::vector<std::pair<std::string, std::string>> devices{
      {"home", "heart-1"}, {"home", "heart-2"}, {"home", "milk-1"},   {"home", "meter-1"},
      {"cabin", "heart-3"}, {"cabin", "milk-2"}, {"cabin", "meter-2"}, {"cabin", "milk-special"}};
  const std::vector<std::string> providers{"health", "grocery", "utility"};

  for (int t = 0; t < tables; ++t) {
    BrokerConfig cfg;
    cfg.keepalive_interval_ms = 200;
    cfg.keepalive_misses = 3;
    cfg.max_frame_size = 1024;
    cfg.buffer_max_packets = 1 + rng() % 8;
    cfg.buffer_max_bytes = 512 + rng() % 4096;
    fake::FakeNet net{cfg, fake::sample_directory()};
    for (const auto& p : providers) net.open(p, Role::asgw, "sip:" + p + "@providers.msbc", p);
    net.open("home", Role::lgw, "sip:home@lgw.msbc");
    net.open("cabin", Role::lgw, "sip:cabin@lgw.msbc");
    for (const auto& [lgw, ctid] : devices) net.commission(lgw, ctid);

    for (int op = 0; op < 30; ++op) {
      const auto roll = rng() % 10;
      const auto& [lgw, ctid] = devices[rng() % devices.size()];
      const auto& p = providers[rng() % providers.size()];
      if (roll < 2) {
        if (net.gw(p).open) net.drop(p);
      } else if (roll < 4) {
        if (!net.gw(p).open) {
          net.gw(p).allow = rng() % 4 != 0;
          net.reopen(p);
          net.gw(p).allow = true;
        }
      } else if (roll < 6) {
        net.commission(lgw, ctid);
      } else if (roll < 7) {
        net.gw(lgw).auto_ack = rng() % 2 == 0;
        net.decommission(lgw, ctid);
        net.gw(lgw).auto_ack = true;
      } else if (net.gw(lgw).wires.contains(ctid)) {
        net.send(lgw, ctid, std::string(rng() % 300, 'q'));
      }
    }
    // One local gateway sometimes goes away with its wires.
    if (rng() % 3 == 0) net.drop("cabin");

    for (int i = 0; i < probes; ++i) {
      const auto ss = net.core().sessions();
      std::vector<const SessionInfo*> live;
      for (const auto& s : ss)
        if (s.live && s.payload_conn) live.push_back(&s);
      if (live.empty()) break;
      const auto& src = *live[rng() % live.size()];

      std::vector<std::uint32_t> known;
      for (const auto& [id, e] : net.core().wire_table()) {
        if (e.lgw_session == src.id) known.push_back(e.lgw_wire.value);
        if (e.asgw_session == src.id && e.asgw_wire) known.push_back(e.asgw_wire->value);
      }
      const std::uint32_t wire = !known.empty() && rng() % 5 != 0 ? known[rng() % known.size()]
                                                                   : static_cast<std::uint32_t>(1 + rng() % 40);
      const std::size_t size = rng() % 10 == 0 ? 1000 + rng() % 100 : rng() % 200;
      const WirePacket pkt{TxnId{"t9" + std::to_string(1000000 + res.checked)}, WireId{wire}, 1 + rng() % 50,
                           std::string(size, static_cast<char>('a' + rng() % 26))};

      const auto x = expect(net.core(), ss, src, wire, size);
      const auto before = x.kind == Expect::Buffer ? net.core().buffered_packets(x.provider) : 0;
      const auto out = net.core().on_payload_frame(*src.payload_conn, pkt, src.secure_transport, net.now);
      const auto after = x.kind == Expect::Buffer ? net.core().buffered_packets(x.provider) : 0;
      const auto why = check(x, out, pkt, before, after);
      ++res.checked;
      if (x.kind == Expect::Forward) ++res.forwarded;
      if (x.kind == Expect::Buffer) ++res.buffered;
      if (x.kind == Expect::Report) ++res.rejected;
      if (!why.empty()) {
        if (res.mismatches++ == 0)
          res.first_mismatch = "table " + std::to_string(t) + " probe " + std::to_string(i) + ": " + why;
      }
    }
  }
  return res;
}

}  // namespace msbc::route_oracle
