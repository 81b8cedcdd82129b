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

#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "msbc/interconnect.hpp"
#include "msbc/net.hpp"

namespace msbc {

/// Runs an Interconnect behind TCP listeners. One thread owns every socket;
/// all core mutations happen under one mutex, which inspect() shares so that
/// observers never see a half-applied event.
class BrokerServer {
 public:
  BrokerServer(BrokerConfig config, SubscriptionDirectory directory);
  ~BrokerServer();

  BrokerServer(const BrokerServer&) = delete;
  BrokerServer& operator=(const BrokerServer&) = delete;

  /// Binds both listeners and starts the event loop thread.
  void start();
  /// Binds and runs the loop on the calling thread until stop().
  void run();
  void stop();

  const net::Endpoint& signaling_endpoint() const noexcept { return signaling_bound_; }
  const net::Endpoint& payload_endpoint() const noexcept { return payload_bound_; }

  /// Register before start(). Called on the loop thread, under the core lock.
  void add_event_listener(std::function<void(const BrokerEvent&)> listener);

  template <typename F>
  auto inspect(F&& f) const {
    std::lock_guard lock(mu_);
    return f(*core_);
  }

 private:
  struct Conn {
    std::unique_ptr<net::Link> link;
    bool payload = false;
    std::string remote;
  };

  void bind();
  void loop();
  void apply(Outputs outputs);
  void dispatch(ConnId id, Conn& conn, std::vector<Frame> frames, TimeMs now);
  void drop(ConnId id, TimeMs now);

  BrokerConfig config_;
  std::unique_ptr<Interconnect> core_;
  mutable std::mutex mu_;
  std::vector<std::function<void(const BrokerEvent&)>> listeners_;

  net::Socket signaling_listener_;
  net::Socket payload_listener_;
  net::Endpoint signaling_bound_;
  net::Endpoint payload_bound_;
  net::WakeFd wake_;
  std::map<ConnId, Conn> conns_;
  ConnId next_conn_ = 1;
  std::atomic<bool> running_{false};
  std::thread thread_;
  bool bound_ = false;
};

}  // namespace msbc
