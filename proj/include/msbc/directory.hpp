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

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "msbc/wire_protocol.hpp"

namespace msbc {

struct ProviderRecord {
  std::string id;
  std::string subscriber;

  friend bool operator==(const ProviderRecord&, const ProviderRecord&) = default;
};

struct RoutingRule {
  std::string pattern;  // exact CTID, or a prefix followed by '*'
  std::string provider;

  bool is_prefix() const noexcept { return !pattern.empty() && pattern.back() == '*'; }
  std::string_view prefix() const noexcept {
    return std::string_view(pattern).substr(0, pattern.size() - (is_prefix() ? 1 : 0));
  }

  friend bool operator==(const RoutingRule&, const RoutingRule&) = default;
};

/// CTID -> provider directory plus the subscriber records admitted to open
/// sessions. Text format, one entry per line:
///
///   provider <id> subscriber=<sip-id>
///   gateway <sip-id>
///   rule <pattern> -> <provider-id>
///
/// '#' starts a comment line; blank lines are ignored.
class SubscriptionDirectory {
 public:
  /// Each throws Error(InvalidConfig) on a duplicate or malformed entry.
  void add_provider(std::string id, std::string subscriber);
  void add_gateway(std::string subscriber);
  void add_rule(std::string pattern, std::string provider);

  /// Exact rule first, then the longest matching prefix. nullopt = NotFound.
  std::optional<std::string> lookup_provider(const Ctid& ctid) const;

  const ProviderRecord* provider(std::string_view id) const noexcept;
  bool has_gateway(std::string_view subscriber) const noexcept;

  /// Whether `subscriber` may open a session in `role` (for `provider`).
  bool admits(std::string_view subscriber, Role role, const std::optional<std::string>& provider) const noexcept;

  const std::vector<ProviderRecord>& providers() const noexcept { return providers_; }
  const std::vector<std::string>& gateways() const noexcept { return gateways_; }
  const std::vector<RoutingRule>& rules() const noexcept { return rules_; }

  /// Every rule names a known provider. Throws Error(InvalidConfig) otherwise.
  void validate() const;

  friend bool operator==(const SubscriptionDirectory&, const SubscriptionDirectory&) = default;

 private:
  std::vector<ProviderRecord> providers_;
  std::vector<std::string> gateways_;
  std::vector<RoutingRule> rules_;
};

bool valid_pattern(std::string_view pattern) noexcept;

/// Throws ParseError(line, reason).
SubscriptionDirectory parse_directory(std::string_view text);
std::string format_directory(const SubscriptionDirectory& dir);

SubscriptionDirectory load_directory(const std::filesystem::path& path);
void save_directory(const SubscriptionDirectory& dir, const std::filesystem::path& path);

}  // namespace msbc
