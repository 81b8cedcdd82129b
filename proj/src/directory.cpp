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

#include "msbc/directory.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace msbc {

namespace {

bool token_ok(std::string_view s) noexcept {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    const auto u = static_cast<unsigned char>(c);
    return u > 0x20 && u < 0x7f;
  });
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

}  // namespace

bool valid_pattern(std::string_view pattern) noexcept {
  if (!pattern.empty() && pattern.back() == '*') {
    auto prefix = pattern.substr(0, pattern.size() - 1);
    return prefix.empty() || (prefix.size() < 64 && Ctid::valid(prefix));
  }
  return Ctid::valid(pattern);
}

void SubscriptionDirectory::add_provider(std::string id, std::string subscriber) {
  if (!Ctid::valid(id)) throw Error(Errc::InvalidConfig, "bad provider id '" + id + "'");
  if (!token_ok(subscriber)) throw Error(Errc::InvalidConfig, "bad subscriber '" + subscriber + "'");
  if (provider(id) != nullptr) throw Error(Errc::InvalidConfig, "duplicate provider '" + id + "'");
  for (const auto& p : providers_)
    if (p.subscriber == subscriber) throw Error(Errc::InvalidConfig, "subscriber '" + subscriber + "' already used");
  if (has_gateway(subscriber)) throw Error(Errc::InvalidConfig, "subscriber '" + subscriber + "' is a gateway");
  providers_.push_back({std::move(id), std::move(subscriber)});
}

void SubscriptionDirectory::add_gateway(std::string subscriber) {
  if (!token_ok(subscriber)) throw Error(Errc::InvalidConfig, "bad subscriber '" + subscriber + "'");
  if (has_gateway(subscriber)) throw Error(Errc::InvalidConfig, "duplicate gateway '" + subscriber + "'");
  for (const auto& p : providers_)
    if (p.subscriber == subscriber) throw Error(Errc::InvalidConfig, "subscriber '" + subscriber + "' is a provider");
  gateways_.push_back(std::move(subscriber));
}

void SubscriptionDirectory::add_rule(std::string pattern, std::string provider_id) {
  if (!valid_pattern(pattern)) throw Error(Errc::InvalidConfig, "bad pattern '" + pattern + "'");
  if (!Ctid::valid(provider_id)) throw Error(Errc::InvalidConfig, "bad provider id '" + provider_id + "'");
  for (const auto& r : rules_)
    if (r.pattern == pattern) throw Error(Errc::InvalidConfig, "duplicate rule for '" + pattern + "'");
  rules_.push_back({std::move(pattern), std::move(provider_id)});
}

std::optional<std::string> SubscriptionDirectory::lookup_provider(const Ctid& ctid) const {
  const RoutingRule* best = nullptr;
  for (const auto& r : rules_) {
    if (!r.is_prefix()) {
      if (r.pattern == ctid.str()) return r.provider;
      continue;
    }
    if (ctid.str().starts_with(r.prefix()) && (best == nullptr || r.prefix().size() > best->prefix().size()))
      best = &r;
  }
  if (best == nullptr) return std::nullopt;
  return best->provider;
}

const ProviderRecord* SubscriptionDirectory::provider(std::string_view id) const noexcept {
  for (const auto& p : providers_)
    if (p.id == id) return &p;
  return nullptr;
}

bool SubscriptionDirectory::has_gateway(std::string_view subscriber) const noexcept {
  return std::find(gateways_.begin(), gateways_.end(), subscriber) != gateways_.end();
}

bool SubscriptionDirectory::admits(std::string_view subscriber, Role role,
                                   const std::optional<std::string>& provider_id) const noexcept {
  if (role == Role::lgw) return has_gateway(subscriber);
  if (!provider_id) return false;
  const auto* p = provider(*provider_id);
  return p != nullptr && p->subscriber == subscriber;
}

void SubscriptionDirectory::validate() const {
  for (const auto& r : rules_)
    if (provider(r.provider) == nullptr)
      throw Error(Errc::InvalidConfig, "rule '" + r.pattern + "' references unknown provider '" + r.provider + "'");
}

SubscriptionDirectory parse_directory(std::string_view text) {
  SubscriptionDirectory dir;
  std::vector<std::pair<std::size_t, std::string>> rule_refs;
  std::size_t lineno = 0;
  while (!text.empty()) {
    ++lineno;
    const auto eol = text.find('\n');
    auto line = text.substr(0, eol);
    text.remove_prefix(eol == std::string_view::npos ? text.size() : eol + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    auto tokens = split_ws(line);
    if (tokens.empty() || tokens.front().front() == '#') continue;
    try {
      if (tokens[0] == "provider") {
        if (tokens.size() != 3 || !tokens[2].starts_with("subscriber="))
          throw ParseError(lineno, "expected 'provider <id> subscriber=<sip-id>'");
        dir.add_provider(std::string(tokens[1]), std::string(tokens[2].substr(11)));
      } else if (tokens[0] == "gateway") {
        if (tokens.size() != 2) throw ParseError(lineno, "expected 'gateway <sip-id>'");
        dir.add_gateway(std::string(tokens[1]));
      } else if (tokens[0] == "rule") {
        if (tokens.size() != 4 || tokens[2] != "->")
          throw ParseError(lineno, "expected 'rule <pattern> -> <provider-id>'");
        dir.add_rule(std::string(tokens[1]), std::string(tokens[3]));
        rule_refs.emplace_back(lineno, std::string(tokens[3]));
      } else {
        throw ParseError(lineno, "unknown entry '" + std::string(tokens[0]) + "'");
      }
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(lineno, e.what());
    }
  }
  for (const auto& [at, provider_id] : rule_refs)
    if (dir.provider(provider_id) == nullptr)
      throw ParseError(at, "rule references unknown provider '" + provider_id + "'");
  return dir;
}

std::string format_directory(const SubscriptionDirectory& dir) {
  std::ostringstream out;
  for (const auto& p : dir.providers()) out << "provider " << p.id << " subscriber=" << p.subscriber << '\n';
  for (const auto& g : dir.gateways()) out << "gateway " << g << '\n';
  for (const auto& r : dir.rules()) out << "rule " << r.pattern << " -> " << r.provider << '\n';
  return out.str();
}

SubscriptionDirectory load_directory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::InvalidConfig, "cannot read directory " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_directory(buf.str());
}

void save_directory(const SubscriptionDirectory& dir, const std::filesystem::path& path) {
  dir.validate();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::InvalidConfig, "cannot write directory " + path.string());
    out << format_directory(dir);
    if (!out.flush()) throw Error(Errc::InvalidConfig, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace msbc
