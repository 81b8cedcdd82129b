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

// msbc-admin: edits and checks a subscription directory file.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "msbc/directory.hpp"
#include "msbc/error.hpp"

namespace {

msbc::SubscriptionDirectory load_or_empty(const std::string& path) {
  if (!std::filesystem::exists(path)) return {};
  return msbc::load_directory(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MSBC subscription directory administration"};
  app.require_subcommand(1);
  std::string path = "directory.txt";
  app.add_option("--directory,-d", path, "directory file");

  auto* add_provider = app.add_subcommand("add-provider", "register a service provider");
  std::string provider_id, subscriber;
  add_provider->add_option("id", provider_id)->required();
  add_provider->add_option("subscriber", subscriber, "SIP identity of the provider's gateway")->required();

  auto* add_gateway = app.add_subcommand("add-gateway", "admit a local gateway subscriber");
  std::string gateway;
  add_gateway->add_option("subscriber", gateway)->required();

  auto* add_rule = app.add_subcommand("add-rule", "route a CTID or CTID prefix (trailing '*') to a provider");
  std::string pattern, target;
  add_rule->add_option("pattern", pattern)->required();
  add_rule->add_option("provider", target)->required();

  auto* list = app.add_subcommand("list", "print the directory");
  auto* validate = app.add_subcommand("validate", "check the directory file");

  auto* lookup = app.add_subcommand("lookup", "show which provider a CTID routes to");
  std::string ctid;
  lookup->add_option("ctid", ctid)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*add_provider || *add_gateway || *add_rule) {
      auto dir = load_or_empty(path);
      if (*add_provider) dir.add_provider(provider_id, subscriber);
      if (*add_gateway) dir.add_gateway(gateway);
      if (*add_rule) dir.add_rule(pattern, target);
      msbc::save_directory(dir, path);
    } else if (*list) {
      std::cout << msbc::format_directory(msbc::load_directory(path));
    } else if (*validate) {
      auto dir = msbc::load_directory(path);
      dir.validate();
      std::cout << path << ": ok (" << dir.providers().size() << " providers, " << dir.gateways().size()
                << " gateways, " << dir.rules().size() << " rules)\n";
    } else if (*lookup) {
      if (!msbc::Ctid::valid(ctid)) throw msbc::Error(msbc::Errc::InvalidConfig, "invalid ctid " + ctid);
      auto p = msbc::load_directory(path).lookup_provider(msbc::Ctid{ctid});
      if (!p) {
        std::cerr << ctid << ": no provider\n";
        return 2;
      }
      std::cout << *p << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "msbc-admin: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
