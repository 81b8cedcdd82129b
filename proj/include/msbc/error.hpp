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

#include <cstddef>
#include <stdexcept>
#include <string>

namespace msbc {

enum class Errc {
  InvalidFrame,
  ProtocolViolation,
  InvalidConfig,
  Unacceptable,
  OutOfDialog,
  NotFound,
  ParseError,
  ConnectFailed,
  Rejected,
  NotOpen,
  NotCommissioned,
  AlreadyAttached,
  FrameTooLarge,
  ConnectionLost,
  UnknownTarget,
  ScenarioFailed,
};

const char* to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// Raised by the stream decoder; the connection that produced the bytes must be
// dropped.
class ProtocolViolation : public Error {
 public:
  ProtocolViolation(std::size_t offset, const std::string& reason)
      : Error(Errc::ProtocolViolation, "at offset " + std::to_string(offset) + ": " + reason),
        offset_(offset),
        reason_(reason) {}

  std::size_t offset() const noexcept { return offset_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t offset_;
  std::string reason_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& reason)
      : Error(Errc::ParseError, "line " + std::to_string(line) + ": " + reason), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace msbc
