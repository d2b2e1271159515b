// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Error type shared by all modules. Every error carries a short machine-readable
// class (e.g. "shape_mismatch") next to the human-readable message.

#pragma once

#include <stdexcept>
#include <string>

namespace dllmq {

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& detail)
      : std::runtime_error(detail), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

[[noreturn]] inline void fail(const std::string& kind, const std::string& detail) {
  throw Error(kind, detail);
}

inline void require(bool cond, const std::string& kind, const std::string& detail) {
  if (!cond) fail(kind, detail);
}

}  // namespace dllmq
