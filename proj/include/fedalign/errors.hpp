// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedalign {

// A caller broke a precondition (shape mismatch, index out of range, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A computation produced NaN/Inf. `op()` names the operation that did it.
class NumericFault : public std::runtime_error {
 public:
  NumericFault(std::string op, const std::string& detail)
      : std::runtime_error("numeric fault in " + op + ": " + detail), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

// Input is well-formed but too small or otherwise degenerate for the request.
class DegenerateInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary input. `offset()` is the byte position where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(std::uint64_t offset, const std::string& detail)
      : std::runtime_error(detail + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// All configuration problems found during validation, reported together.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::runtime_error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    std::string out = "invalid configuration:";
    for (const auto& p : items) out += "\n  - " + p;
    return out;
  }
  std::vector<std::string> problems_;
};

}  // namespace fedalign
