// SPDX-License-Identifier: Apache-2.0
//
// Error types shared across the library. Every public operation reports
// failure by throwing one of these.
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace zobridge {

/// Bad shapes, widths, or out-of-domain arguments.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The caller broke an interface contract, e.g. asked an opaque stage for a VJP.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A stage backend (in-process function or worker process) failed or
/// produced non-finite output.
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage produced NaN or Inf.
class NonFiniteOutput : public BackendError {
 public:
  using BackendError::BackendError;
};

class Unsupported : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite loss during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace zobridge
