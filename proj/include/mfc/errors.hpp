#pragma once

#include <stdexcept>
#include <string>

namespace mfc {

/// Base class for all library errors.  Subclasses distinguish failure modes
/// that callers (notably the CLI) map to distinct exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed user input: bad config file, bad CSV, inconsistent shapes.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A precondition on problem data failed (weights not normalized, NaN state,
/// measure/ensemble shape mismatch, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during a computation: divergence, NaN produced by user
/// callbacks, iteration limit hit without convergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// The problem's declared convexity margin is non-positive, so descent is not
/// guaranteed to find the optimizer; solves refuse unless overridden.
class SolvabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace mfc
