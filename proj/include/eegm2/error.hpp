#pragma once

#include <stdexcept>
#include <string>

namespace eegm2 {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or dimension mismatch between tensors.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Invalid configuration value or file.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// A tensor allocation would exceed the configured memory cap.
class OomError : public Error {
 public:
  OomError(std::size_t requested, std::size_t live, std::size_t cap)
      : Error("allocation of " + std::to_string(requested) +
              " bytes exceeds memory cap (" + std::to_string(live) +
              " live of " + std::to_string(cap) + ")"),
        requested_bytes(requested),
        live_bytes(live),
        cap_bytes(cap) {}

  std::size_t requested_bytes;
  std::size_t live_bytes;
  std::size_t cap_bytes;
};

/// Numerical failure (divergence, non-finite values) with context.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace eegm2
