#pragma once

#include <stdexcept>
#include <string>

namespace padtrack {

// Base class for all library errors. The CLI maps subclasses to exit codes:
// ValidationError and subclasses -> 2, NumericError -> 3.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad input data, malformed files, contract violations.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// Malformed on-disk formats (track files, manifests, checkpoints).
class FormatError : public ValidationError {
 public:
  explicit FormatError(const std::string& msg) : ValidationError(msg) {}
};

// Shape/arity mismatches between numeric containers.
class DimensionError : public ValidationError {
 public:
  explicit DimensionError(const std::string& msg) : ValidationError(msg) {}
};

// Bad configuration values.
class ConfigError : public ValidationError {
 public:
  explicit ConfigError(const std::string& msg) : ValidationError(msg) {}
};

// Filesystem failures; message names the offending file or frame.
class IoError : public ValidationError {
 public:
  explicit IoError(const std::string& msg) : ValidationError(msg) {}
};

// Environment protocol misuse (e.g. stepping a finished episode).
class ProtocolError : public ValidationError {
 public:
  explicit ProtocolError(const std::string& msg) : ValidationError(msg) {}
};

// Non-finite values where finite math is required (NaN loss aborts).
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace padtrack
