#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace molre {

/// Base class for all molre errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Incompatible tensor shapes; the message names the operation and the
/// offending dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument values (non-finite inputs, out-of-range k, eps <= 0, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Configuration problems; the message names the field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, const std::string& msg) : Error(msg), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Binary feature/weights file violations.
class DataFileError : public Error {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, LengthMismatch, BadValue, Io };

  DataFileError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace molre
