#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace simr {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for the requested op.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of the op (e.g. log of 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a precondition (non-scalar loss, non-square matrix, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or network failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameters during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A metric that is not defined for the given input (e.g. AUC with one class).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

/// Binary file did not parse. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace simr
