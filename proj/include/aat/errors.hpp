#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent model, strategy or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Violated precondition of an operation (bad label, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed tensor container. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace aat
