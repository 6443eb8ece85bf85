#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flipguard {

// Base class for every error this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not conform for the requested primitive.
struct ShapeError : Error {
  using Error::Error;
};

// Input outside a primitive's documented domain (e.g. log of x <= 0).
struct DomainError : Error {
  using Error::Error;
};

// Invalid experiment / update configuration. CLI exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

// Non-finite value where training must not continue. CLI exit code 3.
struct NumericalError : Error {
  using Error::Error;
};

// Unreadable on-disk artifact; carries the byte offset of the failure.
struct ParseError : Error {
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::size_t offset;
};

// Readable but inconsistent artifact (truncated payload, shape mismatch).
struct IntegrityError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace flipguard
