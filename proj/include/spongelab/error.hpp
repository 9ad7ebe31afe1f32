#pragma once

#include <stdexcept>
#include <string>

namespace spongelab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or unsupported file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied configuration or arguments.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace spongelab
