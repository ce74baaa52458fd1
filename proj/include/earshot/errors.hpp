#pragma once

#include <stdexcept>
#include <string>

namespace earshot {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or combination of values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied data violates an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public InputError {
 public:
  using InputError::InputError;
};

/// Malformed binary or text file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf encountered in a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace earshot
