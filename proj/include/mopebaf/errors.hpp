#pragma once

#include <stdexcept>
#include <string>

namespace mopebaf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not compose.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or structurally inconsistent settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed caller data (labels, token ids, lengths).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Corrupted or incompatible persisted data.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Violated internal precondition (a bug in the caller within this library).
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace mopebaf
