#pragma once

#include <stdexcept>
#include <string>

namespace dat {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid layer/model configuration (divisibility, kernel sizes, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A non-finite value showed up in a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An operation was called in the wrong state (e.g. backward without a forward cache).
class StateError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Checkpoint contents do not match the model's parameter manifest.
class ManifestError : public Error {
 public:
  using Error::Error;
};

// Bad training data (labels out of range, mismatched batch sizes).
class DataError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

}  // namespace dat
