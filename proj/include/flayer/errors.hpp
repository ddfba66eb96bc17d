#pragma once

#include <stdexcept>
#include <string>

namespace flayer {

/// Base class for every error raised by the library. The C API maps each
/// subclass onto a distinct status code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, shape mismatch between model and data, or a
/// violated precondition on user-supplied parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by the engine. `layer()` is the 1-based position in the
/// architecture's layer list where the value first appeared (0 if unknown).
class NumericError : public Error {
 public:
  NumericError(const std::string& what, int layer) : Error(what), layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

/// Malformed CSV/IDX input; the message carries the line or byte offset.
class IngestionError : public Error {
 public:
  using Error::Error;
};

class AggregationError : public Error {
 public:
  using Error::Error;
};

/// Runs that cannot be compared because their data setups differ.
class IncompatibleRunsError : public Error {
 public:
  using Error::Error;
};

}  // namespace flayer
