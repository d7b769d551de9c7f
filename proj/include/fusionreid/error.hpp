#pragma once

#include <stdexcept>
#include <string>

namespace fusionreid {

// Base of every library error. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or hyperparameter.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data (labels, ids, manifest rows, images).
class DataError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward() on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where a finite value is required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fusionreid
