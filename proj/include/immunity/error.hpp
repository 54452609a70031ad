#pragma once

#include <stdexcept>
#include <string>

namespace immunity {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A binary stream (model, dataset, CIFAR file) is malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A numeric computation produced NaN or infinity.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace immunity
