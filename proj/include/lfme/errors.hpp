#pragma once

#include <stdexcept>
#include <string>

namespace lfme {

/// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite or otherwise unusable numeric input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A caller-supplied value violates a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed serialized data (checkpoint magic/version/payload, CSV cells).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace lfme
