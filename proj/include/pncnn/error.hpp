#pragma once

#include <stdexcept>
#include <string>

namespace pncnn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible for the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside an operation's mathematical domain (log of a negative,
/// non-positive applicability, variance below its floor, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced during forward or backward evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Normal matrix of a basis projection is singular or numerically so.
class RankError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or version-mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace pncnn
