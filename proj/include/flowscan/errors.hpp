#pragma once

#include <stdexcept>
#include <string>

namespace flowscan {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated shape/domain contract of an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (bad transform descriptor, degenerate parameters, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A numeric operation produced NaN/Inf or was asked to act outside its domain.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Problem reading or writing data files.
class DataError : public Error {
 public:
  using Error::Error;
};

// Binary format violations carry a kind so callers can distinguish them.
class FormatError : public DataError {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, SchemaMismatch };

  FormatError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Requested an exact enumeration that is too large to compute.
class TractabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace flowscan
