#pragma once

#include <stdexcept>
#include <string>

namespace galn {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range scalar parameter (temperature <= 0, step size <= 0, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Input outside the mathematical domain (log of non-positive, zero-norm column).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API contract (non-scalar backward root, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Image size incompatible with the patch geometry.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Invalid run/train/synth configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Unusable user input (empty query sentence, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// File system failure (open, write, permissions).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing data (bad PGM, missing mask, empty report).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace galn
