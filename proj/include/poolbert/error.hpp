#pragma once

#include <stdexcept>
#include <string>

namespace poolbert {

// Root of every error thrown by the library. The CLI maps the subclasses to
// process exit codes (see tools/poolbert_main.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A numeric parameter is outside its valid range (e.g. dropout rate >= 1).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Malformed or out-of-range input data (ids, records, labels, text files).
class InputError : public Error {
 public:
  using Error::Error;
};

/// A persisted artifact (checkpoint, vocab, CSV, JSONL) could not be decoded.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Persisted tensor shapes disagree with the receiving model configuration.
class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A malformed ICD code or config line.
class ParseError : public InputError {
 public:
  using InputError::InputError;
};

/// API misuse: calling an operation outside its contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf observed at an op boundary while checked mode is on.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace poolbert
