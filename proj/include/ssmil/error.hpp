#pragma once

#include <stdexcept>
#include <string>

namespace ssmil {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A scalar hyperparameter is outside its admissible range (tau <= 0, ...).
class InvalidParameter : public Error {
 public:
  using Error::Error;
};

/// Operand shapes do not agree.
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

/// Input is well-formed but numerically degenerate (zero-norm row, empty set).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared during training.
class TrainingDivergence : public Error {
 public:
  using Error::Error;
};

/// File missing, unreadable or malformed.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssmil
