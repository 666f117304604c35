#pragma once

#include <stdexcept>
#include <string>

namespace refinery {

// Base for every error the library raises. Callers that only care about
// success/failure catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user input: shapes, configuration values, labels.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// File format or filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, diverged training and other numeric failures.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace refinery
