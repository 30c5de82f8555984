#pragma once

#include <stdexcept>
#include <string>

namespace oodforge {

// Error hierarchy. The CLI maps each family to a process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or argument (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (exit code 3).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Header and body byte counts disagree.
class LengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

// A numerical routine could not produce a valid result (exit code 4).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class NotPositiveDefinite : public NumericalError {
 public:
  NotPositiveDefinite(std::size_t pivot, double value)
      : NumericalError("matrix is not positive definite: pivot " +
                       std::to_string(pivot) + " has value " +
                       std::to_string(value)),
        pivot_(pivot) {}

  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

}  // namespace oodforge
