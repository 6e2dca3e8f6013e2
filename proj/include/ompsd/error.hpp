#pragma once

#include <stdexcept>
#include <string>

namespace ompsd {

/// Base class for all toolkit errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or inconsistent input parameters (reported by the CLI with exit code 2
/// when they come from a configuration file).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A numerical routine could not deliver a trustworthy result (exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace ompsd
