#pragma once

#include <stdexcept>
#include <string>

namespace vlseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent configuration. CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data violates a documented invariant (shapes, ranges, tags).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A file could not be read or parsed.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or tensor during training. CLI exit code 3.
class NumericError : public Error {
 public:
  using Error::Error;
};

void log_warning(const std::string& message);
void log_info(const std::string& message);
void set_verbose(bool verbose);

}  // namespace vlseg
