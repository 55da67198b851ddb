#pragma once

#include <stdexcept>
#include <string>

namespace iclea {

// Root of every error the engine raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or missing input data. CLI exit code 2.
class InputError : public Error {
 public:
  using Error::Error;
};

class ParseError : public InputError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : InputError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : InputError(what) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_ = 0;
};

class IntegrityError : public InputError {
 public:
  using InputError::InputError;
};

class IdError : public InputError {
 public:
  using InputError::InputError;
};

class FormatError : public InputError {
 public:
  using InputError::InputError;
};

class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DataError : public InputError {
 public:
  using InputError::InputError;
};

// Checkpoint or dataset does not match the architecture it is used with. Exit code 3.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

// Hyperparameter values that cannot be run. Exit code 4.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// (L+1)*B > min(|E1|, |E2|).
class ConstraintError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Programming errors: mismatched shapes, misuse of an API.
class ShapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace iclea
