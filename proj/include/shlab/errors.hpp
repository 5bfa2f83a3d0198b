#pragma once

#include <stdexcept>
#include <string>

namespace shlab {

// Exit codes of the command-line driver; each error class maps to one.
enum class ExitCode : int { ok = 0, config = 2, numerical = 3, invariant = 4 };

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const { return ExitCode::numerical; }
  virtual const char* kind() const { return "error"; }
};

/// Bad or inconsistent experiment parameters (mesh, CFL, missing fields).
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::config; }
  const char* kind() const override { return "config"; }
};

/// Input fields that violate a documented precondition (e.g. nonzero
/// boundary values of Dirichlet data).
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::config; }
  const char* kind() const override { return "data"; }
};

class InvalidFieldError : public DataError {
 public:
  using DataError::DataError;
  const char* kind() const override { return "invalid_field"; }
};

class DomainError : public Error {
 public:
  using Error::Error;
  const char* kind() const override { return "domain"; }
};

class NumericalError : public Error {
 public:
  using Error::Error;
  const char* kind() const override { return "numerical"; }
};

/// A study with no admissible samples.
class EmptyStudyError : public NumericalError {
 public:
  using NumericalError::NumericalError;
  const char* kind() const override { return "empty_study"; }
};

class InvariantViolation : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::invariant; }
  const char* kind() const override { return "invariant"; }
};

class UnsupportedModeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
  const char* kind() const override { return "unsupported_mode"; }
};

}  // namespace shlab
