#pragma once

#include <stdexcept>
#include <string>

namespace trigact {

/// Base class of every error raised by the toolkit. `exit_code()` is the
/// process status the CLI reports for it.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Bad or inconsistent configuration (unknown ids, invalid hyperparameters).
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Caller violated an operation contract (shape mismatch, empty batch, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Loss or gradient became non-finite.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Dataset files missing or malformed.
class IngestionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// A cached artifact exists with a different fingerprint than requested.
class FingerprintConflict : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

}  // namespace trigact
