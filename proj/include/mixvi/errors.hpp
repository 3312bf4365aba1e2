#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mixvi {

/// Root of every error raised by the library. The CLI maps the three
/// families below onto its exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- usage / contract family (exit code 2) --------------------------------

class ContractError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

class BudgetError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// ---- data / format family (exit code 3) -----------------------------------

class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

// ---- numerical family (exit code 4) ---------------------------------------

class NumericalError : public Error {
 public:
  using Error::Error;
};

class DomainError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class SamplingError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DegenerateWeightsError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Raised by optimizers and training loops; carries the parameter or the
/// position in the loop that produced the non-finite value.
class TrainingError : public NumericalError {
 public:
  TrainingError(const std::string& what, std::string where)
      : NumericalError(what + " [" + where + "]"), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

}  // namespace mixvi
