// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace agentps {

// Base of every error thrown by the library. The CLI maps families of these
// onto exit codes (config -> 1, data -> 2, numeric -> 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class BudgetError : public Error { using Error::Error; };
class VariantError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class LabelError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };

// Data-side failures: files, formats, schemas.
class DataError : public Error { using Error::Error; };
class FileError : public DataError { using DataError::DataError; };
class SchemaError : public DataError { using DataError::DataError; };
class VersionError : public DataError { using DataError::DataError; };
class IntegrityError : public DataError { using DataError::DataError; };

class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace agentps
