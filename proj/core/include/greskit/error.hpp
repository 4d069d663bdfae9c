#pragma once

#include <stdexcept>
#include <string>

namespace greskit {

// Process exit codes used by the CLI. Library errors carry the code they map to.
enum class ExitCode : int {
  kOk = 0,
  kValidation = 2,
  kNumeric = 3,
  kIo = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ExitCode::kValidation, what) {}
};

// RLE counts that do not describe a height x width grid.
class MalformedEncoding : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DimensionMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Dataset or prediction records that reference something that is not there.
class IntegrityError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Decoder output and parsed response disagree on the number of [SEG] entries.
class ProtocolError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ExitCode::kNumeric, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ExitCode::kIo, what) {}
};

}  // namespace greskit
