#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace enprompt {

// Broad failure classes; the CLI maps each to an exit status.
enum class ErrorCategory {
  usage,
  config,
  resource,
  numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

// Shape mismatch between operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what)
      : Error(ErrorCategory::config, "dimension error: " + what) {}
};

// Out-of-domain scalar argument (temperature, tolerance, step, ...).
class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what)
      : Error(ErrorCategory::config, "parameter error: " + what) {}
};

// Non-finite values, solver breakdown, diverged training.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorCategory::numeric, "numeric error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorCategory::config, "config error: " + what) {}
};

class ResourceError : public Error {
 public:
  explicit ResourceError(const std::string& what)
      : Error(ErrorCategory::resource, "resource error: " + what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what)
      : Error(ErrorCategory::usage, "usage error: " + what) {}
};

// Experiment protocol violated (e.g. too few classes for a base/novel split).
class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& what)
      : Error(ErrorCategory::config, "protocol error: " + what) {}
};

class VocabularyError : public Error {
 public:
  explicit VocabularyError(const std::string& what)
      : Error(ErrorCategory::config, "vocabulary error: " + what) {}
};

// Token sequence longer than the encoder accepts.
class LengthError : public Error {
 public:
  explicit LengthError(const std::string& what)
      : Error(ErrorCategory::config, "length error: " + what) {}
};

// Non-finite loss during optimization; carries the step or batch index.
class TrainingError : public Error {
 public:
  TrainingError(std::size_t step, const std::string& what)
      : Error(ErrorCategory::numeric,
              "training error at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace enprompt
