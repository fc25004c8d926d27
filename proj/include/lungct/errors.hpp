#pragma once

#include <stdexcept>
#include <string>

namespace lungct {

// Bad configuration or usage. CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing or invalid data, model artifacts, or on-disk formats. CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failures while computing: numeric blow-ups, IO errors mid-run. CLI exit code 3.
class ComputeError : public std::runtime_error {
 public:
  explicit ComputeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace lungct
