#pragma once

#include <stdexcept>
#include <string>

namespace fpsa {

// Invalid solver/layer/run configuration (bad epsilon, unknown config key, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape or axis mismatch.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent input data (datasets, files).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf surfaced during computation, divergence of an iterative solve.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint is corrupt or incompatible with the requested model.
struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fpsa
