#pragma once

#include <stdexcept>
#include <string>

namespace skelnet {

/// Malformed or inconsistent input data (files, clips, labels).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument combination.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape mismatch, NaN/Inf, or another numeric failure inside a computation.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace skelnet
