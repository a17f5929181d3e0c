#pragma once

#include <stdexcept>
#include <string>

namespace stni {

// Bad shapes, invalid op arguments, malformed configs.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : UsageError {
  explicit ShapeError(const std::string& msg) : UsageError(msg) {}
};

// Missing/corrupt datasets, undecodable images, bad checkpoints.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointError : DataError {
  explicit CheckpointError(const std::string& msg) : DataError(msg) {}
};

// A forward op produced NaN/Inf from finite inputs.
struct NonFiniteError : std::runtime_error {
  explicit NonFiniteError(const std::string& msg) : std::runtime_error(msg) {}
};

// A numeric verification (grad check, acceptance bound) failed.
struct CheckFailure : std::runtime_error {
  explicit CheckFailure(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace stni
