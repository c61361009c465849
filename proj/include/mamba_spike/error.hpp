#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mamba_spike {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Incompatible tensor shapes (messages name both shapes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (bad magic, truncation, unsorted records, ...).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem-level failure (missing file, unwritable path).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint does not match the configured model; lists every offending tensor.
class CheckpointMismatch : public Error {
 public:
  CheckpointMismatch(const std::string& what, std::vector<std::string> details)
      : Error(what), details_(std::move(details)) {}

  const std::vector<std::string>& details() const { return details_; }

 private:
  std::vector<std::string> details_;
};

}  // namespace mamba_spike
