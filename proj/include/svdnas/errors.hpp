#pragma once

#include <stdexcept>
#include <string>

namespace svdnas {

// Shape or divisibility violation at an operation or graph edge.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented precondition of an API was not met.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite input to a numeric kernel.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch)
      : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

// Missing latency-table signature.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Missing, unreadable or corrupt artifact on disk.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& what, std::string path)
      : std::runtime_error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace svdnas
