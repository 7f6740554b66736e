#pragma once

#include <stdexcept>
#include <string>

namespace djpq {

// Base class so callers can catch everything the library throws in one place.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or length mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Precondition violated by the caller (non-scalar backward, missing grad, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or unknown key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad data values (out-of-range label, non-finite tensor, NaN loss).
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents; carries the byte offset where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), detail_(what), offset_(offset) {}
  std::size_t offset() const { return offset_; }
  // Message without the offset suffix.
  const std::string& detail() const { return detail_; }

 private:
  std::string detail_;
  std::size_t offset_;
};

// Checkpoint written by a newer format version.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Stored checksum does not match the payload.
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Graph topology problems: misaligned graphs, a layer pruned to zero channels.
class StructuralError : public Error {
 public:
  using Error::Error;
};

// Quantizer whose range is narrower than a single step.
class DegenerateQuantizerError : public Error {
 public:
  using Error::Error;
};

// Training diverged or produced NaN.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace djpq
