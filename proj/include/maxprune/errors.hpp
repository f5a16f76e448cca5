#pragma once

#include <stdexcept>
#include <string>

namespace maxprune {

// Base for every error raised by the library. `category()` is a short
// machine-readable tag used by the CLI error line.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "dimension"; }
};

// Network topology / maxout bookkeeping inconsistent with the operation.
class StructureError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "structure"; }
};

// Invalid sample data (labels out of range, empty datasets).
class DataError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "data"; }
};

// Malformed file content.
class FormatError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "format"; }
};

class ArgumentError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "argument"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "io"; }
};

}  // namespace maxprune
