#pragma once

#include <stdexcept>
#include <string>

namespace tck {

// Input violates a shape or extent contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Value outside its admissible domain (bounds, precision, non-finite input).
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bitstream or file payload is truncated or inconsistent.
class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Model digest in a stream or file does not match the loaded parameters.
class DigestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A required artifact (dataset, frozen net) does not exist yet.
class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tck
