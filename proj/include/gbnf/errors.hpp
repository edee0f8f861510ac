#pragma once

#include <stdexcept>
#include <string>

namespace gbnf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension or layout mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A non-finite value was produced; the message names the primitive.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Argument outside its mathematical domain (rho not in [0,1], degenerate weights, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Model is in the wrong state for the request (stale partition, unsupported mode).
class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Checkpoint written by an incompatible format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

}  // namespace gbnf
