#pragma once

#include <stdexcept>
#include <string>

namespace pdcl {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Zero vectors, empty batches and other inputs no meaningful result exists for.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values or shape/arch mismatches.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unknown class names, tokens or array names.
class LookupError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition (e.g. unnormalized features).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// A runtime invariant failed: frozen weights drifted, budget exceeded, ...
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class TrainingAborted : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace pdcl
