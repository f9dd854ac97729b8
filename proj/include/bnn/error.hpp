#pragma once

#include <stdexcept>
#include <string>

namespace bnn {

// Caller broke a documented precondition (shape mismatch, bad permutation, ...).
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

// A NaN or infinity appeared where a finite number is required.
class NumericFailure : public std::runtime_error {
 public:
  explicit NumericFailure(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration: unknown keys, impossible chain lengths, too few iterates.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// An evaluation metric could not be computed from the supplied data.
class EvaluationError : public std::runtime_error {
 public:
  explicit EvaluationError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}
}  // namespace detail

}  // namespace bnn
