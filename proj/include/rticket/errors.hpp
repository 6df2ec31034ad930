#pragma once

#include <stdexcept>
#include <string>

namespace rticket {

/// Invalid run or stage configuration (bad field value, inconsistent settings).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numeric argument outside the domain an operation is defined on.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Operation invoked in the wrong lifecycle state (e.g. retrain without a pretrained snapshot).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Caller broke a shape or argument contract.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed file contents (checkpoint, ticket, TSV, vocabulary, substitution table).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rticket
