#pragma once

#include <stdexcept>
#include <string>

namespace buyback {

/// Operand shapes do not line up (wrong input width, incompatible broadcast).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// A formula was evaluated outside of its mathematical domain.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// A NaN or infinity appeared where finite values are required.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid or incomplete run configuration. `field` names the offending key.
struct ConfigError : std::runtime_error {
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field(std::move(field)) {}
  std::string field;
};

/// A stored artifact (checkpoint, path file) does not match what was asked for.
struct ArtifactMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace buyback
