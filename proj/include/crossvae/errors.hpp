#pragma once

#include <stdexcept>
#include <string>

namespace crossvae {

// Shape disagreement between tensor operands.
struct DimensionError : std::invalid_argument {
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// Caller violated an operation's contract (non-scalar loss, duplicate items, ...).
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Object used in an invalid order (backward twice on one tape, ...).
struct StateError : std::logic_error {
  explicit StateError(const std::string& what) : std::logic_error(what) {}
};

// Non-finite or otherwise numerically invalid value encountered.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration or hyperparameter value.
struct ParameterError : std::invalid_argument {
  explicit ParameterError(const std::string& what) : std::invalid_argument(what) {}
};

// Unreadable or malformed input data.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace crossvae
