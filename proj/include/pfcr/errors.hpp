#pragma once

#include <stdexcept>
#include <string>

namespace pfcr {

// Shape disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A caller violated a documented precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// NaN/Inf during optimization or training.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed external input (IDX files, checkpoints, configs).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ChecksumError : ParseError {
  using ParseError::ParseError;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pfcr
