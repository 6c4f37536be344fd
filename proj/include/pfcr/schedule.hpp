#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "pfcr/errors.hpp"

namespace pfcr {

// Raised when a granularity level is too coarse for the learning-rate decay.
struct ScheduleOverflowError : ContractError {
  using ContractError::ContractError;
};

// Learning rate at granularity level g: lr_0 * (1 - 0.2 g).
inline double lr_for(int g, double lr_0) {
  if (g < 0) throw ContractError("lr_for: negative level");
  if (!(lr_0 > 0.0)) throw ContractError("lr_for: lr_0 must be positive");
  if (g >= 5)
    throw ScheduleOverflowError("lr_for: level " + std::to_string(g) +
                                " gives a non-positive learning rate");
  return lr_0 * (1.0 - 0.2 * g);
}

// Iterations at granularity level g: round(iter_0 * (1 + 0.2 g)).
inline std::int64_t iter_for(int g, std::int64_t iter_0) {
  if (g < 0) throw ContractError("iter_for: negative level");
  if (iter_0 < 1) throw ContractError("iter_for: iter_0 must be >= 1");
  return std::llround(double(iter_0) * (1.0 + 0.2 * g));
}

}  // namespace pfcr
