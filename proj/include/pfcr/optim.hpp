#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "pfcr/errors.hpp"
#include "pfcr/tensor.hpp"

namespace pfcr {

// Bias-corrected Adam. Moments are allocated lazily on the first step and
// indexed like the parameter list passed to adam_step.
template <typename T>
struct AdamState {
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  std::int64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

// One Adam update using the gradients currently stored on `params`.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, T lr) {
  if (lr < T(0)) throw ContractError("adam_step: negative learning rate");
  if (state.first_moment.empty()) {
    for (auto& p : params) {
      state.first_moment.emplace_back(p.numel(), T(0));
      state.second_moment.emplace_back(p.numel(), T(0));
    }
  }
  if (state.first_moment.size() != params.size())
    throw ContractError("adam_step: parameter list changed between steps");
  ++state.step;
  const T bc1 = T(1) - std::pow(state.beta1, T(state.step));
  const T bc2 = T(1) - std::pow(state.beta2, T(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != p.numel()) throw DimensionError("adam_step: moment shape mismatch");
    auto g = p.grad();
    auto w = p.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g[i] * g[i];
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// Cosine annealing from lr_base at step 0 to 0 at step == total.
inline double cosine_lr(std::int64_t step, std::int64_t total, double lr_base) {
  if (total < 1 || step < 0 || step > total)
    throw ContractError("cosine_lr: need 0 <= step <= total and total >= 1");
  return lr_base * (1.0 + std::cos(std::numbers::pi * double(step) / double(total))) / 2.0;
}

}  // namespace pfcr
