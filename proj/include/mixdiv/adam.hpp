#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mixdiv/tensor.hpp"

namespace mixdiv {

struct AdamConfig {
  double peak_lr = 7e-4;
  double init_lr = 1e-7;
  std::size_t warmup_steps = 4000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// Linear warmup from init_lr to peak_lr over warmup_steps, then
/// inverse-square-root decay. Both branches agree at step == warmup_steps.
/// With warmup_steps == 0 the rate stays at peak_lr.
double learning_rate(const AdamConfig& config, std::size_t step);

template <typename T>
struct AdamState {
  AdamConfig config;
  std::size_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  AdamState() = default;
  AdamState(AdamConfig cfg, std::span<const Tensor<T>> params);
};

// Bias-corrected Adam update using each parameter's accumulated grad.
// Throws NumericalError if any updated value is not finite.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state);

}  // namespace mixdiv
