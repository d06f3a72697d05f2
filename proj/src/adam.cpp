#include "mixdiv/adam.hpp"

#include <cmath>
#include <string>

namespace mixdiv {

double learning_rate(const AdamConfig& config, std::size_t step) {
  if (config.warmup_steps == 0) return config.peak_lr;
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(config.warmup_steps);
  if (s <= w) return config.init_lr + (config.peak_lr - config.init_lr) * s / w;
  return config.peak_lr * std::sqrt(w / s);
}

template <typename T>
AdamState<T>::AdamState(AdamConfig cfg, std::span<const Tensor<T>> params) : config(cfg) {
  for (const auto& p : params) {
    first_moment.emplace_back(p.numel(), T(0));
    second_moment.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  if (params.size() != state.first_moment.size()) {
    throw ContractError("adam_step: optimizer tracks " + std::to_string(state.first_moment.size()) +
                        " tensors but got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw ContractError("adam_step: parameter " + std::to_string(i) + " has no grad");
    if (params[i].numel() != state.first_moment[i].size()) {
      throw DimensionError("adam_step: moment buffer " + std::to_string(i) + " does not match its parameter");
    }
  }
  const auto& c = state.config;
  state.step += 1;
  const double lr = learning_rate(c, state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    auto grad = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / correction1) / (std::sqrt(vj / correction2) + c.eps);
      data[j] = static_cast<T>(data[j] - update);
      if (!std::isfinite(data[j])) {
        throw NumericalError("adam_step: parameter " + std::to_string(i) + " became non-finite at step " +
                             std::to_string(state.step));
      }
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::span<Tensor<float>>, AdamState<float>&);
template void adam_step(std::span<Tensor<double>>, AdamState<double>&);

}  // namespace mixdiv
