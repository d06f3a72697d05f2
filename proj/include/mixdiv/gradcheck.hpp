#pragma once

// Finite-difference verification of the analytic gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mixdiv/tensor.hpp"

namespace mixdiv {

enum class Stencil {
  central,     // (f(x+h) - f(x-h)) / 2h
  five_point,  // fourth-order central difference from x +- h, x +- 2h
};

struct GradcheckConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t d_model = 16;
  std::size_t d_ff = 32;
  std::size_t vocab = 12;  // per side, reserved symbols included
  double step = 1e-3;
  double tolerance = 1e-5;
  Stencil stencil = Stencil::five_point;
  double label_smoothing = 0.1;
  std::uint64_t seed = 1;
  bool mixup = true;  // also check a mixup batch
};

struct GroupResult {
  std::string name;
  std::size_t elements = 0;
  double worst_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GroupResult> groups;
  double worst_error = 0.0;
  std::size_t elements = 0;
  bool passed = true;
};

// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double analytic, double numeric);

// Compares the backward pass of `loss` against central differences for
// every element of every named tensor. `loss` must rebuild its graph from
// the current tensor values on each call.
GradcheckReport check_gradients(const std::function<Tensor<double>()>& loss,
                                const std::vector<std::pair<std::string, Tensor<double>>>& params, double step,
                                double tolerance, Stencil stencil = Stencil::five_point,
                                const std::string& prefix = "");

// Tiny transformer with dropout off; checks the loss of a plain batch and,
// when enabled, of a mixup batch over the same 5 target tokens.
GradcheckReport run_gradcheck(const GradcheckConfig& config);

std::string format_gradcheck_report(const GradcheckReport& report, double tolerance);

}  // namespace mixdiv
