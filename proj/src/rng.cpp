#include "mixdiv/rng.hpp"

#include <cmath>

namespace mixdiv {

double RngStream::log_gamma_variate(double shape) {
  if (shape >= 1.0) {
    return std::log(std::gamma_distribution<double>(shape, 1.0)(engine_));
  }
  // Gamma(a) = Gamma(a + 1) * U^(1/a), kept in log space.
  double boosted = std::gamma_distribution<double>(shape + 1.0, 1.0)(engine_);
  double u = 1.0 - uniform();
  return std::log(boosted) + std::log(u) / shape;
}

double RngStream::beta(double a, double b) {
  double la = log_gamma_variate(a);
  double lb = log_gamma_variate(b);
  return 1.0 / (1.0 + std::exp(lb - la));
}

}  // namespace mixdiv
