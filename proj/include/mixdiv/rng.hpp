#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mixdiv {

// SplitMix64 finalizer; used to turn (key, name) pairs into child keys.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a, stable across platforms (std::hash is not).
constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// A seeded random stream that can spawn named child streams.
///
/// Children are derived from the parent's key, never from its engine state,
/// so the values a child produces do not depend on how much the parent (or
/// any sibling) has been consumed.
class RngStream {
 public:
  using engine_type = std::mt19937_64;

  explicit RngStream(std::uint64_t key = 0) : key_(key), engine_(splitmix64(key)) {}

  std::uint64_t key() const { return key_; }

  RngStream derive(std::string_view name) const {
    return RngStream(splitmix64(key_ ^ splitmix64(fnv1a64(name))));
  }
  RngStream derive(std::string_view name, std::uint64_t index) const {
    return RngStream(splitmix64(derive(name).key_ + splitmix64(index + 1)));
  }

  engine_type& engine() { return engine_; }

  // Uniform on [0, 1).
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  // Uniform integer on [0, n).
  std::size_t uniform_index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  /// Draws from Beta(a, b). Works in log space so that very small shapes
  /// (a = 1e-3) do not underflow both gamma variates to zero.
  double beta(double a, double b);

  /// Symmetric Beta(alpha, alpha).
  double beta(double alpha) { return beta(alpha, alpha); }

 private:
  double log_gamma_variate(double shape);

  std::uint64_t key_;
  engine_type engine_;
};

}  // namespace mixdiv
