#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "disdiff/tensor.hpp"

namespace disdiff {

/// Deterministic RNG. Gaussian draws use an explicit Box-Muller transform
/// instead of std::normal_distribution so the byte stream depends only on
/// the seed, not on the standard library build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1). 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(engine_() % static_cast<std::uint64_t>(n));
  }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // avoid log(0)
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename S>
  Tensor<S> normal_tensor(std::vector<int> shape, double stddev = 1.0) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(normal() * stddev);
    return t;
  }

  template <typename S>
  Tensor<S> uniform_tensor(std::vector<int> shape, double lo, double hi) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(lo + (hi - lo) * uniform());
    return t;
  }

  /// Derive an independent stream; used to split one seed across subsystems.
  Rng split(std::uint64_t salt) {
    return Rng(engine_() ^ (salt * 0x9E3779B97F4A7C15ull));
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace disdiff
