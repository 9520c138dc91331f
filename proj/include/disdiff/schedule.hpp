#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "disdiff/tensor.hpp"

namespace disdiff {

/// Fixed-variance forward-process schedule. Arrays are 0-indexed by t-1
/// (t runs 1..T); kept in double regardless of the model scalar type so the
/// cumulative product stays accurate.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // β_t
  std::vector<double> alpha;      // 1 - β_t
  std::vector<double> alpha_bar;  // ∏_{s<=t} α_s
  std::vector<double> sigma;      // posterior std √β̃_t

  static NoiseSchedule linear(int T, double beta_start = 1e-4,
                              double beta_end = 0.02) {
    if (T < 2) throw std::invalid_argument("schedule: T must be >= 2");
    if (beta_start <= 0 || beta_end <= 0 || beta_start >= 1 || beta_end >= 1)
      throw std::invalid_argument("schedule: beta endpoints must be in (0,1)");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.sigma.resize(T);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
      s.beta[i] = beta_start + (beta_end - beta_start) * i / (T - 1);
      s.alpha[i] = 1.0 - s.beta[i];
      prod *= s.alpha[i];
      s.alpha_bar[i] = prod;
      double ab_prev = i == 0 ? 1.0 : s.alpha_bar[i - 1];
      s.sigma[i] =
          std::sqrt((1.0 - ab_prev) / (1.0 - s.alpha_bar[i]) * s.beta[i]);
    }
    return s;
  }

  void check_t(int t) const {
    if (t < 1 || t > T)
      throw std::invalid_argument("timestep out of range: t=" +
                                  std::to_string(t));
  }

  double beta_t(int t) const { check_t(t); return beta[t - 1]; }
  double alpha_t(int t) const { check_t(t); return alpha[t - 1]; }
  double sigma_t(int t) const { check_t(t); return sigma[t - 1]; }
  /// ᾱ_t with the convention ᾱ_0 = 1.
  double alpha_bar_t(int t) const {
    if (t == 0) return 1.0;
    check_t(t);
    return alpha_bar[t - 1];
  }
  double sqrt_ab(int t) const { return std::sqrt(alpha_bar_t(t)); }
  double sqrt_1mab(int t) const { return std::sqrt(1.0 - alpha_bar_t(t)); }
};

/// x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε, per-item timesteps.
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, const std::vector<int>& t,
                   const Tensor<S>& eps, const NoiseSchedule& sched) {
  check_same_shape(x0, eps, "q_sample");
  int B = x0.dim(0);
  if (static_cast<int>(t.size()) != B)
    throw std::invalid_argument("q_sample: t length != batch");
  std::int64_t stride = x0.numel() / B;
  Tensor<S> out(x0.shape);
  for (int b = 0; b < B; ++b) {
    sched.check_t(t[b]);
    S a = static_cast<S>(sched.sqrt_ab(t[b]));
    S s = static_cast<S>(sched.sqrt_1mab(t[b]));
    for (std::int64_t i = 0; i < stride; ++i)
      out[b * stride + i] = a * x0[b * stride + i] + s * eps[b * stride + i];
  }
  return out;
}

template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, int t, const Tensor<S>& eps,
                   const NoiseSchedule& sched) {
  return q_sample(x0, std::vector<int>(static_cast<size_t>(x0.dim(0)), t), eps,
                  sched);
}

}  // namespace disdiff
