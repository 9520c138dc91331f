#pragma once

#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "disdiff/nn.hpp"
#include "disdiff/schedule.hpp"

namespace disdiff {

/// Batched noise predictor: (x_t, per-item t) -> ε̂, no gradients.
template <typename S>
using EpsFn =
    std::function<Tensor<S>(const Tensor<S>&, const std::vector<int>&)>;

/// Mean-shift field for conditional DDPM sampling (the σ² ΣG term).
template <typename S>
using ShiftFn =
    std::function<Tensor<S>(const Tensor<S>&, const std::vector<int>&)>;

/// One ε-prediction training step. `model` is any callable
/// (GraphCtx&, Var x_t, const std::vector<int>& t) -> Var so tests can stub
/// the predictor. Returns the pre-update loss.
template <typename S, typename F>
double ddpm_train_step(F&& model, const ParamList<S>& params, Adam<S>& opt,
                       Ema<S>* ema, const NoiseSchedule& sched,
                       const Tensor<S>& x0, Rng& rng) {
  int B = x0.dim(0);
  if (B == 0) throw std::invalid_argument("ddpm_train_step: empty batch");
  std::vector<int> t(B);
  for (int b = 0; b < B; ++b)
    t[b] = 1 + static_cast<int>(rng.uniform_int(sched.T));
  Tensor<S> eps = rng.normal_tensor<S>(x0.shape);
  Tensor<S> xt = q_sample(x0, t, eps, sched);

  Tape<S> tape;
  GraphCtx<S> ctx{tape};
  ctx.training = true;
  ctx.rng = &rng;
  auto x_var = tape.constant(std::move(xt));
  auto eps_var = tape.constant(std::move(eps));
  auto pred = model(ctx, x_var, t);
  auto loss = tape.mean_sq(tape.sub(eps_var, pred));
  double loss_val = static_cast<double>(tape.val(loss)[0]);
  if (!std::isfinite(loss_val)) {
    std::ostringstream os;
    os << "ddpm_train_step: non-finite loss at t = {";
    for (int b = 0; b < B; ++b) os << (b ? "," : "") << t[b];
    os << "}";
    throw std::runtime_error(os.str());
  }
  tape.backward(loss);
  Adam<S>::zero_grads(params);
  ctx.harvest();
  opt.step(params);
  if (ema) ema->update(params);
  return loss_val;
}

/// Algorithm-2 style ancestral sampling. `shift` may be null (unconditional).
template <typename S>
Tensor<S> ddpm_sample(const EpsFn<S>& eps_fn, const NoiseSchedule& sched,
                      const std::vector<int>& shape, Rng& rng,
                      const ShiftFn<S>& shift = nullptr) {
  Tensor<S> x = rng.normal_tensor<S>(shape);
  int B = shape[0];
  std::int64_t n = x.numel();
  for (int t = sched.T; t >= 1; --t) {
    std::vector<int> tv(static_cast<size_t>(B), t);
    Tensor<S> eps_hat = eps_fn(x, tv);
    double inv_sqrt_a = 1.0 / std::sqrt(sched.alpha_t(t));
    double coef = sched.beta_t(t) / sched.sqrt_1mab(t);
    double sig = sched.sigma_t(t);
    Tensor<S> sh;
    if (shift) sh = shift(x, tv);
    for (std::int64_t i = 0; i < n; ++i) {
      double m = inv_sqrt_a * (static_cast<double>(x[i]) -
                               coef * static_cast<double>(eps_hat[i]));
      if (shift) m += sig * sig * static_cast<double>(sh[i]);
      double noise = t > 1 ? rng.normal() : 0.0;
      x[i] = static_cast<S>(m + sig * noise);
      if (!std::isfinite(static_cast<double>(x[i])))
        throw std::runtime_error("ddpm_sample: non-finite sample at t=" +
                                 std::to_string(t));
    }
  }
  return x;
}

/// Deterministic DDIM transition using a precomputed ε̂. Valid both for
/// sampling (t_to < t_from) and inversion (t_to > t_from); t = 0 means clean.
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& eps_hat, const Tensor<S>& x_t, int t_from,
                    int t_to, const NoiseSchedule& sched) {
  if (t_from == t_to || t_from < 0 || t_to < 0 || t_from > sched.T ||
      t_to > sched.T)
    throw std::invalid_argument("ddim_step: invalid timestep pair");
  check_same_shape(eps_hat, x_t, "ddim_step");
  double af = sched.alpha_bar_t(t_from), at = sched.alpha_bar_t(t_to);
  double sf = std::sqrt(1.0 - af), st = std::sqrt(1.0 - at);
  double raf = std::sqrt(af), rat = std::sqrt(at);
  Tensor<S> out(x_t.shape);
  for (std::int64_t i = 0; i < x_t.numel(); ++i) {
    double x0 = (static_cast<double>(x_t[i]) - sf * eps_hat[i]) / raf;
    out[i] = static_cast<S>(rat * x0 + st * eps_hat[i]);
  }
  return out;
}

/// Evenly spaced sub-sequence T = t_K > ... > t_1 = 0 (K = steps + 1 points).
inline std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T)
    throw std::invalid_argument("ddim_timesteps: bad step count");
  std::vector<int> ts;
  for (int i = 0; i <= steps; ++i)
    ts.push_back(static_cast<int>(static_cast<long long>(T) * i / steps));
  return ts;  // ascending 0..T
}

/// Deterministic DDIM sampling from x_T down the given ascending grid.
template <typename S>
Tensor<S> ddim_sample(const EpsFn<S>& eps_fn, const NoiseSchedule& sched,
                      Tensor<S> x, const std::vector<int>& grid) {
  int B = x.dim(0);
  for (int j = static_cast<int>(grid.size()) - 1; j >= 1; --j) {
    int t_from = grid[j], t_to = grid[j - 1];
    std::vector<int> tv(static_cast<size_t>(B), t_from);
    x = ddim_step(eps_fn(x, tv), x, t_from, t_to, sched);
  }
  return x;
}

/// DDIM inversion: runs the grid upward, evaluating ε̂ at the lower endpoint
/// of each transition (clamped to t >= 1 for the t = 0 start).
template <typename S>
Tensor<S> ddim_invert(const EpsFn<S>& eps_fn, const NoiseSchedule& sched,
                      Tensor<S> x, const std::vector<int>& grid) {
  int B = x.dim(0);
  for (size_t j = 0; j + 1 < grid.size(); ++j) {
    int t_from = grid[j], t_to = grid[j + 1];
    std::vector<int> tv(static_cast<size_t>(B), std::max(t_from, 1));
    x = ddim_step(eps_fn(x, tv), x, t_from, t_to, sched);
  }
  return x;
}

}  // namespace disdiff
