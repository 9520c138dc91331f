#pragma once

#include <sstream>
#include <stdexcept>
#include <vector>

#include "disdiff/model.hpp"

namespace disdiff {

struct LossReport {
  double l_r = 0, l_in = 0, l_va = 0, gamma_d = 0, l_a = 0;
  std::vector<double> d, d_n, d_p;  // batch-mean per-factor distances
};

/// Invariant loss (cross-entropy over d_k = ‖ẑ^{k|c} - ẑ^k‖).
template <typename S>
typename Tape<S>::Var invariant_loss(Tape<S>& tape, typename Tape<S>::Var z_hat,
                                     typename Tape<S>::Var z_hat_c,
                                     const std::vector<int>& c) {
  auto d = tape.l2norm_lastdim(tape.sub(z_hat_c, z_hat));  // [B,N]
  return tape.cross_entropy(d, c);
}

/// Variant loss (cross-entropy over dⁿ_k - dᵖ_k).
template <typename S>
typename Tape<S>::Var variant_loss(Tape<S>& tape, typename Tape<S>::Var z,
                                   typename Tape<S>::Var z_hat,
                                   typename Tape<S>::Var z_hat_c,
                                   const std::vector<int>& c) {
  auto dn = tape.l2norm_lastdim(tape.sub(z_hat, z));
  auto dp = tape.l2norm_lastdim(tape.sub(z_hat_c, z));
  return tape.cross_entropy(tape.sub(dn, dp), c);
}

/// γ_d = λ · mean‖x̂_0 - x̂_0^c‖². Plain tensors in, plain scalar out: the
/// weight path carries no gradient by construction.
template <typename S>
double dynamic_weight(const Tensor<S>& x_hat0, const Tensor<S>& x_hat0_c,
                      double lambda) {
  check_same_shape(x_hat0, x_hat0_c, "dynamic_weight");
  double acc = 0;
  for (std::int64_t i = 0; i < x_hat0.numel(); ++i) {
    double d = static_cast<double>(x_hat0[i]) - static_cast<double>(x_hat0_c[i]);
    acc += d * d;
  }
  return lambda * acc / static_cast<double>(x_hat0.numel());
}

/// Per-item coefficient of ΣG in the reconstruction residual:
/// √α_t √(1-ᾱ_t) / β_t · σ_t.
inline double recon_field_coef(const NoiseSchedule& sched, int t) {
  return std::sqrt(sched.alpha_t(t)) * sched.sqrt_1mab(t) / sched.beta_t(t) *
         sched.sigma_t(t);
}

struct TrainStepOptions {
  bool update = true;          // apply the optimizer step
  bool disentangle = true;     // include L_in/L_va (γ_d-weighted)
  double lambda_override = -1; // <0: use model config
};

namespace detail {
template <typename S>
std::vector<double> batch_mean_rows(const Tensor<S>& m) {
  int B = m.dim(0), N = m.dim(1);
  std::vector<double> out(N, 0.0);
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < N; ++k) out[k] += static_cast<double>(m[b * N + k]) / B;
  return out;
}
template <typename S>
typename Tape<S>::Var to_unit_range(Tape<S>& tape, typename Tape<S>::Var x) {
  // diffusion domain [-1,1] -> encoder domain [0,1]
  auto half = tape.constant(Tensor<S>::full(tape.val(x).shape, S(0.5)));
  return tape.add(tape.scale(x, S(0.5)), half);
}
}  // namespace detail

/// One joint optimization step of E_φ and G_ψ against the frozen DPM
/// (Algorithm-1 structure: reconstruction + γ_d-weighted disentangling loss,
/// with the disentangling gradient blocked from the encoder).
///
/// x0 is in [0,1]; the diffusion process runs on 2·x0 - 1.
template <typename S>
LossReport disdiff_train_step(DisDiffModel<S>& model, const Tensor<S>& x0,
                              const NoiseSchedule& sched, Rng& rng,
                              Adam<S>& opt, Ema<S>* ema,
                              const TrainStepOptions& opts = {}) {
  using Var = typename Tape<S>::Var;
  int B = x0.dim(0);
  if (B == 0) throw std::invalid_argument("disdiff_train_step: empty batch");
  int N = model.cfg.n_factors;
  double lambda =
      opts.lambda_override >= 0 ? opts.lambda_override : model.cfg.lambda_weight;

  std::vector<int> t(B), c(B);
  for (int b = 0; b < B; ++b) {
    t[b] = 1 + static_cast<int>(rng.uniform_int(sched.T));
    c[b] = static_cast<int>(rng.uniform_int(N));
  }
  Tensor<S> x0d = x0;
  for (auto& v : x0d.data) v = S(2) * v - S(1);
  Tensor<S> eps = rng.normal_tensor<S>(x0.shape);
  Tensor<S> xt = q_sample(x0d, t, eps, sched);

  Tape<S> tape;
  GraphCtx<S> ctx{tape};          // trainable: encoder, field model, bank
  ctx.training = true;
  ctx.rng = &rng;
  GraphCtx<S> frozen{tape};       // frozen DPM + frozen re-encode encoder
  frozen.frozen = true;

  Var x0_var = tape.constant(x0);
  Var xt_var = tape.constant(xt);
  Var eps_var = tape.constant(std::move(eps));

  // reconstruction loss (gradients reach both E_φ and G_ψ)
  Var z = model.encoder.forward(ctx, x0_var);
  Var q = model.pos_q(ctx);
  Var sum_g = -1;
  for (int k = 0; k < N; ++k) {
    Var f = model.decode_field(ctx, xt_var, tape.select_slot(z, k), t,
                               std::vector<int>(B, k), q);
    sum_g = sum_g < 0 ? f : tape.add(sum_g, f);
  }
  Var eps_theta = model.eps_model.forward(frozen, xt_var, t);
  std::vector<S> coef(B);
  for (int b = 0; b < B; ++b)
    coef[b] = static_cast<S>(recon_field_coef(sched, t[b]));
  Var resid = tape.add(tape.sub(eps_var, eps_theta),
                       tape.row_scale(sum_g, std::move(coef)));
  Var l_r = tape.mean_sq(resid);

  LossReport rep;
  rep.l_r = static_cast<double>(tape.val(l_r)[0]);

  Var total = l_r;
  if (opts.disentangle) {
    // conditioned branch: detached z so the disentangling loss reaches G_ψ
    // but not the encoder
    Var z_det = tape.detach(z);
    Var g_sel = model.decode_field(ctx, xt_var, tape.gather_slots(z_det, c), t,
                                   c, q);
    Var eps_cond = compose_eps(tape, eps_theta, {g_sel}, t, sched);
    Var xh0c = tweedie_x0(tape, xt_var, eps_cond, t, sched);
    Var xh0 = tweedie_x0(tape, xt_var, eps_theta, t, sched);  // constant

    Var zh = model.encoder.forward(frozen, detail::to_unit_range(tape, xh0));
    Var zhc = model.encoder.forward(frozen, detail::to_unit_range(tape, xh0c));

    Var l_in = invariant_loss(tape, zh, zhc, c);
    Var l_va = variant_loss(tape, z_det, zh, zhc, c);
    rep.gamma_d = dynamic_weight(tape.val(xh0), tape.val(xh0c), lambda);
    rep.l_in = static_cast<double>(tape.val(l_in)[0]);
    rep.l_va = static_cast<double>(tape.val(l_va)[0]);
    rep.d = detail::batch_mean_rows(
        tape.val(tape.l2norm_lastdim(tape.sub(zhc, zh))));
    rep.d_n = detail::batch_mean_rows(
        tape.val(tape.l2norm_lastdim(tape.sub(zh, z_det))));
    rep.d_p = detail::batch_mean_rows(
        tape.val(tape.l2norm_lastdim(tape.sub(zhc, z_det))));
    total = tape.add(total, tape.scale(tape.add(l_in, l_va),
                                       static_cast<S>(rep.gamma_d)));
  }
  rep.l_a = static_cast<double>(tape.val(total)[0]);
  if (!std::isfinite(rep.l_a) || !std::isfinite(rep.l_r) ||
      !std::isfinite(rep.l_in) || !std::isfinite(rep.l_va)) {
    std::ostringstream os;
    os << "disdiff_train_step: non-finite loss (L_r=" << rep.l_r
       << " L_in=" << rep.l_in << " L_va=" << rep.l_va << ") at t = {";
    for (int b = 0; b < B; ++b) os << (b ? "," : "") << t[b];
    os << "}";
    throw std::runtime_error(os.str());
  }

  tape.backward(total);
  auto params = model.disdiff_params();
  Adam<S>::zero_grads(params);
  ctx.harvest();
  if (opts.update) {
    opt.step(params);
    if (ema) ema->update(params);
  }
  return rep;
}

}  // namespace disdiff
