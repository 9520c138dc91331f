#pragma once

#include <memory>
#include <string>
#include <vector>

#include "disdiff/diffusion.hpp"
#include "disdiff/encoder.hpp"
#include "disdiff/unet.hpp"

namespace disdiff {

// ---- score composition (Eq. 15) and Tweedie denoising (Eq. 16) ------------

/// ε_ψ(x_t, z^S, t) = ε_θ - √(1-ᾱ_t) Σ_{c∈S} G_c, per-item t. Fields may be
/// empty (S = ∅), in which case ε_θ is returned unchanged.
template <typename S>
typename Tape<S>::Var compose_eps(Tape<S>& tape, typename Tape<S>::Var eps_theta,
                                  const std::vector<typename Tape<S>::Var>& fields,
                                  const std::vector<int>& t,
                                  const NoiseSchedule& sched) {
  if (fields.empty()) return eps_theta;
  auto sum = fields[0];
  for (size_t i = 1; i < fields.size(); ++i) sum = tape.add(sum, fields[i]);
  std::vector<S> coef(t.size());
  for (size_t b = 0; b < t.size(); ++b)
    coef[b] = static_cast<S>(sched.sqrt_1mab(t[b]));
  return tape.sub(eps_theta, tape.row_scale(sum, std::move(coef)));
}

/// Tensor-level compose for sampling paths.
template <typename S>
Tensor<S> compose_eps(const Tensor<S>& eps_theta,
                      const std::vector<Tensor<S>>& fields,
                      const std::vector<int>& t, const NoiseSchedule& sched) {
  Tensor<S> out = eps_theta;
  if (fields.empty()) return out;
  int B = out.dim(0);
  std::int64_t stride = out.numel() / B;
  for (const auto& f : fields) {
    check_same_shape(out, f, "compose_eps");
    for (int b = 0; b < B; ++b) {
      S c = static_cast<S>(sched.sqrt_1mab(t[b]));
      for (std::int64_t i = 0; i < stride; ++i)
        out[b * stride + i] -= c * f[b * stride + i];
    }
  }
  return out;
}

/// x̂_0 = (x_t - √(1-ᾱ_t) ε̂) / √ᾱ_t
template <typename S>
typename Tape<S>::Var tweedie_x0(Tape<S>& tape, typename Tape<S>::Var x_t,
                                 typename Tape<S>::Var eps_hat,
                                 const std::vector<int>& t,
                                 const NoiseSchedule& sched) {
  std::vector<S> s1(t.size()), inv(t.size());
  for (size_t b = 0; b < t.size(); ++b) {
    sched.check_t(t[b]);
    s1[b] = static_cast<S>(sched.sqrt_1mab(t[b]));
    inv[b] = static_cast<S>(1.0 / sched.sqrt_ab(t[b]));
  }
  auto num = tape.sub(x_t, tape.row_scale(eps_hat, std::move(s1)));
  return tape.row_scale(num, std::move(inv));
}

template <typename S>
Tensor<S> tweedie_x0(const Tensor<S>& x_t, const Tensor<S>& eps_hat,
                     const std::vector<int>& t, const NoiseSchedule& sched) {
  check_same_shape(x_t, eps_hat, "tweedie_x0");
  int B = x_t.dim(0);
  std::int64_t stride = x_t.numel() / B;
  Tensor<S> out(x_t.shape);
  for (int b = 0; b < B; ++b) {
    sched.check_t(t[b]);
    double s1 = sched.sqrt_1mab(t[b]);
    double ra = sched.sqrt_ab(t[b]);
    for (std::int64_t i = 0; i < stride; ++i)
      out[b * stride + i] = static_cast<S>(
          (static_cast<double>(x_t[b * stride + i]) - s1 * eps_hat[b * stride + i]) /
          ra);
  }
  return out;
}

// ---- model bundle ----------------------------------------------------------

struct DisDiffConfig {
  int n_factors = 3;
  int z_dim = 32;
  int pos_embed_dim = 64;
  double lambda_weight = 0.05;
  bool clamp_denoised = false;
};

/// The full DisDiff parameter bundle: frozen DPM ε_θ, encoder E_φ,
/// gradient-field decoder G_ψ and the raw positional-embedding matrix whose
/// QR-orthonormalized rows index the factors.
template <typename S>
struct DisDiffModel {
  using Var = typename Tape<S>::Var;
  UNet<S> eps_model;
  UNet<S> field_model;
  Encoder<S> encoder;
  Param<S> pos_raw;  // A: [N, pos_embed_dim]
  DisDiffConfig cfg;
  int image_size = 32;

  void init(const UNetConfig& unet_cfg, const DisDiffConfig& cfg_,
            int image_size_, Rng& rng) {
    cfg = cfg_;
    image_size = image_size_;
    UNetConfig ec = unet_cfg;
    ec.conditional = false;
    eps_model.init("eps", ec, image_size, rng);
    UNetConfig gc = unet_cfg;
    gc.conditional = true;
    gc.z_dim = cfg.z_dim;
    gc.pos_embed_dim = cfg.pos_embed_dim;
    field_model.init("field", gc, image_size, rng);
    encoder.init("enc", image_size, cfg.n_factors, cfg.z_dim, rng);
    if (cfg.n_factors > cfg.pos_embed_dim)
      throw std::invalid_argument("pos embedding dim must be >= factor count");
    pos_raw.init("pos_raw",
                 rng.normal_tensor<S>({cfg.n_factors, cfg.pos_embed_dim}));
  }

  ParamList<S> dpm_params() {
    ParamList<S> out;
    eps_model.params(out);
    return out;
  }
  /// Everything trained during the disentanglement stage.
  ParamList<S> disdiff_params() {
    ParamList<S> out;
    encoder.params(out);
    field_model.params(out);
    out.push_back(&pos_raw);
    return out;
  }
  ParamList<S> all_params() {
    ParamList<S> out = dpm_params();
    auto d = disdiff_params();
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }

  /// Orthonormalized embedding rows on the tape (gradients reach pos_raw).
  Var pos_q(GraphCtx<S>& ctx) {
    return ctx.tape.qr_orthonormal_rows(ctx(pos_raw));
  }

  /// Current orthonormal bank as a plain tensor.
  Tensor<S> pos_q_value() {
    Tape<S> tape;
    return tape.val(tape.qr_orthonormal_rows(tape.constant(pos_raw.value)));
  }

  /// G_ψ(x_t, z^c, t, c): z_c [B,z_dim] var, c per item.
  Var decode_field(GraphCtx<S>& ctx, Var x_t, Var z_c, const std::vector<int>& t,
                   const std::vector<int>& c, Var q) {
    Var p = ctx.tape.gather_rows(q, c);
    return field_model.forward(ctx, x_t, t, z_c, p);
  }

  // ---- frozen (no-grad) conveniences --------------------------------------

  /// E_φ(x0) for x0 in [0,1]; returns [B,N,d].
  Tensor<S> encode(const Tensor<S>& x0) {
    Tape<S> tape;
    GraphCtx<S> ctx{tape};
    ctx.frozen = true;
    return tape.val(encoder.forward(ctx, tape.constant(x0)));
  }

  Tensor<S> predict_eps(const Tensor<S>& x_t, const std::vector<int>& t) {
    Tape<S> tape;
    GraphCtx<S> ctx{tape};
    ctx.frozen = true;
    return tape.val(eps_model.forward(ctx, tape.constant(x_t), t));
  }

  /// G fields for the given factor subset; z is [B,N,d].
  std::vector<Tensor<S>> predict_fields(const Tensor<S>& x_t,
                                        const std::vector<int>& t,
                                        const Tensor<S>& z,
                                        const std::vector<int>& subset) {
    std::vector<Tensor<S>> out;
    if (subset.empty()) return out;
    Tape<S> tape;
    GraphCtx<S> ctx{tape};
    ctx.frozen = true;
    Var q = pos_q(ctx);
    Var zv = tape.constant(z);
    Var xv = tape.constant(x_t);
    int B = x_t.dim(0);
    for (int c : subset) {
      Var zc = tape.select_slot(zv, c);
      Var f = decode_field(ctx, xv, zc, t, std::vector<int>(B, c), q);
      out.push_back(tape.val(f));
    }
    return out;
  }

  /// ε_ψ(x_t, z^S, t) as a sampler callback.
  EpsFn<S> conditional_eps_fn(Tensor<S> z, std::vector<int> subset,
                              const NoiseSchedule* sched) {
    return [this, z = std::move(z), subset = std::move(subset),
            sched](const Tensor<S>& x, const std::vector<int>& t) {
      auto eps = predict_eps(x, t);
      auto fields = predict_fields(x, t, z, subset);
      return compose_eps(eps, fields, t, *sched);
    };
  }

  /// Σ_{c∈S} G_c as the DDPM mean-shift callback.
  ShiftFn<S> field_shift_fn(Tensor<S> z, std::vector<int> subset) {
    return [this, z = std::move(z), subset = std::move(subset)](
               const Tensor<S>& x, const std::vector<int>& t) {
      auto fields = predict_fields(x, t, z, subset);
      Tensor<S> sum = Tensor<S>::zeros(x.shape);
      for (const auto& f : fields)
        for (std::int64_t i = 0; i < sum.numel(); ++i) sum[i] += f[i];
      return sum;
    };
  }

  /// One-shot conditioned (or unconditional, empty subset) Tweedie denoise.
  Tensor<S> conditioned_denoise(const Tensor<S>& x_t, const std::vector<int>& t,
                                const Tensor<S>& z,
                                const std::vector<int>& subset,
                                const NoiseSchedule& sched) {
    auto eps = predict_eps(x_t, t);
    auto fields = predict_fields(x_t, t, z, subset);
    auto x0 = tweedie_x0(x_t, compose_eps(eps, fields, t, sched), t, sched);
    if (cfg.clamp_denoised)
      for (auto& v : x0.data)
        v = std::max(S(-1), std::min(S(1), v));
    return x0;
  }
};

}  // namespace disdiff
