#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "disdiff/random.hpp"
#include "disdiff/tape.hpp"
#include "disdiff/tensor.hpp"

namespace disdiff {

/// A named trainable tensor with Adam state.
template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  Tensor<S> adam_m;
  Tensor<S> adam_v;
  bool trainable = true;

  void init(std::string n, Tensor<S> v) {
    name = std::move(n);
    value = std::move(v);
    grad = Tensor<S>::zeros(value.shape);
    adam_m = Tensor<S>::zeros(value.shape);
    adam_v = Tensor<S>::zeros(value.shape);
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), S(0)); }
};

template <typename S>
using ParamList = std::vector<Param<S>*>;

/// Per-forward binding of parameters to tape leaves. `frozen` contexts create
/// no-grad leaves, which both freezes the parameters and prunes the backward
/// sweep below them.
template <typename S>
struct GraphCtx {
  Tape<S>& tape;
  bool frozen = false;
  bool training = false;
  Rng* rng = nullptr;  // dropout noise; null disables dropout
  std::unordered_map<const Param<S>*, typename Tape<S>::Var> bound;

  typename Tape<S>::Var operator()(Param<S>& p) {
    auto it = bound.find(&p);
    if (it != bound.end()) return it->second;
    auto v = tape.leaf(p.value, !frozen && p.trainable);
    bound.emplace(&p, v);
    return v;
  }

  /// Copy accumulated tape gradients back into the parameters.
  void harvest() {
    if (frozen) return;
    for (auto& [p, v] : bound) {
      if (!p->trainable) continue;
      auto& g = tape.grad(v);
      if (g.numel() == 0) continue;
      Param<S>* pp = const_cast<Param<S>*>(p);
      for (std::int64_t i = 0; i < g.numel(); ++i) pp->grad[i] += g[i];
    }
  }
};

template <typename S>
struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;

  void step(const ParamList<S>& params) {
    ++step_count;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (Param<S>* p : params) {
      if (!p->trainable) continue;
      for (std::int64_t i = 0; i < p->value.numel(); ++i) {
        double g = static_cast<double>(p->grad[i]);
        double m = beta1 * static_cast<double>(p->adam_m[i]) + (1 - beta1) * g;
        double v = beta2 * static_cast<double>(p->adam_v[i]) + (1 - beta2) * g * g;
        p->adam_m[i] = static_cast<S>(m);
        p->adam_v[i] = static_cast<S>(v);
        p->value[i] -= static_cast<S>(lr * (m / bc1) /
                                      (std::sqrt(v / bc2) + eps));
      }
    }
  }

  static void zero_grads(const ParamList<S>& params) {
    for (Param<S>* p : params) p->zero_grad();
  }
};

/// Exponential moving average shadow of a parameter list, keyed by name.
template <typename S>
struct Ema {
  double decay = 0.9999;
  std::unordered_map<std::string, Tensor<S>> shadow;

  void init_from(const ParamList<S>& params) {
    shadow.clear();
    for (Param<S>* p : params) shadow[p->name] = p->value;
  }
  void update(const ParamList<S>& params) {
    for (Param<S>* p : params) {
      auto& s = shadow[p->name];
      for (std::int64_t i = 0; i < s.numel(); ++i)
        s[i] = static_cast<S>(decay * s[i] + (1.0 - decay) * p->value[i]);
    }
  }
  /// Swap EMA weights into the live parameters (for evaluation snapshots).
  void copy_to(const ParamList<S>& params) const {
    for (Param<S>* p : params) {
      auto it = shadow.find(p->name);
      if (it != shadow.end()) p->value = it->second;
    }
  }
};

// ---- layers ---------------------------------------------------------------

template <typename S>
struct Dense {
  Param<S> w, b;

  void init(const std::string& name, int in, int out, Rng& rng,
            double scale = 1.0, double bias_init = 0.0) {
    double k = scale / std::sqrt(static_cast<double>(in));
    w.init(name + ".w", rng.uniform_tensor<S>({in, out}, -k, k));
    b.init(name + ".b", Tensor<S>::full({out}, static_cast<S>(bias_init)));
  }
  void params(ParamList<S>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
  typename Tape<S>::Var operator()(GraphCtx<S>& ctx, typename Tape<S>::Var x) {
    return ctx.tape.linear(x, ctx(w), ctx(b));
  }
};

template <typename S>
struct Conv {
  Param<S> w, b;
  int stride = 1, pad = 1;

  void init(const std::string& name, int in_ch, int out_ch, int k, int stride_,
            int pad_, Rng& rng, bool zero = false) {
    stride = stride_;
    pad = pad_;
    if (zero) {
      w.init(name + ".w", Tensor<S>::zeros({out_ch, in_ch, k, k}));
    } else {
      double kk = 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k);
      w.init(name + ".w", rng.uniform_tensor<S>({out_ch, in_ch, k, k}, -kk, kk));
    }
    b.init(name + ".b", Tensor<S>::zeros({out_ch}));
  }
  void params(ParamList<S>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
  typename Tape<S>::Var operator()(GraphCtx<S>& ctx, typename Tape<S>::Var x) {
    return ctx.tape.conv2d(x, ctx(w), ctx(b), stride, pad);
  }
};

/// Group norm with learned per-channel affine.
template <typename S>
struct GroupNorm {
  Param<S> g, b;
  int groups = 8;

  void init(const std::string& name, int ch, int groups_) {
    groups = groups_;
    g.init(name + ".g", Tensor<S>::full({ch}, S(1)));
    b.init(name + ".b", Tensor<S>::zeros({ch}));
  }
  void params(ParamList<S>& out) {
    out.push_back(&g);
    out.push_back(&b);
  }
  typename Tape<S>::Var operator()(GraphCtx<S>& ctx, typename Tape<S>::Var x) {
    auto y = ctx.tape.group_norm(x, groups);
    return ctx.tape.channel_affine_cw(y, ctx(g), ctx(b));
  }
};

/// Inverted dropout; identity when ctx is not in training mode or p == 0.
template <typename S>
inline typename Tape<S>::Var dropout(GraphCtx<S>& ctx, typename Tape<S>::Var x,
                                     double p) {
  if (!ctx.training || p <= 0.0 || ctx.rng == nullptr) return x;
  Tensor<S> mask(ctx.tape.val(x).shape);
  S keep = static_cast<S>(1.0 / (1.0 - p));
  for (auto& m : mask.data) m = ctx.rng->uniform() < p ? S(0) : keep;
  return ctx.tape.mul(x, ctx.tape.constant(std::move(mask)));
}

/// Sinusoidal timestep embedding (computed outside the graph).
template <typename S>
inline Tensor<S> timestep_embedding(const std::vector<int>& t, int dim) {
  int half = dim / 2;
  int B = static_cast<int>(t.size());
  Tensor<S> out({B, dim});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
      double a = t[b] * freq;
      out[b * dim + i] = static_cast<S>(std::sin(a));
      out[b * dim + half + i] = static_cast<S>(std::cos(a));
    }
  return out;
}

inline int pick_groups(int channels) {
  for (int g : {8, 4, 2, 1})
    if (channels % g == 0) return g;
  return 1;
}

}  // namespace disdiff
