#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "disdiff/tensor.hpp"

namespace disdiff {

/// Reverse-mode autodiff on a linear tape. Nodes are created in topological
/// order by construction, so backward() is a single reverse sweep.
///
/// The op set is exactly what the UNet/encoder stack needs: dense + conv
/// layers (Eigen GEMM backed), group norm, attention, and the handful of
/// pointwise/reduction ops the diffusion losses are built from.
template <typename S>
class Tape {
 public:
  using Var = int;
  using Mat =
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;

  struct Node {
    Tensor<S> val;
    Tensor<S> grad;  // allocated on demand
    std::function<void(Tape&, int)> back;
    bool needs_grad = false;
  };

  std::vector<Node> nodes;

  const Tensor<S>& val(Var v) const { return nodes[v].val; }
  Tensor<S>& grad(Var v) { return nodes[v].grad; }
  bool needs_grad(Var v) const { return nodes[v].needs_grad; }

  Var leaf(Tensor<S> t, bool needs_grad_flag) {
    Node n;
    n.val = std::move(t);
    n.needs_grad = needs_grad_flag;
    nodes.push_back(std::move(n));
    return static_cast<Var>(nodes.size() - 1);
  }

  Var constant(Tensor<S> t) { return leaf(std::move(t), false); }

  void ensure_grad(Var v) {
    if (nodes[v].grad.numel() == 0)
      nodes[v].grad = Tensor<S>::zeros(nodes[v].val.shape);
  }

  void backward(Var loss) {
    if (nodes[loss].val.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    ensure_grad(loss);
    nodes[loss].grad[0] = S(1);
    for (int i = loss; i >= 0; --i) {
      if (!nodes[i].needs_grad || !nodes[i].back) continue;
      if (nodes[i].grad.numel() == 0) continue;  // not on the loss path
      nodes[i].back(*this, i);
    }
  }

  // ---- pointwise ----------------------------------------------------------

  Var add(Var a, Var b) {
    check_same_shape(val(a), val(b), "add");
    Tensor<S> out = val(a);
    const S* pb = val(b).ptr();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
      tp.accum(a, tp.grad(self));
      tp.accum(b, tp.grad(self));
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(val(a), val(b), "sub");
    Tensor<S> out = val(a);
    const S* pb = val(b).ptr();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
      tp.accum(a, tp.grad(self));
      tp.accum_neg(b, tp.grad(self));
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape(val(a), val(b), "mul");
    Tensor<S> out = val(a);
    const S* pb = val(b).ptr();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
      const Tensor<S>& g = tp.grad(self);
      if (tp.needs_grad(a)) {
        tp.ensure_grad(a);
        const S* pb2 = tp.val(b).ptr();
        S* pa = tp.grad(a).ptr();
        for (std::int64_t i = 0; i < g.numel(); ++i) pa[i] += g[i] * pb2[i];
      }
      if (tp.needs_grad(b)) {
        tp.ensure_grad(b);
        const S* pa2 = tp.val(a).ptr();
        S* pbg = tp.grad(b).ptr();
        for (std::int64_t i = 0; i < g.numel(); ++i) pbg[i] += g[i] * pa2[i];
      }
    });
  }

  Var scale(Var a, S c) {
    Tensor<S> out = val(a);
    for (auto& v : out.data) v *= c;
    return make(std::move(out), {a}, [a, c](Tape& tp, int self) {
      if (!tp.needs_grad(a)) return;
      tp.ensure_grad(a);
      const Tensor<S>& g = tp.grad(self);
      S* pa = tp.grad(a).ptr();
      for (std::int64_t i = 0; i < g.numel(); ++i) pa[i] += c * g[i];
    });
  }

  /// Per-leading-index scaling: y[b, ...] = coef[b] * x[b, ...].
  Var row_scale(Var a, std::vector<S> coef) {
    const Tensor<S>& x = val(a);
    int B = x.dim(0);
    if (static_cast<int>(coef.size()) != B)
      throw std::invalid_argument("row_scale: coef length != batch");
    std::int64_t stride = x.numel() / B;
    Tensor<S> out = x;
    for (int b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < stride; ++i) out[b * stride + i] *= coef[b];
    return make(std::move(out), {a},
                [a, coef = std::move(coef), stride, B](Tape& tp, int self) {
                  if (!tp.needs_grad(a)) return;
                  tp.ensure_grad(a);
                  const Tensor<S>& g = tp.grad(self);
                  S* pa = tp.grad(a).ptr();
                  for (int b = 0; b < B; ++b)
                    for (std::int64_t i = 0; i < stride; ++i)
                      pa[b * stride + i] += coef[b] * g[b * stride + i];
                });
  }

  Var silu(Var a) {
    Tensor<S> out = val(a);
    for (auto& v : out.data) {
      S sig = S(1) / (S(1) + std::exp(-v));
      v = v * sig;
    }
    return make(std::move(out), {a}, [a](Tape& tp, int self) {
      if (!tp.needs_grad(a)) return;
      tp.ensure_grad(a);
      const Tensor<S>& x = tp.val(a);
      const Tensor<S>& g = tp.grad(self);
      S* pa = tp.grad(a).ptr();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        S sig = S(1) / (S(1) + std::exp(-x[i]));
        pa[i] += g[i] * sig * (S(1) + x[i] * (S(1) - sig));
      }
    });
  }

  Var relu(Var a) {
    Tensor<S> out = val(a);
    for (auto& v : out.data) v = v > S(0) ? v : S(0);
    return make(std::move(out), {a}, [a](Tape& tp, int self) {
      if (!tp.needs_grad(a)) return;
      tp.ensure_grad(a);
      const Tensor<S>& x = tp.val(a);
      const Tensor<S>& g = tp.grad(self);
      S* pa = tp.grad(a).ptr();
      for (std::int64_t i = 0; i < g.numel(); ++i)
        if (x[i] > S(0)) pa[i] += g[i];
    });
  }

  Var detach(Var a) { return leaf(val(a), false); }

  Var reshape(Var a, std::vector<int> shp) {
    Tensor<S> out = val(a).reshaped(shp);
    return make(std::move(out), {a}, [a](Tape& tp, int self) {
      if (!tp.needs_grad(a)) return;
      tp.ensure_grad(a);
      const Tensor<S>& g = tp.grad(self);
      S* pa = tp.grad(a).ptr();
      for (std::int64_t i = 0; i < g.numel(); ++i) pa[i] += g[i];
    });
  }

  // ---- dense --------------------------------------------------------------

  /// y = x·W + b with x [..., I] flattened to rows. b may be -1 (no bias).
  Var linear(Var x, Var w, Var b) {
    const Tensor<S>& xv = val(x);
    const Tensor<S>& wv = val(w);
    int I = wv.dim(0), O = wv.dim(1);
    if (xv.dim(xv.ndim() - 1) != I)
      throw std::invalid_argument("linear: input feature dim mismatch");
    std::int64_t R = xv.numel() / I;
    std::vector<int> out_shape = xv.shape;
    out_shape.back() = O;
    Tensor<S> out(out_shape);
    CMapM X(xv.ptr(), R, I), W(wv.ptr(), I, O);
    MapM Y(out.ptr(), R, O);
    Y.noalias() = X * W;
    if (b >= 0) {
      const Tensor<S>& bv = val(b);
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> bb(bv.ptr(), O);
      Y.rowwise() += bb;
    }
    return make(std::move(out), {x, w, b}, [x, w, b, R, I, O](Tape& tp, int self) {
      CMapM G(tp.grad(self).ptr(), R, O);
      if (tp.needs_grad(x)) {
        tp.ensure_grad(x);
        MapM GX(tp.grad(x).ptr(), R, I);
        CMapM W2(tp.val(w).ptr(), I, O);
        GX.noalias() += G * W2.transpose();
      }
      if (tp.needs_grad(w)) {
        tp.ensure_grad(w);
        MapM GW(tp.grad(w).ptr(), I, O);
        CMapM X2(tp.val(x).ptr(), R, I);
        GW.noalias() += X2.transpose() * G;
      }
      if (b >= 0 && tp.needs_grad(b)) {
        tp.ensure_grad(b);
        Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> GB(tp.grad(b).ptr(), O);
        GB += G.colwise().sum();
      }
    });
  }

  // ---- convolution --------------------------------------------------------

  /// 2D convolution, square kernel, zero padding.
  Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor<S>& xv = val(x);
    const Tensor<S>& wv = val(w);
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W_ = xv.dim(3);
    int F = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != C) throw std::invalid_argument("conv2d: channel mismatch");
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W_ + 2 * pad - k) / stride + 1;
    Tensor<S> out({B, F, Ho, Wo});
    int K2 = C * k * k, HW = Ho * Wo;
    Tensor<S> cols({K2, HW});
    CMapM Wm(wv.ptr(), F, K2);
    for (int bi = 0; bi < B; ++bi) {
      im2col(xv.ptr() + static_cast<std::int64_t>(bi) * C * H * W_, C, H, W_, k,
             stride, pad, cols.ptr());
      CMapM Cm(cols.ptr(), K2, HW);
      MapM Ym(out.ptr() + static_cast<std::int64_t>(bi) * F * HW, F, HW);
      Ym.noalias() = Wm * Cm;
    }
    if (b >= 0) {
      const Tensor<S>& bv = val(b);
      for (int bi = 0; bi < B; ++bi)
        for (int f = 0; f < F; ++f) {
          S bias = bv[f];
          S* p = out.ptr() + (static_cast<std::int64_t>(bi) * F + f) * HW;
          for (int i = 0; i < HW; ++i) p[i] += bias;
        }
    }
    auto backfn = [x, w, b, B, C, H, W_, F, k, stride, pad, Ho, Wo, K2,
                   HW](Tape& tp, int self) {
      const Tensor<S>& gv = tp.grad(self);
      CMapM Wm2(tp.val(w).ptr(), F, K2);
      Tensor<S> cols2({K2, HW});
      bool gx = tp.needs_grad(x), gw = tp.needs_grad(w);
      bool gb = (b >= 0) && tp.needs_grad(b);
      if (gx) tp.ensure_grad(x);
      if (gw) tp.ensure_grad(w);
      if (gb) tp.ensure_grad(b);
      for (int bi = 0; bi < B; ++bi) {
        CMapM Gm(gv.ptr() + static_cast<std::int64_t>(bi) * F * HW, F, HW);
        if (gw) {
          im2col(tp.val(x).ptr() + static_cast<std::int64_t>(bi) * C * H * W_,
                 C, H, W_, k, stride, pad, cols2.ptr());
          CMapM Cm(cols2.ptr(), K2, HW);
          MapM GW(tp.grad(w).ptr(), F, K2);
          GW.noalias() += Gm * Cm.transpose();
        }
        if (gx) {
          Mat dcols = Wm2.transpose() * Gm;  // [K2, HW]
          col2im_add(dcols.data(), C, H, W_, k, stride, pad,
                     tp.grad(x).ptr() +
                         static_cast<std::int64_t>(bi) * C * H * W_);
        }
        if (gb) {
          S* pb = tp.grad(b).ptr();
          for (int f = 0; f < F; ++f) pb[f] += Gm.row(f).sum();
        }
      }
    };
    return make(std::move(out), {x, w, b}, std::move(backfn));
  }

  // ---- normalization ------------------------------------------------------

  /// Group normalization without affine parameters (conditioning applies the
  /// affine part separately).
  Var group_norm(Var x, int groups, S eps = S(1e-5)) {
    const Tensor<S>& xv = val(x);
    int B = xv.dim(0), C = xv.dim(1);
    std::int64_t HW = xv.numel() / (static_cast<std::int64_t>(B) * C);
    if (C % groups != 0)
      throw std::invalid_argument("group_norm: C % groups != 0");
    int cg = C / groups;
    std::int64_t gsz = cg * HW;
    Tensor<S> out(xv.shape);
    Tensor<S> mean({B, groups}), inv({B, groups});
    for (int b = 0; b < B; ++b)
      for (int g = 0; g < groups; ++g) {
        const S* p = xv.ptr() + (static_cast<std::int64_t>(b) * C + g * cg) * HW;
        S m = 0;
        for (std::int64_t i = 0; i < gsz; ++i) m += p[i];
        m /= static_cast<S>(gsz);
        S v = 0;
        for (std::int64_t i = 0; i < gsz; ++i) {
          S d = p[i] - m;
          v += d * d;
        }
        v /= static_cast<S>(gsz);
        S iv = S(1) / std::sqrt(v + eps);
        mean[b * groups + g] = m;
        inv[b * groups + g] = iv;
        S* q = out.ptr() + (static_cast<std::int64_t>(b) * C + g * cg) * HW;
        for (std::int64_t i = 0; i < gsz; ++i) q[i] = (p[i] - m) * iv;
      }
    return make(std::move(out), {x},
                [x, B, groups, gsz, cg, HW, mean = std::move(mean),
                 inv = std::move(inv)](Tape& tp, int self) {
                  if (!tp.needs_grad(x)) return;
                  tp.ensure_grad(x);
                  const Tensor<S>& g = tp.grad(self);
                  const Tensor<S>& y = tp.val(self);
                  S* px = tp.grad(x).ptr();
                  int C2 = cg * groups;
                  for (int b = 0; b < B; ++b)
                    for (int gi = 0; gi < groups; ++gi) {
                      std::int64_t off =
                          (static_cast<std::int64_t>(b) * C2 + gi * cg) * HW;
                      const S* pg = g.ptr() + off;
                      const S* py = y.ptr() + off;
                      S sg = 0, sgy = 0;
                      for (std::int64_t i = 0; i < gsz; ++i) {
                        sg += pg[i];
                        sgy += pg[i] * py[i];
                      }
                      S n = static_cast<S>(gsz);
                      S iv = inv[b * groups + gi];
                      for (std::int64_t i = 0; i < gsz; ++i)
                        px[off + i] +=
                            iv * (pg[i] - sg / n - py[i] * sgy / n);
                    }
                });
  }

  /// y[b,c,:,:] = h[b,c,:,:] * s[b,c] + t[b,c]
  Var channel_affine(Var h, Var s, Var t) {
    const Tensor<S>& hv = val(h);
    int B = hv.dim(0), C = hv.dim(1);
    std::int64_t HW = hv.numel() / (static_cast<std::int64_t>(B) * C);
    const Tensor<S>& sv = val(s);
    if (sv.dim(0) != B || sv.dim(1) != C)
      throw std::invalid_argument("channel_affine: scale shape mismatch");
    Tensor<S> out(hv.shape);
    const Tensor<S>& tv = val(t);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
        S sc = sv[b * C + c], sh = tv[b * C + c];
        for (std::int64_t i = 0; i < HW; ++i)
          out[off + i] = hv[off + i] * sc + sh;
      }
    return make(std::move(out), {h, s, t}, [h, s, t, B, C, HW](Tape& tp, int self) {
      const Tensor<S>& g = tp.grad(self);
      if (tp.needs_grad(h)) {
        tp.ensure_grad(h);
        const Tensor<S>& sv2 = tp.val(s);
        S* ph = tp.grad(h).ptr();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
            S sc = sv2[b * C + c];
            for (std::int64_t i = 0; i < HW; ++i) ph[off + i] += g[off + i] * sc;
          }
      }
      if (tp.needs_grad(s)) {
        tp.ensure_grad(s);
        const Tensor<S>& hv2 = tp.val(h);
        S* ps = tp.grad(s).ptr();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
            S acc = 0;
            for (std::int64_t i = 0; i < HW; ++i) acc += g[off + i] * hv2[off + i];
            ps[b * C + c] += acc;
          }
      }
      if (tp.needs_grad(t)) {
        tp.ensure_grad(t);
        S* pt = tp.grad(t).ptr();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
            S acc = 0;
            for (std::int64_t i = 0; i < HW; ++i) acc += g[off + i];
            pt[b * C + c] += acc;
          }
      }
    });
  }

  /// Learned per-channel affine: y[b,c,:,:] = h[b,c,:,:] * s[c] + t[c].
  Var channel_affine_cw(Var h, Var s, Var t) {
    const Tensor<S>& hv = val(h);
    int B = hv.dim(0), C = hv.dim(1);
    std::int64_t HW = hv.numel() / (static_cast<std::int64_t>(B) * C);
    if (val(s).numel() != C || val(t).numel() != C)
      throw std::invalid_argument("channel_affine_cw: param length != C");
    Tensor<S> out(hv.shape);
    const Tensor<S>& sv = val(s);
    const Tensor<S>& tv = val(t);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i)
          out[off + i] = hv[off + i] * sv[c] + tv[c];
      }
    return make(std::move(out), {h, s, t}, [h, s, t, B, C, HW](Tape& tp, int self) {
      const Tensor<S>& g = tp.grad(self);
      if (tp.needs_grad(h)) {
        tp.ensure_grad(h);
        const Tensor<S>& sv2 = tp.val(s);
        S* ph = tp.grad(h).ptr();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i)
              ph[off + i] += g[off + i] * sv2[c];
          }
      }
      if (tp.needs_grad(s)) {
        tp.ensure_grad(s);
        const Tensor<S>& hv2 = tp.val(h);
        S* ps = tp.grad(s).ptr();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
            S acc = 0;
            for (std::int64_t i = 0; i < HW; ++i)
              acc += g[off + i] * hv2[off + i];
            ps[c] += acc;
          }
      }
      if (tp.needs_grad(t)) {
        tp.ensure_grad(t);
        S* pt = tp.grad(t).ptr();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
            S acc = 0;
            for (std::int64_t i = 0; i < HW; ++i) acc += g[off + i];
            pt[c] += acc;
          }
      }
    });
  }

  // ---- layout -------------------------------------------------------------

  /// [B,C,H,W] -> [B,HW,C]
  Var to_tokens(Var x) {
    const Tensor<S>& xv = val(x);
    int B = xv.dim(0), C = xv.dim(1), T = xv.dim(2) * xv.dim(3);
    Tensor<S> out({B, T, C});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int t = 0; t < T; ++t)
          out[(static_cast<std::int64_t>(b) * T + t) * C + c] =
              xv[(static_cast<std::int64_t>(b) * C + c) * T + t];
    return make(std::move(out), {x}, [x, B, C, T](Tape& tp, int self) {
      if (!tp.needs_grad(x)) return;
      tp.ensure_grad(x);
      const Tensor<S>& g = tp.grad(self);
      S* px = tp.grad(x).ptr();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int t = 0; t < T; ++t)
            px[(static_cast<std::int64_t>(b) * C + c) * T + t] +=
                g[(static_cast<std::int64_t>(b) * T + t) * C + c];
    });
  }

  /// [B,T,C] -> [B,C,H,W] with T = H*W
  Var from_tokens(Var x, int H, int W_) {
    const Tensor<S>& xv = val(x);
    int B = xv.dim(0), T = xv.dim(1), C = xv.dim(2);
    if (T != H * W_) throw std::invalid_argument("from_tokens: T != H*W");
    Tensor<S> out({B, C, H, W_});
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < T; ++t)
        for (int c = 0; c < C; ++c)
          out[(static_cast<std::int64_t>(b) * C + c) * T + t] =
              xv[(static_cast<std::int64_t>(b) * T + t) * C + c];
    return make(std::move(out), {x}, [x, B, C, T](Tape& tp, int self) {
      if (!tp.needs_grad(x)) return;
      tp.ensure_grad(x);
      const Tensor<S>& g = tp.grad(self);
      S* px = tp.grad(x).ptr();
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
          for (int c = 0; c < C; ++c)
            px[(static_cast<std::int64_t>(b) * T + t) * C + c] +=
                g[(static_cast<std::int64_t>(b) * C + c) * T + t];
    });
  }

  /// Slice along the last dimension.
  Var slice_lastdim(Var x, int start, int len) {
    const Tensor<S>& xv = val(x);
    int L = xv.dim(xv.ndim() - 1);
    if (start < 0 || start + len > L)
      throw std::invalid_argument("slice_lastdim: out of range");
    std::int64_t R = xv.numel() / L;
    std::vector<int> shp = xv.shape;
    shp.back() = len;
    Tensor<S> out(shp);
    for (std::int64_t r = 0; r < R; ++r)
      for (int i = 0; i < len; ++i) out[r * len + i] = xv[r * L + start + i];
    return make(std::move(out), {x}, [x, start, len, L, R](Tape& tp, int self) {
      if (!tp.needs_grad(x)) return;
      tp.ensure_grad(x);
      const Tensor<S>& g = tp.grad(self);
      S* px = tp.grad(x).ptr();
      for (std::int64_t r = 0; r < R; ++r)
        for (int i = 0; i < len; ++i) px[r * L + start + i] += g[r * len + i];
    });
  }

  Var concat_lastdim(Var a, Var b) {
    const Tensor<S>& av = val(a);
    const Tensor<S>& bv = val(b);
    int La = av.dim(av.ndim() - 1), Lb = bv.dim(bv.ndim() - 1);
    std::int64_t R = av.numel() / La;
    if (bv.numel() / Lb != R)
      throw std::invalid_argument("concat_lastdim: row mismatch");
    std::vector<int> shp = av.shape;
    shp.back() = La + Lb;
    Tensor<S> out(shp);
    for (std::int64_t r = 0; r < R; ++r) {
      for (int i = 0; i < La; ++i) out[r * (La + Lb) + i] = av[r * La + i];
      for (int i = 0; i < Lb; ++i) out[r * (La + Lb) + La + i] = bv[r * Lb + i];
    }
    return make(std::move(out), {a, b}, [a, b, La, Lb, R](Tape& tp, int self) {
      const Tensor<S>& g = tp.grad(self);
      if (tp.needs_grad(a)) {
        tp.ensure_grad(a);
        S* pa = tp.grad(a).ptr();
        for (std::int64_t r = 0; r < R; ++r)
          for (int i = 0; i < La; ++i) pa[r * La + i] += g[r * (La + Lb) + i];
      }
      if (tp.needs_grad(b)) {
        tp.ensure_grad(b);
        S* pb = tp.grad(b).ptr();
        for (std::int64_t r = 0; r < R; ++r)
          for (int i = 0; i < Lb; ++i)
            pb[r * Lb + i] += g[r * (La + Lb) + La + i];
      }
    });
  }

  /// Channel concatenation for [B,C,H,W] maps.
  Var concat_ch(Var a, Var b) {
    const Tensor<S>& av = val(a);
    const Tensor<S>& bv = val(b);
    int B = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
    std::int64_t HW = av.numel() / (static_cast<std::int64_t>(B) * Ca);
    Tensor<S> out({B, Ca + Cb, av.dim(2), av.dim(3)});
    for (int bi = 0; bi < B; ++bi) {
      std::copy_n(av.ptr() + static_cast<std::int64_t>(bi) * Ca * HW, Ca * HW,
                  out.ptr() + static_cast<std::int64_t>(bi) * (Ca + Cb) * HW);
      std::copy_n(bv.ptr() + static_cast<std::int64_t>(bi) * Cb * HW, Cb * HW,
                  out.ptr() + static_cast<std::int64_t>(bi) * (Ca + Cb) * HW +
                      Ca * HW);
    }
    return make(std::move(out), {a, b}, [a, b, B, Ca, Cb, HW](Tape& tp, int self) {
      const Tensor<S>& g = tp.grad(self);
      if (tp.needs_grad(a)) {
        tp.ensure_grad(a);
        S* pa = tp.grad(a).ptr();
        for (int bi = 0; bi < B; ++bi)
          for (std::int64_t i = 0; i < Ca * HW; ++i)
            pa[static_cast<std::int64_t>(bi) * Ca * HW + i] +=
                g[static_cast<std::int64_t>(bi) * (Ca + Cb) * HW + i];
      }
      if (tp.needs_grad(b)) {
        tp.ensure_grad(b);
        S* pb = tp.grad(b).ptr();
        for (int bi = 0; bi < B; ++bi)
          for (std::int64_t i = 0; i < Cb * HW; ++i)
            pb[static_cast<std::int64_t>(bi) * Cb * HW + i] +=
                g[static_cast<std::int64_t>(bi) * (Ca + Cb) * HW + Ca * HW + i];
      }
    });
  }

  Var upsample2x(Var x) {
    const Tensor<S>& xv = val(x);
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W_ = xv.dim(3);
    Tensor<S> out({B, C, 2 * H, 2 * W_});
    for (int bc = 0; bc < B * C; ++bc) {
      const S* p = xv.ptr() + static_cast<std::int64_t>(bc) * H * W_;
      S* q = out.ptr() + static_cast<std::int64_t>(bc) * 4 * H * W_;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W_; ++j) {
          S v = p[i * W_ + j];
          q[(2 * i) * 2 * W_ + 2 * j] = v;
          q[(2 * i) * 2 * W_ + 2 * j + 1] = v;
          q[(2 * i + 1) * 2 * W_ + 2 * j] = v;
          q[(2 * i + 1) * 2 * W_ + 2 * j + 1] = v;
        }
    }
    return make(std::move(out), {x}, [x, B, C, H, W_](Tape& tp, int self) {
      if (!tp.needs_grad(x)) return;
      tp.ensure_grad(x);
      const Tensor<S>& g = tp.grad(self);
      S* px = tp.grad(x).ptr();
      for (int bc = 0; bc < B * C; ++bc) {
        const S* q = g.ptr() + static_cast<std::int64_t>(bc) * 4 * H * W_;
        S* p = px + static_cast<std::int64_t>(bc) * H * W_;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W_; ++j)
            p[i * W_ + j] += q[(2 * i) * 2 * W_ + 2 * j] +
                             q[(2 * i) * 2 * W_ + 2 * j + 1] +
                             q[(2 * i + 1) * 2 * W_ + 2 * j] +
                             q[(2 * i + 1) * 2 * W_ + 2 * j + 1];
      }
    });
  }

  // ---- attention ----------------------------------------------------------

  /// Scaled dot-product attention over tokens; q,k,v are [B,T,C], heads | C.
  Var sdpa(Var q, Var k, Var v, int heads) {
    const Tensor<S>& qv = val(q);
    int B = qv.dim(0), T = qv.dim(1), C = qv.dim(2);
    if (C % heads != 0) throw std::invalid_argument("sdpa: C % heads != 0");
    int dh = C / heads;
    S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
    Tensor<S> out({B, T, C});
    Tensor<S> attn({B, heads, T, T});
    const Tensor<S>& kv = val(k);
    const Tensor<S>& vv = val(v);
    using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < heads; ++h) {
        // head slice: rows T, cols dh, row stride C
        Eigen::Map<const Mat, 0, StrideT> Q(
            qv.ptr() + (static_cast<std::int64_t>(b) * T) * C + h * dh, T, dh,
            StrideT(C, 1));
        Eigen::Map<const Mat, 0, StrideT> K(
            kv.ptr() + (static_cast<std::int64_t>(b) * T) * C + h * dh, T, dh,
            StrideT(C, 1));
        Eigen::Map<const Mat, 0, StrideT> V(
            vv.ptr() + (static_cast<std::int64_t>(b) * T) * C + h * dh, T, dh,
            StrideT(C, 1));
        MapM A(attn.ptr() + (static_cast<std::int64_t>(b) * heads + h) * T * T,
               T, T);
        A.noalias() = Q * K.transpose() * inv_sqrt;
        // row softmax
        for (int i = 0; i < T; ++i) {
          S m = A.row(i).maxCoeff();
          A.row(i) = (A.row(i).array() - m).exp();
          A.row(i) /= A.row(i).sum();
        }
        Eigen::Map<Mat, 0, StrideT> O(
            out.ptr() + (static_cast<std::int64_t>(b) * T) * C + h * dh, T, dh,
            StrideT(C, 1));
        O.noalias() = A * V;
      }
    return make(
        std::move(out), {q, k, v},
        [q, k, v, B, T, C, heads, dh, inv_sqrt,
         attn = std::move(attn)](Tape& tp, int self) {
          using StrideT2 = Eigen::Stride<Eigen::Dynamic, 1>;
          const Tensor<S>& g = tp.grad(self);
          bool gq = tp.needs_grad(q), gk = tp.needs_grad(k),
               gv2 = tp.needs_grad(v);
          if (gq) tp.ensure_grad(q);
          if (gk) tp.ensure_grad(k);
          if (gv2) tp.ensure_grad(v);
          for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h) {
              std::int64_t base = (static_cast<std::int64_t>(b) * T) * C + h * dh;
              Eigen::Map<const Mat, 0, StrideT2> GO(g.ptr() + base, T, dh,
                                                    StrideT2(C, 1));
              CMapM A(attn.ptr() +
                          (static_cast<std::int64_t>(b) * heads + h) * T * T,
                      T, T);
              Eigen::Map<const Mat, 0, StrideT2> V(tp.val(v).ptr() + base, T,
                                                   dh, StrideT2(C, 1));
              if (gv2) {
                Eigen::Map<Mat, 0, StrideT2> GV(tp.grad(v).ptr() + base, T, dh,
                                                StrideT2(C, 1));
                GV.noalias() += A.transpose() * GO;
              }
              if (gq || gk) {
                Mat dA = GO * V.transpose();  // [T,T]
                // softmax backward, rowwise
                for (int i = 0; i < T; ++i) {
                  S dot = (dA.row(i).array() * A.row(i).array()).sum();
                  dA.row(i) =
                      A.row(i).array() * (dA.row(i).array() - dot) * inv_sqrt;
                }
                Eigen::Map<const Mat, 0, StrideT2> Q(tp.val(q).ptr() + base, T,
                                                     dh, StrideT2(C, 1));
                Eigen::Map<const Mat, 0, StrideT2> K(tp.val(k).ptr() + base, T,
                                                     dh, StrideT2(C, 1));
                if (gq) {
                  Eigen::Map<Mat, 0, StrideT2> GQ(tp.grad(q).ptr() + base, T,
                                                  dh, StrideT2(C, 1));
                  GQ.noalias() += dA * K;
                }
                if (gk) {
                  Eigen::Map<Mat, 0, StrideT2> GK(tp.grad(k).ptr() + base, T,
                                                  dh, StrideT2(C, 1));
                  GK.noalias() += dA.transpose() * Q;
                }
              }
            }
        });
  }

  // ---- reductions & losses ------------------------------------------------

  Var sum_all(Var a) {
    S acc = 0;
    for (S v : val(a).data) acc += v;
    return make(Tensor<S>::scalar(acc), {a}, [a](Tape& tp, int self) {
      if (!tp.needs_grad(a)) return;
      tp.ensure_grad(a);
      S g = tp.grad(self)[0];
      for (auto& v : tp.grad(a).data) v += g;
    });
  }

  /// mean of squared entries
  Var mean_sq(Var a) {
    const Tensor<S>& av = val(a);
    S acc = 0;
    for (S v : av.data) acc += v * v;
    S n = static_cast<S>(av.numel());
    return make(Tensor<S>::scalar(acc / n), {a}, [a, n](Tape& tp, int self) {
      if (!tp.needs_grad(a)) return;
      tp.ensure_grad(a);
      S g = tp.grad(self)[0];
      const Tensor<S>& x = tp.val(a);
      S* pa = tp.grad(a).ptr();
      for (std::int64_t i = 0; i < x.numel(); ++i)
        pa[i] += g * S(2) * x[i] / n;
    });
  }

  /// Euclidean norm over the last dimension: [B,N,d] -> [B,N].
  Var l2norm_lastdim(Var x) {
    const Tensor<S>& xv = val(x);
    int d = xv.dim(xv.ndim() - 1);
    std::int64_t R = xv.numel() / d;
    std::vector<int> shp(xv.shape.begin(), xv.shape.end() - 1);
    Tensor<S> out(shp);
    for (std::int64_t r = 0; r < R; ++r) {
      S acc = 0;
      for (int i = 0; i < d; ++i) {
        S v = xv[r * d + i];
        acc += v * v;
      }
      out[r] = std::sqrt(acc);
    }
    return make(std::move(out), {x}, [x, d, R](Tape& tp, int self) {
      if (!tp.needs_grad(x)) return;
      tp.ensure_grad(x);
      const Tensor<S>& g = tp.grad(self);
      const Tensor<S>& y = tp.val(self);
      const Tensor<S>& xv2 = tp.val(x);
      S* px = tp.grad(x).ptr();
      for (std::int64_t r = 0; r < R; ++r) {
        if (y[r] <= S(0)) continue;  // subgradient 0 at the origin
        S c = g[r] / y[r];
        for (int i = 0; i < d; ++i) px[r * d + i] += c * xv2[r * d + i];
      }
    });
  }

  /// Mean softmax cross-entropy of logits [B,N] against integer targets.
  Var cross_entropy(Var logits, std::vector<int> targets) {
    const Tensor<S>& lv = val(logits);
    int B = lv.dim(0), N = lv.dim(1);
    if (static_cast<int>(targets.size()) != B)
      throw std::invalid_argument("cross_entropy: target length != batch");
    Tensor<S> probs({B, N});
    S loss = 0;
    for (int b = 0; b < B; ++b) {
      const S* p = lv.ptr() + static_cast<std::int64_t>(b) * N;
      S m = p[0];
      for (int i = 1; i < N; ++i) m = std::max(m, p[i]);
      S z = 0;
      for (int i = 0; i < N; ++i) {
        probs[b * N + i] = std::exp(p[i] - m);
        z += probs[b * N + i];
      }
      for (int i = 0; i < N; ++i) probs[b * N + i] /= z;
      loss -= std::log(probs[b * N + targets[b]]);
    }
    loss /= static_cast<S>(B);
    return make(Tensor<S>::scalar(loss), {logits},
                [logits, targets = std::move(targets), B, N,
                 probs = std::move(probs)](Tape& tp, int self) {
                  if (!tp.needs_grad(logits)) return;
                  tp.ensure_grad(logits);
                  S g = tp.grad(self)[0] / static_cast<S>(B);
                  S* pl = tp.grad(logits).ptr();
                  for (int b = 0; b < B; ++b)
                    for (int i = 0; i < N; ++i)
                      pl[b * N + i] +=
                          g * (probs[b * N + i] - (i == targets[b] ? S(1) : S(0)));
                });
  }

  // ---- gathers ------------------------------------------------------------

  /// z [B,N,d], fixed slot c -> [B,d]
  Var select_slot(Var z, int c) {
    const Tensor<S>& zv = val(z);
    int B = zv.dim(0), N = zv.dim(1), d = zv.dim(2);
    if (c < 0 || c >= N) throw std::invalid_argument("select_slot: bad index");
    Tensor<S> out({B, d});
    for (int b = 0; b < B; ++b)
      std::copy_n(zv.ptr() + (static_cast<std::int64_t>(b) * N + c) * d, d,
                  out.ptr() + static_cast<std::int64_t>(b) * d);
    return make(std::move(out), {z}, [z, c, B = B, N = N, d = d](Tape& tp, int self) {
      if (!tp.needs_grad(z)) return;
      tp.ensure_grad(z);
      const Tensor<S>& g = tp.grad(self);
      S* pz = tp.grad(z).ptr();
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < d; ++i)
          pz[(static_cast<std::int64_t>(b) * N + c) * d + i] +=
              g[static_cast<std::int64_t>(b) * d + i];
    });
  }

  /// z [B,N,d], per-item slot idx[b] -> [B,d]
  Var gather_slots(Var z, std::vector<int> idx) {
    const Tensor<S>& zv = val(z);
    int B = zv.dim(0), N = zv.dim(1), d = zv.dim(2);
    Tensor<S> out({B, d});
    for (int b = 0; b < B; ++b)
      std::copy_n(zv.ptr() + (static_cast<std::int64_t>(b) * N + idx[b]) * d, d,
                  out.ptr() + static_cast<std::int64_t>(b) * d);
    return make(std::move(out), {z},
                [z, idx = std::move(idx), B, N, d](Tape& tp, int self) {
                  if (!tp.needs_grad(z)) return;
                  tp.ensure_grad(z);
                  const Tensor<S>& g = tp.grad(self);
                  S* pz = tp.grad(z).ptr();
                  for (int b = 0; b < B; ++b)
                    for (int i = 0; i < d; ++i)
                      pz[(static_cast<std::int64_t>(b) * N + idx[b]) * d + i] +=
                          g[static_cast<std::int64_t>(b) * d + i];
                });
  }

  /// M [N,dp], per-item row idx[b] -> [B,dp]
  Var gather_rows(Var m, std::vector<int> idx) {
    const Tensor<S>& mv = val(m);
    int N = mv.dim(0), dp = mv.dim(1);
    int B = static_cast<int>(idx.size());
    Tensor<S> out({B, dp});
    for (int b = 0; b < B; ++b)
      std::copy_n(mv.ptr() + static_cast<std::int64_t>(idx[b]) * dp, dp,
                  out.ptr() + static_cast<std::int64_t>(b) * dp);
    return make(std::move(out), {m},
                [m, idx = std::move(idx), N, dp, B](Tape& tp, int self) {
                  if (!tp.needs_grad(m)) return;
                  tp.ensure_grad(m);
                  const Tensor<S>& g = tp.grad(self);
                  S* pm = tp.grad(m).ptr();
                  for (int b = 0; b < B; ++b)
                    for (int i = 0; i < dp; ++i)
                      pm[static_cast<std::int64_t>(idx[b]) * dp + i] +=
                          g[static_cast<std::int64_t>(b) * dp + i];
                });
  }

  // ---- QR orthogonalization ----------------------------------------------

  /// Rows of A [N,dp] (N <= dp) -> orthonormal rows Q via economy QR of Aᵀ
  /// with the positive-diagonal sign convention. Gradients flow back to A.
  Var qr_orthonormal_rows(Var a) {
    const Tensor<S>& av = val(a);
    int N = av.dim(0), dp = av.dim(1);
    if (N > dp) throw std::invalid_argument("qr: need N <= dp");
    // X = Aᵀ, dp x N (column-major friendly via transpose of row-major map)
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> X(dp, N);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < dp; ++j) X(j, i) = av[i * dp + j];
    Eigen::HouseholderQR<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>> qr(X);
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> Qfull =
        qr.householderQ() * Eigen::Matrix<S, Eigen::Dynamic,
                                          Eigen::Dynamic>::Identity(dp, N);
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> R =
        qr.matrixQR().topLeftCorner(N, N).template triangularView<Eigen::Upper>();
    // sign fix: positive diagonal of R
    S maxdiag = S(0);
    for (int i = 0; i < N; ++i) maxdiag = std::max(maxdiag, std::abs(R(i, i)));
    S rank_tol = std::numeric_limits<S>::epsilon() * S(100) * maxdiag;
    for (int i = 0; i < N; ++i) {
      S di = R(i, i);
      if (std::abs(di) <= rank_tol)
        throw std::runtime_error(
            "qr_orthonormal_rows: rank-deficient embedding matrix");
      if (di < S(0)) {
        R.row(i) = -R.row(i);
        Qfull.col(i) = -Qfull.col(i);
      }
    }
    Tensor<S> out({N, dp});
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < dp; ++j) out[i * dp + j] = Qfull(j, i);
    // keep Q (dp x N) and R (N x N) for the backward pass
    std::vector<S> Qbuf(Qfull.data(), Qfull.data() + dp * N);
    std::vector<S> Rbuf(R.data(), R.data() + N * N);
    return make(
        std::move(out), {a},
        [a, N, dp, Qbuf = std::move(Qbuf), Rbuf = std::move(Rbuf)](Tape& tp,
                                                                  int self) {
          if (!tp.needs_grad(a)) return;
          tp.ensure_grad(a);
          using ColM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
          Eigen::Map<const ColM> Q(Qbuf.data(), dp, N);
          Eigen::Map<const ColM> R(Rbuf.data(), N, N);
          // grad wrt Q (dp x N): transpose the incoming row grads
          const Tensor<S>& g = tp.grad(self);
          ColM Qbar(dp, N);
          for (int i = 0; i < N; ++i)
            for (int j = 0; j < dp; ++j) Qbar(j, i) = g[i * dp + j];
          // Rbar = 0:  M = -QbarᵀQ ;  Xbar = [Qbar + Q copyltu(M)] R^{-T}
          ColM M = -(Qbar.transpose() * Q);
          ColM L = ColM::Zero(N, N);
          for (int i = 0; i < N; ++i)
            for (int j = 0; j <= i; ++j) {
              L(i, j) = M(i, j);
              if (j < i) L(j, i) = M(i, j);
            }
          ColM Xbar = Qbar + Q * L;
          // want Y = Xbar R^{-T}; solve R Z = Xbarᵀ (upper-triangular), Y = Zᵀ
          ColM Rm = R;
          ColM Z = Rm.template triangularView<Eigen::Upper>().solve(
              ColM(Xbar.transpose()));
          ColM Y = Z.transpose();
          S* pa = tp.grad(a).ptr();
          for (int i = 0; i < N; ++i)
            for (int j = 0; j < dp; ++j) pa[i * dp + j] += Y(j, i);
        });
  }

 private:
  Var make(Tensor<S> out, std::initializer_list<Var> parents,
           std::function<void(Tape&, int)> back) {
    Node n;
    n.val = std::move(out);
    for (Var p : parents)
      if (p >= 0 && nodes[p].needs_grad) n.needs_grad = true;
    if (n.needs_grad) n.back = std::move(back);
    nodes.push_back(std::move(n));
    return static_cast<Var>(nodes.size() - 1);
  }

  void accum(Var v, const Tensor<S>& g) {
    if (!needs_grad(v)) return;
    ensure_grad(v);
    S* p = grad(v).ptr();
    for (std::int64_t i = 0; i < g.numel(); ++i) p[i] += g[i];
  }
  void accum_neg(Var v, const Tensor<S>& g) {
    if (!needs_grad(v)) return;
    ensure_grad(v);
    S* p = grad(v).ptr();
    for (std::int64_t i = 0; i < g.numel(); ++i) p[i] -= g[i];
  }

  static void im2col(const S* x, int C, int H, int W, int k, int stride,
                     int pad, S* cols) {
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    int HW = Ho * Wo;
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx, ++r) {
          S* dst = cols + r * HW;
          const S* src = x + static_cast<std::int64_t>(c) * H * W;
          for (int oy = 0; oy < Ho; ++oy) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) {
              for (int ox = 0; ox < Wo; ++ox) dst[oy * Wo + ox] = S(0);
              continue;
            }
            for (int ox = 0; ox < Wo; ++ox) {
              int ix = ox * stride - pad + kx;
              dst[oy * Wo + ox] =
                  (ix >= 0 && ix < W) ? src[iy * W + ix] : S(0);
            }
          }
        }
  }

  static void col2im_add(const S* cols, int C, int H, int W, int k, int stride,
                         int pad, S* x) {
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    int HW = Ho * Wo;
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx, ++r) {
          const S* src = cols + r * HW;
          S* dst = x + static_cast<std::int64_t>(c) * H * W;
          for (int oy = 0; oy < Ho; ++oy) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int ox = 0; ox < Wo; ++ox) {
              int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) dst[iy * W + ix] += src[oy * Wo + ox];
            }
          }
        }
  }
};

}  // namespace disdiff
