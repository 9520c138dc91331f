#pragma once

#include <memory>
#include <string>
#include <vector>

#include "disdiff/nn.hpp"

namespace disdiff {

struct UNetConfig {
  int in_channels = 3;
  int base_channels = 32;
  std::vector<int> channel_mults{1, 2, 2};
  int num_res_blocks = 1;
  std::vector<int> attn_resolutions{8};
  int num_heads = 4;
  double dropout = 0.1;
  int time_embed_dim = 64;
  // conditioning (gradient-field decoder only)
  bool conditional = false;
  int z_dim = 32;
  int pos_embed_dim = 64;
};

namespace detail {
inline bool contains(const std::vector<int>& v, int x) {
  for (int e : v)
    if (e == x) return true;
  return false;
}
}  // namespace detail

/// AdaGN: z_s (t_s GN(h) + t_b) + z_b. The (scale, shift) pairs come split
/// as [B,C] vars; groups picks the GN grouping.
template <typename S>
typename Tape<S>::Var adagn(Tape<S>& tape, typename Tape<S>::Var h,
                            typename Tape<S>::Var t_s, typename Tape<S>::Var t_b,
                            typename Tape<S>::Var z_s, typename Tape<S>::Var z_b,
                            int groups) {
  auto hn = tape.group_norm(h, groups);
  return tape.channel_affine(tape.channel_affine(hn, t_s, t_b), z_s, z_b);
}

/// Residual block. The unconditional form applies a time scale/shift after
/// the second group norm; the conditional form applies the double scale/shift
/// AdaGN: z_s(t_s GN(h) + t_b) + z_b with t_s,t_b from [temb, p^c] and
/// z_s,z_b from z^c.
template <typename S>
struct ResBlock {
  using Var = typename Tape<S>::Var;
  int in_ch = 0, out_ch = 0;
  bool conditional = false;
  double dropout_p = 0.0;
  GroupNorm<S> gn1;
  Conv<S> conv1, conv2;
  Dense<S> t_proj;          // -> [B, 2*out_ch]
  Dense<S> z_proj;          // conditional only
  std::unique_ptr<Conv<S>> skip;

  void init(const std::string& name, int in, int out, const UNetConfig& cfg,
            Rng& rng) {
    in_ch = in;
    out_ch = out;
    conditional = cfg.conditional;
    dropout_p = cfg.dropout;
    gn1.init(name + ".gn1", in, pick_groups(in));
    conv1.init(name + ".conv1", in, out, 3, 1, 1, rng);
    conv2.init(name + ".conv2", out, out, 3, 1, 1, rng, /*zero=*/true);
    int t_in = conditional ? cfg.time_embed_dim + cfg.pos_embed_dim
                           : cfg.time_embed_dim;
    t_proj.init(name + ".t_proj", t_in, 2 * out, rng);
    // scale half starts at 1 so the block begins near identity
    for (int i = 0; i < out; ++i) t_proj.b.value[i] = S(1);
    if (conditional) {
      z_proj.init(name + ".z_proj", cfg.z_dim, 2 * out, rng);
      for (int i = 0; i < out; ++i) z_proj.b.value[i] = S(1);
    }
    if (in != out) {
      skip = std::make_unique<Conv<S>>();
      skip->init(name + ".skip", in, out, 1, 1, 0, rng);
    }
  }

  void params(ParamList<S>& out) {
    gn1.params(out);
    conv1.params(out);
    conv2.params(out);
    t_proj.params(out);
    if (conditional) z_proj.params(out);
    if (skip) skip->params(out);
  }

  Var operator()(GraphCtx<S>& ctx, Var x, Var temb, Var z, Var pemb) {
    auto& tp = ctx.tape;
    Var h = conv1(ctx, tp.silu(gn1(ctx, x)));
    Var tin = conditional ? tp.concat_lastdim(temb, pemb) : temb;
    Var tsb = t_proj(ctx, tp.silu(tin));
    Var ts = tp.slice_lastdim(tsb, 0, out_ch);
    Var tb = tp.slice_lastdim(tsb, out_ch, out_ch);
    if (conditional) {
      Var zsb = z_proj(ctx, z);
      Var zs = tp.slice_lastdim(zsb, 0, out_ch);
      Var zb = tp.slice_lastdim(zsb, out_ch, out_ch);
      h = adagn(tp, h, ts, tb, zs, zb, pick_groups(out_ch));
    } else {
      h = tp.channel_affine(tp.group_norm(h, pick_groups(out_ch)), ts, tb);
    }
    h = dropout(ctx, tp.silu(h), dropout_p);
    h = conv2(ctx, h);
    Var sk = skip ? (*skip)(ctx, x) : x;
    return tp.add(sk, h);
  }
};

template <typename S>
struct AttnBlock {
  using Var = typename Tape<S>::Var;
  int ch = 0, heads = 1;
  GroupNorm<S> gn;
  Dense<S> qkv, proj;

  void init(const std::string& name, int ch_, int heads_, Rng& rng) {
    ch = ch_;
    heads = heads_;
    gn.init(name + ".gn", ch, pick_groups(ch));
    qkv.init(name + ".qkv", ch, 3 * ch, rng);
    proj.init(name + ".proj", ch, ch, rng, /*scale=*/0.0);  // zero init
  }
  void params(ParamList<S>& out) {
    gn.params(out);
    qkv.params(out);
    proj.params(out);
  }
  Var operator()(GraphCtx<S>& ctx, Var x) {
    auto& tp = ctx.tape;
    int H = tp.val(x).dim(2), W = tp.val(x).dim(3);
    Var t = tp.to_tokens(gn(ctx, x));
    Var a = qkv(ctx, t);
    Var q = tp.slice_lastdim(a, 0, ch);
    Var k = tp.slice_lastdim(a, ch, ch);
    Var v = tp.slice_lastdim(a, 2 * ch, ch);
    Var o = proj(ctx, tp.sdpa(q, k, v, heads));
    return tp.add(x, tp.from_tokens(o, H, W));
  }
};

/// Small DDPM UNet. With cfg.conditional it becomes the gradient-field
/// decoder: same trunk, AdaGN conditioning in every residual block.
template <typename S>
struct UNet {
  using Var = typename Tape<S>::Var;
  UNetConfig cfg;
  int image_size = 32;
  Conv<S> conv_in;
  Dense<S> time1, time2;
  struct DownUnit {
    std::unique_ptr<ResBlock<S>> res;
    std::unique_ptr<AttnBlock<S>> attn;
    std::unique_ptr<Conv<S>> down;
    int out_ch = 0;
  };
  std::vector<DownUnit> downs;
  ResBlock<S> mid1, mid2;
  AttnBlock<S> mid_attn;
  struct UpUnit {
    ResBlock<S> res;
    std::unique_ptr<AttnBlock<S>> attn;
    std::unique_ptr<Conv<S>> up;
  };
  std::vector<UpUnit> ups;
  GroupNorm<S> out_gn;
  Conv<S> out_conv;

  void init(const std::string& name, const UNetConfig& cfg_, int image_size_,
            Rng& rng) {
    cfg = cfg_;
    image_size = image_size_;
    int base = cfg.base_channels;
    conv_in.init(name + ".in", cfg.in_channels, base, 3, 1, 1, rng);
    time1.init(name + ".time1", cfg.time_embed_dim, cfg.time_embed_dim, rng);
    time2.init(name + ".time2", cfg.time_embed_dim, cfg.time_embed_dim, rng);

    int levels = static_cast<int>(cfg.channel_mults.size());
    int ch = base, res = image_size;
    std::vector<int> skip_chs{ch};
    int u = 0;
    for (int lvl = 0; lvl < levels; ++lvl) {
      int out_ch = base * cfg.channel_mults[lvl];
      for (int j = 0; j < cfg.num_res_blocks; ++j) {
        DownUnit du;
        du.res = std::make_unique<ResBlock<S>>();
        du.res->init(name + ".down" + std::to_string(u), ch, out_ch, cfg, rng);
        ch = out_ch;
        if (detail::contains(cfg.attn_resolutions, res)) {
          du.attn = std::make_unique<AttnBlock<S>>();
          du.attn->init(name + ".down" + std::to_string(u) + ".attn", ch,
                        cfg.num_heads, rng);
        }
        du.out_ch = ch;
        downs.push_back(std::move(du));
        skip_chs.push_back(ch);
        ++u;
      }
      if (lvl != levels - 1) {
        DownUnit du;
        du.down = std::make_unique<Conv<S>>();
        du.down->init(name + ".downsample" + std::to_string(lvl), ch, ch, 3, 2,
                      1, rng);
        du.out_ch = ch;
        downs.push_back(std::move(du));
        skip_chs.push_back(ch);
        res /= 2;
        ++u;
      }
    }
    mid1.init(name + ".mid1", ch, ch, cfg, rng);
    mid_attn.init(name + ".mid_attn", ch, cfg.num_heads, rng);
    mid2.init(name + ".mid2", ch, ch, cfg, rng);

    u = 0;
    for (int lvl = levels - 1; lvl >= 0; --lvl) {
      int out_ch = base * cfg.channel_mults[lvl];
      for (int j = 0; j < cfg.num_res_blocks + 1; ++j) {
        UpUnit uu;
        int sk = skip_chs.back();
        skip_chs.pop_back();
        uu.res.init(name + ".up" + std::to_string(u), ch + sk, out_ch, cfg,
                    rng);
        ch = out_ch;
        if (detail::contains(cfg.attn_resolutions, res)) {
          uu.attn = std::make_unique<AttnBlock<S>>();
          uu.attn->init(name + ".up" + std::to_string(u) + ".attn", ch,
                        cfg.num_heads, rng);
        }
        if (lvl != 0 && j == cfg.num_res_blocks) {
          uu.up = std::make_unique<Conv<S>>();
          uu.up->init(name + ".upsample" + std::to_string(lvl), ch, ch, 3, 1,
                      1, rng);
          res *= 2;
        }
        ups.push_back(std::move(uu));
        ++u;
      }
    }
    out_gn.init(name + ".out_gn", ch, pick_groups(ch));
    out_conv.init(name + ".out", ch, cfg.in_channels, 3, 1, 1, rng,
                  /*zero=*/true);
  }

  void params(ParamList<S>& out) {
    conv_in.params(out);
    time1.params(out);
    time2.params(out);
    for (auto& d : downs) {
      if (d.res) d.res->params(out);
      if (d.attn) d.attn->params(out);
      if (d.down) d.down->params(out);
    }
    mid1.params(out);
    mid_attn.params(out);
    mid2.params(out);
    for (auto& uu : ups) {
      uu.res.params(out);
      if (uu.attn) uu.attn->params(out);
      if (uu.up) uu.up->params(out);
    }
    out_gn.params(out);
    out_conv.params(out);
  }

  /// x: [B,C,H,W]; t: per-item timesteps; z/pemb: conditioning vars
  /// ([B,z_dim] / [B,pos_embed_dim]) when cfg.conditional, ignored otherwise.
  Var forward(GraphCtx<S>& ctx, Var x, const std::vector<int>& t, Var z = -1,
              Var pemb = -1) {
    auto& tp = ctx.tape;
    Var temb = tp.constant(timestep_embedding<S>(t, cfg.time_embed_dim));
    temb = time2(ctx, tp.silu(time1(ctx, temb)));

    std::vector<Var> hs;
    Var h = conv_in(ctx, x);
    hs.push_back(h);
    for (auto& d : downs) {
      if (d.res) {
        h = (*d.res)(ctx, h, temb, z, pemb);
        if (d.attn) h = (*d.attn)(ctx, h);
      } else {
        h = (*d.down)(ctx, h);
      }
      hs.push_back(h);
    }
    h = mid1(ctx, h, temb, z, pemb);
    h = mid_attn(ctx, h);
    h = mid2(ctx, h, temb, z, pemb);
    for (auto& uu : ups) {
      h = tp.concat_ch(h, hs.back());
      hs.pop_back();
      h = uu.res(ctx, h, temb, z, pemb);
      if (uu.attn) h = (*uu.attn)(ctx, h);
      if (uu.up) h = (*uu.up)(ctx, tp.upsample2x(h));
    }
    return out_conv(ctx, tp.silu(out_gn(ctx, h)));
  }
};

}  // namespace disdiff
