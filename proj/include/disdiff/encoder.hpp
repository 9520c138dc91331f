#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "disdiff/nn.hpp"

namespace disdiff {

/// Factor encoder: a plain conv stack (7x7 stem + stride-2 4x4 convs down to
/// a 4x4 map) followed by three FC layers emitting N factor vectors of
/// dimension d. The stride-2 depth adapts to the input resolution so the
/// flattened feature stays 256*4*4.
template <typename S>
struct Encoder {
  using Var = typename Tape<S>::Var;
  int image_size = 32;
  int n_factors = 3;
  int z_dim = 32;
  Conv<S> stem;
  std::vector<Conv<S>> convs;
  Dense<S> fc1, fc2, fc3;

  void init(const std::string& name, int image_size_, int n_factors_,
            int z_dim_, Rng& rng) {
    image_size = image_size_;
    n_factors = n_factors_;
    z_dim = z_dim_;
    if (image_size % 4 != 0 || image_size < 16)
      throw std::invalid_argument("encoder: image size must be >=16, mult of 4");
    stem.init(name + ".stem", 3, 64, 7, 1, 3, rng);
    int ch = 64, res = image_size, i = 0;
    const int widths[] = {128, 256, 256, 256};
    while (res > 4) {
      Conv<S> c;
      int out = widths[std::min(i, 3)];
      c.init(name + ".conv" + std::to_string(i), ch, out, 4, 2, 1, rng);
      convs.push_back(std::move(c));
      ch = out;
      res /= 2;
      ++i;
    }
    int flat = ch * 4 * 4;
    fc1.init(name + ".fc1", flat, 256, rng);
    fc2.init(name + ".fc2", 256, 256, rng);
    fc3.init(name + ".fc3", 256, n_factors * z_dim, rng);
  }

  void params(ParamList<S>& out) {
    stem.params(out);
    for (auto& c : convs) c.params(out);
    fc1.params(out);
    fc2.params(out);
    fc3.params(out);
  }

  /// x: [B,3,H,W] in [0,1] scale. Returns [B,N,d].
  Var forward(GraphCtx<S>& ctx, Var x) {
    auto& tp = ctx.tape;
    const auto& xv = tp.val(x);
    if (xv.dim(2) != image_size || xv.dim(3) != image_size)
      throw std::invalid_argument("encoder: unexpected input resolution " +
                                  std::to_string(xv.dim(2)) + "x" +
                                  std::to_string(xv.dim(3)));
    int B = xv.dim(0);
    Var h = tp.relu(stem(ctx, x));
    for (auto& c : convs) h = tp.relu(c(ctx, h));
    int flat = static_cast<int>(tp.val(h).numel() / B);
    h = tp.reshape(h, {B, flat});
    h = tp.relu(fc1(ctx, h));
    h = tp.relu(fc2(ctx, h));
    h = fc3(ctx, h);
    return tp.reshape(h, {B, n_factors, z_dim});
  }
};

}  // namespace disdiff
