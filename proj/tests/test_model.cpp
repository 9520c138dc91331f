// Score composition, Tweedie denoising, conditioning blocks and the
// orthonormal embedding bank.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "disdiff/model.hpp"
#include "disdiff/training.hpp"

using namespace disdiff;

namespace {

UNetConfig tiny_unet() {
  UNetConfig c;
  c.base_channels = 8;
  c.channel_mults = {1, 2};
  c.num_res_blocks = 1;
  c.attn_resolutions = {8};
  c.num_heads = 2;
  c.dropout = 0.0;
  c.time_embed_dim = 16;
  return c;
}

DisDiffConfig tiny_cfg() {
  DisDiffConfig c;
  c.n_factors = 2;
  c.z_dim = 4;
  c.pos_embed_dim = 8;
  return c;
}

// Freshly initialized decoders end in zero convolutions, so their output (and
// anything conditioned through them) is identically zero. Tests that need a
// responsive field decoder kick those parameters off zero first.
void wake_zero_params(UNet<double>& net, Rng& rng) {
  ParamList<double> ps;
  net.params(ps);
  for (auto* p : ps) {
    bool all_zero = true;
    for (double v : p->value.data) all_zero = all_zero && v == 0.0;
    if (all_zero)
      p->value = rng.normal_tensor<double>(p->value.shape, 0.05);
  }
}

}  // namespace

TEST_CASE("compose_eps: empty subset is the identity") {
  auto s = NoiseSchedule::linear(100);
  Rng rng(1);
  auto eps = rng.normal_tensor<double>({2, 3, 4, 4});
  auto out = compose_eps<double>(eps, {}, {10, 20}, s);
  for (std::int64_t i = 0; i < eps.numel(); ++i) CHECK(out[i] == eps[i]);

  Tape<double> tape;
  auto v = tape.constant(eps);
  auto w = compose_eps(tape, v, {}, {10, 20}, s);
  CHECK(w == v);
}

TEST_CASE("compose_eps: single-field coefficient and subset additivity") {
  auto s = NoiseSchedule::linear(100);
  Rng rng(2);
  auto eps = rng.normal_tensor<double>({2, 1, 3, 3});
  auto f1 = rng.normal_tensor<double>({2, 1, 3, 3});
  auto f2 = rng.normal_tensor<double>({2, 1, 3, 3});
  std::vector<int> t{15, 80};
  std::int64_t stride = eps.numel() / 2;

  auto one = compose_eps<double>(eps, {f1}, t, s);
  for (int b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < stride; ++i)
      CHECK(one[b * stride + i] ==
            doctest::Approx(eps[b * stride + i] -
                            s.sqrt_1mab(t[b]) * f1[b * stride + i])
                .epsilon(1e-12));

  // composing {f1,f2} at once == composing f1 then f2 (disjoint additivity)
  auto both = compose_eps<double>(eps, {f1, f2}, t, s);
  auto chained = compose_eps<double>(one, {f2}, t, s);
  for (std::int64_t i = 0; i < eps.numel(); ++i)
    CHECK(both[i] == doctest::Approx(chained[i]).epsilon(1e-12));

  // tape version matches the tensor version
  Tape<double> tape;
  auto tv = tape.val(compose_eps(tape, tape.constant(eps),
                                 {tape.constant(f1), tape.constant(f2)}, t, s));
  for (std::int64_t i = 0; i < eps.numel(); ++i)
    CHECK(tv[i] == doctest::Approx(both[i]).epsilon(1e-12));
}

TEST_CASE("tweedie_x0 inverts q_sample exactly given the true noise") {
  auto s = NoiseSchedule::linear(1000);
  Rng rng(3);
  auto x0 = rng.normal_tensor<double>({3, 2, 4, 4});
  auto eps = rng.normal_tensor<double>({3, 2, 4, 4});
  for (int t : {1, 500, 1000}) {
    auto xt = q_sample(x0, t, eps, s);
    auto rec = tweedie_x0<double>(xt, eps, std::vector<int>(3, t), s);
    for (std::int64_t i = 0; i < x0.numel(); ++i) {
      double rel = std::abs(rec[i] - x0[i]) / std::max(1.0, std::abs(x0[i]));
      CHECK(rel <= 1e-6);
    }
  }
  // tape version agrees with the tensor version
  std::vector<int> t{7, 300, 999};
  auto xt = q_sample(x0, t, eps, s);
  Tape<double> tape;
  auto tv = tape.val(
      tweedie_x0(tape, tape.constant(xt), tape.constant(eps), t, s));
  auto ref = tweedie_x0<double>(xt, eps, t, s);
  for (std::int64_t i = 0; i < x0.numel(); ++i)
    CHECK(tv[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("tweedie of a zero-eps prediction rescales x_t") {
  auto s = NoiseSchedule::linear(100);
  Rng rng(4);
  auto xt = rng.normal_tensor<double>({1, 1, 2, 2});
  auto zero = Tensor<double>::zeros({1, 1, 2, 2});
  auto out = tweedie_x0<double>(xt, zero, {42}, s);
  for (std::int64_t i = 0; i < xt.numel(); ++i)
    CHECK(out[i] == doctest::Approx(xt[i] / s.sqrt_ab(42)).epsilon(1e-12));
}

TEST_CASE("adagn: unit projections reduce to plain group norm") {
  Tape<double> tape;
  Rng rng(5);
  int B = 2, C = 8;
  auto h = tape.constant(rng.normal_tensor<double>({B, C, 4, 4}));
  auto ones = tape.constant(Tensor<double>::full({B, C}, 1.0));
  auto zeros = tape.constant(Tensor<double>::zeros({B, C}));
  auto out = adagn(tape, h, ones, zeros, ones, zeros, 4);
  auto ref = tape.group_norm(h, 4);
  const auto& ov = tape.val(out);
  const auto& rv = tape.val(ref);
  for (std::int64_t i = 0; i < ov.numel(); ++i)
    CHECK(ov[i] == doctest::Approx(rv[i]).epsilon(1e-12));
}

TEST_CASE("adagn: zero z-scale collapses to the z-shift") {
  Tape<double> tape;
  Rng rng(6);
  int B = 1, C = 4;
  auto h = tape.constant(rng.normal_tensor<double>({B, C, 3, 3}));
  auto ts = tape.constant(rng.normal_tensor<double>({B, C}));
  auto tb = tape.constant(rng.normal_tensor<double>({B, C}));
  auto zs = tape.constant(Tensor<double>::zeros({B, C}));
  Tensor<double> zb_t = rng.normal_tensor<double>({B, C});
  auto out = tape.val(adagn(tape, h, ts, tb, zs, tape.constant(zb_t), 2));
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < 9; ++i)
      CHECK(out[c * 9 + i] == doctest::Approx(zb_t[c]).epsilon(1e-12));
}

TEST_CASE("qr bank: orthonormal rows, sign convention, rank errors") {
  Rng rng(7);
  Tape<double> tape;
  int N = 3, dp = 16;
  auto a = tape.leaf(rng.normal_tensor<double>({N, dp}), true);
  auto q = tape.qr_orthonormal_rows(a);
  const auto& qv = tape.val(q);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      double dot = 0;
      for (int k = 0; k < dp; ++k) dot += qv[i * dp + k] * qv[j * dp + k];
      CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-10));
    }
  // row i of Q spans the same flag as rows 0..i of A; first row is A_0 / |A_0|
  const auto& av = tape.val(a);
  double n0 = 0;
  for (int k = 0; k < dp; ++k) n0 += av[k] * av[k];
  n0 = std::sqrt(n0);
  for (int k = 0; k < dp; ++k)
    CHECK(qv[k] == doctest::Approx(av[k] / n0).epsilon(1e-10));
  // gradient reaches A (random linear functional of Q)
  auto w = tape.constant(rng.normal_tensor<double>({N, dp}));
  tape.backward(tape.sum_all(tape.mul(q, w)));
  REQUIRE(tape.grad(a).numel() == N * dp);
  bool any = false;
  for (double g : tape.grad(a).data) any = any || g != 0.0;
  CHECK(any);

  Tape<double> t2;
  Tensor<double> rank1({2, 4}, {1, 2, 3, 4, 2, 4, 6, 8});
  auto bad = t2.constant(rank1);
  CHECK_THROWS_WITH_AS(t2.qr_orthonormal_rows(bad),
                       doctest::Contains("rank-deficient"), std::runtime_error);
}

TEST_CASE("model init: shapes, determinism and config validation") {
  Rng r1(11), r2(11);
  DisDiffModel<double> m1, m2;
  m1.init(tiny_unet(), tiny_cfg(), 16, r1);
  m2.init(tiny_unet(), tiny_cfg(), 16, r2);
  auto p1 = m1.all_params(), p2 = m2.all_params();
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i]->name == p2[i]->name);
    REQUIRE(p1[i]->value.numel() == p2[i]->value.numel());
    for (std::int64_t j = 0; j < p1[i]->value.numel(); ++j)
      CHECK(p1[i]->value[j] == p2[i]->value[j]);
  }
  // disjoint param partitions
  CHECK(m1.dpm_params().size() + m1.disdiff_params().size() == p1.size());

  DisDiffModel<double> bad;
  DisDiffConfig c = tiny_cfg();
  c.n_factors = 9;  // > pos_embed_dim
  c.pos_embed_dim = 4;
  Rng r3(1);
  CHECK_THROWS_AS(bad.init(tiny_unet(), c, 16, r3), std::invalid_argument);
}

TEST_CASE("encoder contract: shape, determinism, finiteness, resolution") {
  Rng rng(13);
  DisDiffModel<double> m;
  m.init(tiny_unet(), tiny_cfg(), 16, rng);
  Rng data(1);
  auto x = data.uniform_tensor<double>({2, 3, 16, 16}, 0.0, 1.0);
  auto z1 = m.encode(x);
  auto z2 = m.encode(x);
  CHECK(z1.shape == std::vector<int>({2, 2, 4}));
  CHECK(z1.all_finite());
  for (std::int64_t i = 0; i < z1.numel(); ++i) CHECK(z1[i] == z2[i]);
  auto wrong = data.uniform_tensor<double>({1, 3, 8, 8}, 0.0, 1.0);
  CHECK_THROWS_AS(m.encode(wrong), std::invalid_argument);
}

TEST_CASE("eps model and field decoder: output shapes and c-sensitivity") {
  Rng rng(17);
  DisDiffModel<double> m;
  m.init(tiny_unet(), tiny_cfg(), 16, rng);
  wake_zero_params(m.field_model, rng);
  Rng data(2);
  auto xt = data.normal_tensor<double>({2, 3, 16, 16});
  std::vector<int> t{5, 900};
  auto s = NoiseSchedule::linear(1000);
  auto eps = m.predict_eps(xt, t);
  CHECK(eps.shape == xt.shape);
  CHECK(eps.all_finite());

  auto x0 = data.uniform_tensor<double>({2, 3, 16, 16}, 0.0, 1.0);
  auto z = m.encode(x0);
  auto f0 = m.predict_fields(xt, t, z, {0});
  auto f1 = m.predict_fields(xt, t, z, {1});
  REQUIRE(f0.size() == 1);
  CHECK(f0[0].shape == xt.shape);
  CHECK(f0[0].all_finite());
  // the two factor channels must not be pointwise identical
  double diff = 0;
  for (std::int64_t i = 0; i < f0[0].numel(); ++i)
    diff += std::abs(f0[0][i] - f1[0][i]);
  CHECK(diff > 0.0);

  // zero field => conditioned Tweedie equals unconditional Tweedie
  auto xh_uncond = m.conditioned_denoise(xt, t, z, {}, s);
  auto ref = tweedie_x0<double>(xt, eps, t, s);
  for (std::int64_t i = 0; i < ref.numel(); ++i)
    CHECK(xh_uncond[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  // clamp flag bounds the output
  m.cfg.clamp_denoised = true;
  auto xh_cl = m.conditioned_denoise(xt, t, z, {0, 1}, s);
  for (std::int64_t i = 0; i < xh_cl.numel(); ++i) {
    CHECK(xh_cl[i] <= 1.0);
    CHECK(xh_cl[i] >= -1.0);
  }
}

TEST_CASE("conditional_eps_fn matches manual compose") {
  Rng rng(19);
  DisDiffModel<double> m;
  m.init(tiny_unet(), tiny_cfg(), 16, rng);
  wake_zero_params(m.field_model, rng);
  auto s = NoiseSchedule::linear(100);
  Rng data(3);
  auto xt = data.normal_tensor<double>({1, 3, 16, 16});
  auto x0 = data.uniform_tensor<double>({1, 3, 16, 16}, 0.0, 1.0);
  auto z = m.encode(x0);
  std::vector<int> t{40};
  auto fn = m.conditional_eps_fn(z, {0, 1}, &s);
  auto got = fn(xt, t);
  auto ref = compose_eps<double>(m.predict_eps(xt, t),
                                 m.predict_fields(xt, t, z, {0, 1}), t, s);
  for (std::int64_t i = 0; i < got.numel(); ++i)
    CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  // field_shift_fn sums the same fields
  auto sh = m.field_shift_fn(z, {0, 1})(xt, t);
  auto fs = m.predict_fields(xt, t, z, {0, 1});
  for (std::int64_t i = 0; i < sh.numel(); ++i)
    CHECK(sh[i] == doctest::Approx(fs[0][i] + fs[1][i]).epsilon(1e-12));
}
