// Gradient checks for every tape op against central finite differences.
// All checks run in double so the FD tolerance can be tight.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "disdiff/random.hpp"
#include "disdiff/tape.hpp"

using disdiff::Rng;
using disdiff::Tensor;
using Tape = disdiff::Tape<double>;
using Var = Tape::Var;

namespace {

// Builds the graph twice per probe coordinate and compares the analytic
// gradient of a scalar output with a central difference.
void check_grad(const std::vector<Tensor<double>>& inputs,
                const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                double tol = 1e-6, double h = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  Var loss = build(tape, vars);
  tape.backward(loss);

  Rng pick(1234);
  for (size_t vi = 0; vi < inputs.size(); ++vi) {
    // probe a handful of coordinates per input
    std::int64_t n = inputs[vi].numel();
    int probes = static_cast<int>(std::min<std::int64_t>(n, 6));
    for (int p = 0; p < probes; ++p) {
      std::int64_t ci = pick.uniform_int(n);
      auto eval = [&](double delta) {
        Tape t2;
        std::vector<Var> vs;
        for (size_t k = 0; k < inputs.size(); ++k) {
          Tensor<double> tk = inputs[k];
          if (k == vi) tk[ci] += delta;
          vs.push_back(t2.leaf(tk, false));
        }
        return t2.val(build(t2, vs))[0];
      };
      double fd = (eval(h) - eval(-h)) / (2 * h);
      double an = tape.grad(vars[vi]).numel() ? tape.grad(vars[vi])[ci] : 0.0;
      double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
      CHECK(std::abs(fd - an) / denom < tol);
    }
  }
}

}  // namespace

TEST_CASE("pointwise ops match finite differences") {
  Rng rng(7);
  auto a = rng.normal_tensor<double>({3, 5});
  auto b = rng.normal_tensor<double>({3, 5});

  check_grad({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.add(v[0], v[1]));
  });
  check_grad({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.sub(v[0], v[1]));
  });
  check_grad({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.sum_all(t.mul(v[0], v[1]));
  });
  check_grad({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.silu(v[0]));
  });
  check_grad({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.relu(v[0]));
  }, 1e-5);
  check_grad({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.sum_all(t.scale(v[0], -2.5));
  });
  check_grad({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.row_scale(v[0], {0.5, -1.5, 2.0}));
  });
}

TEST_CASE("linear matches finite differences") {
  Rng rng(8);
  auto x = rng.normal_tensor<double>({4, 6});
  auto w = rng.normal_tensor<double>({6, 3});
  auto b = rng.normal_tensor<double>({3});
  check_grad({x, w, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.linear(v[0], v[1], v[2]));
  });
  // 3-D input (token layout)
  auto x3 = rng.normal_tensor<double>({2, 5, 6});
  check_grad({x3, w, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.linear(v[0], v[1], v[2]));
  });
}

TEST_CASE("conv2d matches finite differences") {
  Rng rng(9);
  auto x = rng.normal_tensor<double>({2, 3, 6, 6});
  auto w = rng.normal_tensor<double>({4, 3, 3, 3});
  auto b = rng.normal_tensor<double>({4});
  check_grad({x, w, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.conv2d(v[0], v[1], v[2], 1, 1));
  });
  // stride 2
  check_grad({x, w, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.conv2d(v[0], v[1], v[2], 2, 1));
  });
  // 1x1 kernel
  auto w1 = rng.normal_tensor<double>({5, 3, 1, 1});
  auto b1 = rng.normal_tensor<double>({5});
  check_grad({x, w1, b1}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.conv2d(v[0], v[1], v[2], 1, 0));
  });
}

TEST_CASE("group_norm matches finite differences") {
  Rng rng(10);
  auto x = rng.normal_tensor<double>({2, 4, 3, 3});
  check_grad({x}, [](Tape& t, const std::vector<Var>& v) {
    auto y = t.group_norm(v[0], 2);
    // asymmetric weighting so the test sees more than the scale-invariance
    auto w = t.mul(y, y);
    return t.mean_sq(t.add(y, w));
  }, 1e-4);
}

TEST_CASE("group_norm normalizes per group") {
  Rng rng(11);
  auto x = rng.normal_tensor<double>({1, 4, 4, 4});
  Tape t;
  auto y = t.group_norm(t.leaf(x, false), 2);
  const auto& yv = t.val(y);
  // each group of 2*16 entries has mean ~0, var ~1
  for (int g = 0; g < 2; ++g) {
    double m = 0, v = 0;
    for (int i = 0; i < 32; ++i) m += yv[g * 32 + i];
    m /= 32;
    for (int i = 0; i < 32; ++i) v += (yv[g * 32 + i] - m) * (yv[g * 32 + i] - m);
    v /= 32;
    CHECK(std::abs(m) < 1e-10);
    CHECK(std::abs(v - 1.0) < 1e-3);
  }
}

TEST_CASE("channel_affine matches finite differences") {
  Rng rng(12);
  auto h = rng.normal_tensor<double>({2, 3, 4, 4});
  auto s = rng.normal_tensor<double>({2, 3});
  auto b = rng.normal_tensor<double>({2, 3});
  check_grad({h, s, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.channel_affine(v[0], v[1], v[2]));
  });
}

TEST_CASE("layout ops round-trip and backprop") {
  Rng rng(13);
  auto x = rng.normal_tensor<double>({2, 3, 2, 2});
  {
    Tape t;
    auto v = t.leaf(x, false);
    auto back = t.from_tokens(t.to_tokens(v), 2, 2);
    for (std::int64_t i = 0; i < x.numel(); ++i)
      CHECK(t.val(back)[i] == x[i]);
  }
  check_grad({x}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.to_tokens(v[0]));
  });
  check_grad({x}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.upsample2x(v[0]));
  });
  auto a = rng.normal_tensor<double>({2, 2, 3, 3});
  auto b = rng.normal_tensor<double>({2, 4, 3, 3});
  check_grad({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.concat_ch(v[0], v[1]));
  });
  auto p = rng.normal_tensor<double>({3, 4});
  auto q = rng.normal_tensor<double>({3, 2});
  check_grad({p, q}, [](Tape& t, const std::vector<Var>& v) {
    auto cat = t.concat_lastdim(v[0], v[1]);
    auto left = t.slice_lastdim(cat, 1, 3);
    return t.mean_sq(left);
  });
}

TEST_CASE("sdpa matches finite differences") {
  Rng rng(14);
  auto q = rng.normal_tensor<double>({2, 4, 6});
  auto k = rng.normal_tensor<double>({2, 4, 6});
  auto v = rng.normal_tensor<double>({2, 4, 6});
  check_grad({q, k, v}, [](Tape& t, const std::vector<Var>& vars) {
    return t.mean_sq(t.sdpa(vars[0], vars[1], vars[2], 2));
  }, 1e-4);
}

TEST_CASE("reductions and losses match finite differences") {
  Rng rng(15);
  auto x = rng.normal_tensor<double>({3, 2, 4});
  check_grad({x}, [](Tape& t, const std::vector<Var>& v) {
    return t.sum_all(t.l2norm_lastdim(v[0]));
  });
  auto logits = rng.normal_tensor<double>({4, 3});
  check_grad({logits}, [](Tape& t, const std::vector<Var>& v) {
    return t.cross_entropy(v[0], {0, 2, 1, 1});
  });
}

TEST_CASE("cross_entropy is shift invariant and equals ln N on uniform logits") {
  Tape t;
  auto z = t.leaf(Tensor<double>::zeros({2, 3}), false);
  CHECK(t.val(t.cross_entropy(z, {0, 2}))[0] == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  Rng rng(16);
  auto l = rng.normal_tensor<double>({2, 3});
  auto ls = l;
  for (auto& v : ls.data) v += 17.5;
  Tape t2;
  double a = t2.val(t2.cross_entropy(t2.leaf(l, false), {1, 0}))[0];
  double b = t2.val(t2.cross_entropy(t2.leaf(ls, false), {1, 0}))[0];
  CHECK(a == doctest::Approx(b).epsilon(1e-9));
}

TEST_CASE("gather ops route gradients to the right slots") {
  Rng rng(17);
  auto z = rng.normal_tensor<double>({3, 4, 5});
  check_grad({z}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.select_slot(v[0], 2));
  });
  check_grad({z}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.gather_slots(v[0], {1, 0, 3}));
  });
  auto m = rng.normal_tensor<double>({4, 6});
  check_grad({m}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean_sq(t.gather_rows(v[0], {0, 3, 3}));
  });
}

TEST_CASE("qr_orthonormal_rows produces orthonormal rows, deterministic sign") {
  Rng rng(18);
  auto a = rng.normal_tensor<double>({3, 8});
  Tape t;
  auto q = t.qr_orthonormal_rows(t.leaf(a, false));
  const auto& qv = t.val(q);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double dot = 0;
      for (int k = 0; k < 8; ++k) dot += qv[i * 8 + k] * qv[j * 8 + k];
      CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-10);
    }
  // determinism: two evaluations agree bit-wise
  Tape t2;
  auto q2 = t2.qr_orthonormal_rows(t2.leaf(a, false));
  for (std::int64_t i = 0; i < qv.numel(); ++i)
    CHECK(qv[i] == t2.val(q2)[i]);
  // fixed point: orthonormal input comes back unchanged (positive-diag sign)
  Tape t3;
  auto q3 = t3.qr_orthonormal_rows(t3.leaf(t.val(q), false));
  for (std::int64_t i = 0; i < qv.numel(); ++i)
    CHECK(t3.val(q3)[i] == doctest::Approx(qv[i]).epsilon(1e-10));
}

TEST_CASE("qr backward matches finite differences") {
  Rng rng(19);
  auto a = rng.normal_tensor<double>({3, 6});
  auto probe = rng.normal_tensor<double>({3, 6});
  check_grad({a}, [probe](Tape& t, const std::vector<Var>& v) {
    auto q = t.qr_orthonormal_rows(v[0]);
    return t.sum_all(t.mul(q, t.leaf(probe, false)));
  }, 1e-5);
}

TEST_CASE("frozen leaves receive no gradient and skip backward work") {
  Rng rng(20);
  auto x = rng.normal_tensor<double>({2, 3});
  auto y = rng.normal_tensor<double>({2, 3});
  Tape t;
  auto vx = t.leaf(x, true);
  auto vy = t.leaf(y, false);
  auto loss = t.mean_sq(t.mul(vx, vy));
  t.backward(loss);
  CHECK(t.grad(vx).numel() == x.numel());
  CHECK(t.grad(vy).numel() == 0);
  // detach cuts the graph
  Tape t2;
  auto v2 = t2.leaf(x, true);
  auto loss2 = t2.mean_sq(t2.detach(t2.scale(v2, 3.0)));
  t2.backward(loss2);
  CHECK(t2.grad(v2).numel() == 0);
}
