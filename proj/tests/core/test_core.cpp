#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "ibq/diag/grad_cases.hpp"
#include "ibq/core/gemm.hpp"
#include "ibq/core/nn_ops.hpp"
#include "ibq/core/ops.hpp"
#include "ibq/core/optim.hpp"

using namespace ibq;
using ibq::diag::rand64;

namespace {

Tensor t64(Shape s, std::initializer_list<double> v) { return Tensor::from_values(s, v, DType::f64); }

void expect_values(const Tensor& t, std::initializer_list<double> v, double tol = 0.0) {
  ASSERT_EQ(static_cast<std::size_t>(t.numel()), v.size());
  std::size_t i = 0;
  for (double e : v) EXPECT_NEAR(t.value(static_cast<std::int64_t>(i++)), e, tol);
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
  Tensor t = Tensor::zeros({2, 3});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.dim(-1), 3);
  EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError);
  EXPECT_THROW(Tensor::from_vector({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST(Gemm, MatchesNaiveProductAllTransposes) {
  Rng rng(5);
  for (auto ta : {gemm::Trans::no, gemm::Trans::yes}) {
    for (auto tb : {gemm::Trans::no, gemm::Trans::yes}) {
      const int m = 37, n = 53, k = 301;
      std::vector<double> a(m * k), b(k * n), c(m * n, 0.5);
      for (auto& v : a) v = rng.uniform(-1, 1);
      for (auto& v : b) v = rng.uniform(-1, 1);
      const int lda = ta == gemm::Trans::no ? k : m;
      const int ldb = tb == gemm::Trans::no ? n : k;
      gemm::gemm<double>(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c.data(), n, true);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          double ref = 0.5;
          for (int p = 0; p < k; ++p) {
            const double av = ta == gemm::Trans::no ? a[i * k + p] : a[p * m + i];
            const double bv = tb == gemm::Trans::no ? b[p * n + j] : b[j * k + p];
            ref += av * bv;
          }
          ASSERT_NEAR(c[i * n + j], ref, 1e-11);
        }
      }
    }
  }
}

TEST(Matmul, IdentityAndOrthogonal) {
  Tensor i2 = t64({2, 2}, {1, 0, 0, 1});
  Tensor b = t64({2, 2}, {1, 2, 3, 4});
  expect_values(ops::matmul(i2, b), {1, 2, 3, 4});
  expect_values(ops::matmul(t64({1, 2}, {1, 0}), t64({2, 1}, {0, 1})), {0});
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("(2, 3)"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("(4, 2)"), std::string::npos) << e.what();
  }
}

TEST(Matmul, FiniteDifferenceRandom) {
  Rng rng(11);
  Tensor a = rand64(rng, {3, 4});
  Tensor b = rand64(rng, {4, 2});
  auto fa = [&](const Tensor& v) { return ops::sum(ops::square(ops::matmul(v, b))); };
  auto fb = [&](const Tensor& v) { return ops::sum(ops::square(ops::matmul(a, v))); };
  EXPECT_LT(grad_check(fa, a, 1e-4, 1e-6).max_rel_error, 1e-6);
  EXPECT_LT(grad_check(fb, b, 1e-4, 1e-6).max_rel_error, 1e-6);
}

TEST(Softmax, SymmetryShiftAndDirectFormula) {
  expect_values(ops::softmax(t64({1, 2}, {0, 0})), {0.5, 0.5});
  Rng rng(3);
  Tensor x = rand64(rng, {1, 5}, -3, 3);
  Tensor p = ops::softmax(x);
  Tensor q = ops::softmax(ops::add_scalar(x, 17.25));
  double z = 0;
  for (double v : x.data<double>()) z += std::exp(v);
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(p.value(i), q.value(i), 1e-7);
    EXPECT_NEAR(p.value(i), std::exp(x.value(i)) / z, 1e-12);
  }
}

TEST(Softmax, RowsNormalized) {
  Rng rng(4);
  Tensor p = ops::softmax(ops::scale(rng_uniform(rng, {50, 33}, -1, 1), 20.0));
  for (int r = 0; r < 50; ++r) {
    double s = 0;
    for (int k = 0; k < 33; ++k) {
      const double v = p.value(r * 33 + k);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Argmax, ExamplesAndScanOracle) {
  auto r = ops::argmax_onehot(Tensor::from_values({1, 3}, {0.1, 0.7, 0.2}));
  EXPECT_EQ(r.indices[0], 1);
  expect_values(r.onehot, {0, 1, 0});
  EXPECT_EQ(ops::argmax_onehot(Tensor::from_values({1, 2}, {0.5, 0.5})).indices[0], 0);
  Rng rng(9);
  Tensor p = rng_uniform(rng, {40, 7});
  auto a = ops::argmax_onehot(p);
  for (int i = 0; i < 40; ++i) {
    int best = 0;
    for (int k = 1; k < 7; ++k) {
      if (p.value(i * 7 + k) > p.value(i * 7 + best)) best = k;
    }
    EXPECT_EQ(a.indices[i], best);
    for (int k = 0; k < 7; ++k) EXPECT_EQ(a.onehot.value(i * 7 + k), k == best ? 1.0 : 0.0);
  }
}

TEST(Detach, ForwardIdentityAndGradientBlock) {
  Rng rng(1);
  Tensor x = rand64(rng, {3, 3}).set_requires_grad();
  Tensor d = ops::detach(x);
  EXPECT_EQ(std::memcmp(d.data<double>().data(), x.data<double>().data(), 9 * sizeof(double)), 0);
  Tensor y = rand64(rng, {3, 3});
  backward(ops::add(ops::sum(d), ops::sum(ops::add(x, ops::detach(ops::mul(y, x))))));
  for (double g : x.grad().to_vector()) EXPECT_EQ(g, 1.0);
}

TEST(Elementwise, SpecExamplesAndDomain) {
  expect_values(ops::mean(t64({3}, {1, 2, 3})), {2});
  Tensor x = t64({3}, {0.5, -1.5, 2.0}).set_requires_grad();
  backward(ops::sum(ops::square(x)));
  expect_values(x.grad(), {1.0, -3.0, 4.0});
  EXPECT_THROW(ops::log(t64({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(ops::log(t64({1}, {-2.0})), DomainError);
  EXPECT_THROW(ops::sqrt(t64({1}, {-1.0})), DomainError);
}

TEST(Elementwise, NonFiniteIsSurfaced) {
  EXPECT_THROW(ops::exp(t64({1}, {1000.0})), NumericError);
}

TEST(Backward, LinearAndAccumulation) {
  Tensor w = t64({3}, {0.3, -0.2, 0.9}).set_requires_grad();
  Tensor x = t64({3}, {1.5, 2.5, -4.0});
  backward(ops::sum(ops::mul(w, x)));
  expect_values(w.grad(), {1.5, 2.5, -4.0});

  Tensor v = t64({4}, {1, 2, 3, 4}).set_requires_grad();
  backward(ops::add(ops::sum(v), ops::sum(v)));
  expect_values(v.grad(), {2, 2, 2, 2});
}

TEST(Backward, NUsesAccumulateN) {
  for (int n = 1; n <= 5; ++n) {
    Tensor v = t64({2}, {0.1, 0.2}).set_requires_grad();
    Tensor acc = ops::sum(v);
    for (int i = 1; i < n; ++i) acc = ops::add(acc, ops::sum(v));
    backward(acc);
    expect_values(v.grad(), {double(n), double(n)});
  }
}

TEST(Backward, UnreachableLeafZeroAndNonScalarRejected) {
  Tensor a = t64({2}, {1, 2}).set_requires_grad();
  Tensor b = t64({2}, {1, 2}).set_requires_grad();
  backward(ops::sum(a));
  expect_values(b.grad(), {0, 0});
  EXPECT_EQ(active_tape().size(), 0u);
  EXPECT_THROW(backward(ops::square(a)), ContractError);
  active_tape().clear();
}

TEST(Backward, ThreeLayerMlpFiniteDifference) {
  Rng rng(21);
  std::vector<Tensor> params = {rand64(rng, {5, 6}), rand64(rng, {6}), rand64(rng, {6, 4}),
                                rand64(rng, {4}), rand64(rng, {4, 3}), rand64(rng, {3})};
  Tensor x = rand64(rng, {7, 5});
  IndexVec y = {0, 2, 1, 1, 0, 2, 2};
  auto loss = [&](const std::vector<Tensor>& p) {
    Tensor h = ops::tanh(nn::linear(x, p[0], p[1]));
    h = ops::silu(nn::linear(h, p[2], p[3]));
    return ops::cross_entropy(nn::linear(h, p[4], p[5]), y);
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto f = [&, i](const Tensor& v) {
      auto p = params;
      p[i] = v;
      return loss(p);
    };
    auto rep = grad_check(f, params[i], 1e-4, 1e-4);
    EXPECT_TRUE(rep.passed) << "param " << i << " " << rep.summary();
  }
}

TEST(GradCheck, AnalyticSquare) {
  Tensor x = t64({2}, {1, 2});
  auto rep = grad_check([](const Tensor& v) { return ops::sum(ops::square(v)); }, x, 1e-4, 1e-8);
  EXPECT_TRUE(rep.passed) << rep.summary();
  EXPECT_LT(rep.max_abs_error, 1e-8);
}

TEST(GradCheck, SoftmaxMatmulChain) {
  Rng rng(8);
  Tensor w = rand64(rng, {4, 6});
  Tensor c = rand64(rng, {3, 6});
  auto f = [&](const Tensor& v) { return ibq::diag::weighted_sum(ops::softmax(ops::matmul(v, w)), c); };
  EXPECT_TRUE(grad_check(f, rand64(rng, {3, 4}), 1e-4, 1e-5).passed);
}

TEST(GradCheck, DetectsWrongAdjoint) {
  // The same function without replay disagrees: detach is a real constant only
  // when frozen, so an unfrozen finite difference sees its dependence on x.
  Rng rng(2);
  Tensor x = rand64(rng, {4});
  auto f = [](const Tensor& v) { return ops::sum(ops::mul(v, ops::detach(v))); };
  EXPECT_TRUE(grad_check(f, x).passed);
  Tensor xr = x.clone().set_requires_grad();
  backward(f(xr));
  const auto g = xr.grad().to_vector();
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], x.value(i), 1e-15);
}

class CoreGradCases : public ::testing::TestWithParam<ibq::diag::GradCase> {};

TEST_P(CoreGradCases, TenRandomInstances) {
  auto r = ibq::diag::run_case(GetParam(), 10, 77);
  EXPECT_TRUE(r.passed) << r.name << " worst rel " << r.worst_rel;
}

INSTANTIATE_TEST_SUITE_P(Ops, CoreGradCases, ::testing::ValuesIn(ibq::diag::core_grad_cases()),
                         [](const auto& info) {
                           std::string n = info.param.name;
                           for (char& ch : n) {
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           }
                           return n;
                         });

TEST(Adam, ZeroGradientLeavesParams) {
  Tensor p = t64({3}, {1, 2, 3});
  std::vector<Tensor> ps = {p};
  auto st = OptimState::create(ps, AdamHyper{});
  p.mutable_grad<double>();
  adam_step(ps, st, 1e-3);
  expect_values(p, {1, 2, 3});
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepReferenceFormula) {
  Tensor p = t64({2}, {0.5, -0.5});
  std::vector<Tensor> ps = {p};
  AdamHyper h;
  auto st = OptimState::create(ps, h);
  for (double& g : p.mutable_grad<double>()) g = 1.0;
  adam_step(ps, st, 1e-3);
  // m̂ = 1, v̂ = 1 after bias correction.
  const double delta = -1e-3 * 1.0 / (1.0 + h.eps);
  EXPECT_NEAR(p.value(0) - 0.5, delta, 1e-15);
  EXPECT_NEAR(p.value(1) + 0.5, delta, 1e-15);
  EXPECT_NEAR(p.value(0) - 0.5, -1e-3, 1e-10);
}

TEST(Adam, MultiStepMatchesReference) {
  std::vector<double> grads = {0.3, -1.2, 2.0, 0.01, -0.5};
  Tensor p = t64({1, 1}, {0.8});
  std::vector<Tensor> ps = {p};
  AdamHyper h;
  h.weight_decay = 0.05;
  h.beta1 = 0.9;
  h.beta2 = 0.95;
  auto st = OptimState::create(ps, h);
  double w = 0.8, m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    p.mutable_grad<double>()[0] = grads[t - 1];
    adam_step(ps, st, 2e-2);
    m = 0.9 * m + 0.1 * grads[t - 1];
    v = 0.95 * v + 0.05 * grads[t - 1] * grads[t - 1];
    w *= 1 - 2e-2 * 0.05;
    w -= 2e-2 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.95, t))) + 1e-8);
    EXPECT_NEAR(p.value(0), w, 1e-14);
  }
  EXPECT_EQ(st.step, 5);
}

TEST(Adam, ZeroBetasReduceToSignLikeUpdate) {
  Tensor p = t64({4}, {0, 0, 0, 0});
  std::vector<Tensor> ps = {p};
  AdamHyper h;
  h.beta1 = 0;
  h.beta2 = 0;
  h.eps = 1e-3;
  auto st = OptimState::create(ps, h);
  const double g[] = {2.0, -0.5, 1e-4, 0.0};
  for (int i = 0; i < 4; ++i) p.mutable_grad<double>()[i] = g[i];
  adam_step(ps, st, 0.1);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(p.value(i), -0.1 * g[i] / (std::fabs(g[i]) + 1e-3), 1e-15);
}

TEST(Adam, ClippingScalesBeforeMoments) {
  Tensor a = t64({2}, {0, 0});
  Tensor b = t64({1}, {0});
  std::vector<Tensor> ps = {a, b};
  AdamHyper h;
  h.clip_norm = 1.0;
  auto st = OptimState::create(ps, h);
  a.mutable_grad<double>()[0] = 6.0;
  a.mutable_grad<double>()[1] = 0.0;
  b.mutable_grad<double>()[0] = 8.0;
  auto rep = adam_step(ps, st, 1e-3);
  EXPECT_DOUBLE_EQ(rep.grad_norm, 10.0);
  EXPECT_DOUBLE_EQ(rep.clip_scale, 0.1);
  EXPECT_NEAR(st.m[0].value(0), (1 - h.beta1) * 0.6, 1e-15);
  EXPECT_NEAR(st.m[1].value(0), (1 - h.beta1) * 0.8, 1e-15);
}

TEST(Adam, WeightDecayOnlyOnMatrices) {
  Tensor mat = t64({1, 2}, {1, 1});
  Tensor vec = t64({2}, {1, 1});
  std::vector<Tensor> ps = {mat, vec};
  AdamHyper h;
  h.weight_decay = 0.5;
  auto st = OptimState::create(ps, h);
  mat.mutable_grad<double>();
  vec.mutable_grad<double>();
  adam_step(ps, st, 0.1);
  expect_values(mat, {0.95, 0.95}, 1e-15);
  expect_values(vec, {1, 1});
}

TEST(Adam, NanGradientAbortsWithoutSideEffects) {
  Tensor p = t64({2}, {1, 2});
  std::vector<Tensor> ps = {p};
  auto st = OptimState::create(ps, AdamHyper{});
  p.mutable_grad<double>()[1] = std::nan("");
  EXPECT_THROW(adam_step(ps, st, 1e-3), NumericError);
  expect_values(p, {1, 2});
  EXPECT_EQ(st.step, 0);
  EXPECT_THROW(adam_step(ps, st, 0.0), DomainError);
}

TEST(Rng, DeterministicStreams) {
  Rng a(42), b(42);
  Tensor x = rng_normal(a, {1000}, 0, 1, DType::f64);
  Tensor y = rng_normal(b, {1000}, 0, 1, DType::f64);
  EXPECT_EQ(std::memcmp(x.data<double>().data(), y.data<double>().data(), 8000), 0);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng(42).fork(1).next_u64(), Rng(42).fork(2).next_u64());
}

TEST(Rng, SplitMix64ReferenceValues) {
  // First outputs of the public SplitMix64 reference for seed 1234567.
  Rng r(1234567);
  EXPECT_EQ(r.next_u64(), 6457827717110365317ull);
  EXPECT_EQ(r.next_u64(), 3203168211198807973ull);
  EXPECT_EQ(r.next_u64(), 9817491932198370423ull);
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(2024);
  Tensor u = rng_uniform(rng, {100000}, 0, 1, DType::f64);
  Tensor n = rng_normal(rng, {100000}, 0, 1, DType::f64);
  double su = 0, sn = 0, sn2 = 0;
  for (double v : u.data<double>()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LT(v, 1.0);
    su += v;
  }
  for (double v : n.data<double>()) {
    sn += v;
    sn2 += v * v;
  }
  const double mu = su / 1e5, mn = sn / 1e5;
  EXPECT_NEAR(mu, 0.5, 0.01);
  EXPECT_NEAR(sn2 / 1e5 - mn * mn, 1.0, 0.03);
}

TEST(Rng, BelowIsInRange) {
  Rng rng(5);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) counts[rng.below(7)]++;
  for (int c : counts) EXPECT_GT(c, 800);
}

TEST(NnOps, RmsNormExamples) {
  Tensor ones = t64({1, 4}, {1, 1, 1, 1});
  Tensor gain = Tensor::full({4}, 1.0, DType::f64);
  expect_values(nn::rmsnorm(ones, gain), {1, 1, 1, 1}, 1e-6);
  Rng rng(6);
  Tensor x = rand64(rng, {1, 6});
  Tensor g = rand64(rng, {6});
  Tensor a = nn::rmsnorm(x, g);
  Tensor b = nn::rmsnorm(ops::scale(x, 3.7), g);
  double ms = 0;
  for (double v : x.data<double>()) ms += v * v;
  const double inv = 1.0 / std::sqrt(ms / 6 + 1e-6);
  for (int i = 0; i < 6; ++i) {
    EXPECT_NEAR(a.value(i), b.value(i), 1e-5);
    EXPECT_NEAR(a.value(i), x.value(i) * inv * g.value(i), 1e-14);
  }
}

TEST(NnOps, RopeProperties) {
  Rng rng(12);
  Tensor x = rand64(rng, {1, 1, 8});
  expect_values(nn::rope(x, 2, {0}), {x.value(0), x.value(1), x.value(2), x.value(3), x.value(4),
                                      x.value(5), x.value(6), x.value(7)});
  Tensor r = nn::rope(x, 2, {13});
  for (int i = 0; i < 8; i += 2) {
    EXPECT_NEAR(std::hypot(r.value(i), r.value(i + 1)), std::hypot(x.value(i), x.value(i + 1)), 1e-6);
  }
  EXPECT_THROW(nn::rope(Tensor::zeros({1, 2, 6}), 2), ConfigError);
  Tensor q = rand64(rng, {1, 1, 8});
  Tensor k = rand64(rng, {1, 1, 8});
  auto dot = [](const Tensor& a, const Tensor& b) {
    double s = 0;
    for (int i = 0; i < a.numel(); ++i) s += a.value(i) * b.value(i);
    return s;
  };
  const double ref = dot(nn::rope(q, 1, {5}), nn::rope(k, 1, {2}));
  for (std::int64_t m : {3, 10, 40}) {
    EXPECT_NEAR(dot(nn::rope(q, 1, {m}), nn::rope(k, 1, {m - 3})), ref, 1e-12);
  }
}

TEST(NnOps, CausalAttentionIgnoresFuture) {
  Rng rng(13);
  Tensor q = rand64(rng, {1, 5, 4}), k = rand64(rng, {1, 5, 4}), v = rand64(rng, {1, 5, 4});
  Tensor base = nn::causal_attention(q, k, v, 2);
  Tensor k2 = k.clone(), v2 = v.clone();
  for (int c = 0; c < 4; ++c) {
    k2.mutable_data<double>()[3 * 4 + c] += 1.0;
    v2.mutable_data<double>()[3 * 4 + c] -= 2.0;
  }
  Tensor pert = nn::causal_attention(q, k2, v2, 2);
  for (int t = 0; t < 5; ++t) {
    for (int c = 0; c < 4; ++c) {
      const double d = std::fabs(base.value(t * 4 + c) - pert.value(t * 4 + c));
      if (t < 3) EXPECT_EQ(d, 0.0);
      else EXPECT_GT(d, 0.0);
    }
  }
}

TEST(NnOps, ConvMatchesDirectLoop) {
  Rng rng(14);
  Tensor x = rand64(rng, {2, 3, 6, 5}), w = rand64(rng, {4, 3, 3, 3}), b = rand64(rng, {4});
  Tensor y = nn::conv2d(x, w, b, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 3, 3}));
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int oy = 0; oy < 3; ++oy)
        for (int ox = 0; ox < 3; ++ox) {
          double s = b.value(o);
          for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 3; ++i)
              for (int j = 0; j < 3; ++j) {
                const int iy = oy * 2 - 1 + i, ix = ox * 2 - 1 + j;
                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 5) continue;
                s += w.value(((o * 3 + c) * 3 + i) * 3 + j) * x.value(((n * 3 + c) * 6 + iy) * 5 + ix);
              }
          EXPECT_NEAR(y.value(((n * 4 + o) * 3 + oy) * 3 + ox), s, 1e-13);
        }
}

TEST(NnOps, F32PathAgreesWithF64) {
  Rng rng(15);
  Tensor x = rand64(rng, {2, 4, 4, 4}), w = rand64(rng, {8, 4, 3, 3});
  Tensor y64 = nn::conv2d(x, w, Tensor{}, 1, 1);
  Tensor y32 = nn::conv2d(x.to(DType::f32), w.to(DType::f32), Tensor{}, 1, 1);
  for (int i = 0; i < y64.numel(); ++i) EXPECT_NEAR(y32.value(i), y64.value(i), 1e-5);
}
