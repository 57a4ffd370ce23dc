#include "ibq/diag/grad_cases.hpp"

#include <algorithm>

#include "ibq/core/nn_ops.hpp"
#include "ibq/core/ops.hpp"

namespace ibq::diag {

Tensor rand64(Rng& rng, Shape shape, double lo, double hi) {
  return rng_uniform(rng, std::move(shape), lo, hi, DType::f64);
}

Tensor signed_away_from_zero(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t = rand64(rng, shape, lo, hi);
  for (double& v : t.mutable_data<double>()) {
    if (rng.uniform() < 0.5) v = -v;
  }
  return t;
}

Tensor weighted_sum(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

namespace {

// Unary op applied to x, contracted with random weights.
GradCase unary_case(std::string name, Shape shape, std::function<Tensor(const Tensor&)> op,
                    double lo = -1.0, double hi = 1.0, bool avoid_zero = false) {
  return {std::move(name), [=](Rng& rng) -> Instance {
            Tensor x = avoid_zero ? signed_away_from_zero(rng, shape) : rand64(rng, shape, lo, hi);
            Tensor probe = op(x);
            Tensor w = rand64(rng, probe.shape());
            return {x, [op, w](const Tensor& v) { return weighted_sum(op(v), w); }};
          }};
}

// Scalar-valued op, no contraction needed.
GradCase reduction_case(std::string name, Shape shape, std::function<Tensor(const Tensor&)> op) {
  return {std::move(name), [=](Rng& rng) -> Instance { return {rand64(rng, shape), op}; }};
}

// Binary op; the gradient check varies argument `which` with the other fixed.
GradCase binary_case(std::string name, Shape sa, Shape sb, int which,
                     std::function<Tensor(const Tensor&, const Tensor&)> op) {
  return {std::move(name), [=](Rng& rng) -> Instance {
            Tensor a = rand64(rng, sa);
            Tensor b = rand64(rng, sb);
            Tensor w = rand64(rng, op(a, b).shape());
            if (which == 0) {
              return {a, [=](const Tensor& v) { return weighted_sum(op(v, b), w); }};
            }
            return {b, [=](const Tensor& v) { return weighted_sum(op(a, v), w); }};
          }};
}

GradCase ternary_case(std::string name, Shape s0, Shape s1, Shape s2, int which,
                      std::function<Tensor(const Tensor&, const Tensor&, const Tensor&)> op) {
  return {std::move(name), [=](Rng& rng) -> Instance {
            Tensor a = rand64(rng, s0);
            Tensor b = rand64(rng, s1);
            Tensor c = rand64(rng, s2);
            Tensor w = rand64(rng, op(a, b, c).shape());
            switch (which) {
              case 0:
                return {a, [=](const Tensor& v) { return weighted_sum(op(v, b, c), w); }};
              case 1:
                return {b, [=](const Tensor& v) { return weighted_sum(op(a, v, c), w); }};
              default:
                return {c, [=](const Tensor& v) { return weighted_sum(op(a, b, v), w); }};
            }
          }};
}

}  // namespace

std::vector<GradCase> core_grad_cases() {
  using namespace ops;
  std::vector<GradCase> cs;
  const char* args[] = {"a", "b", "c"};
  for (int i = 0; i < 2; ++i) {
    cs.push_back(binary_case(std::string("matmul/") + args[i], {3, 4}, {4, 2}, i,
                             [](auto& a, auto& b) { return matmul(a, b); }));
    cs.push_back(binary_case(std::string("matmul_nt/") + args[i], {3, 4}, {5, 4}, i,
                             [](auto& a, auto& b) { return matmul_nt(a, b); }));
    cs.push_back(binary_case(std::string("add/") + args[i], {3, 4}, {3, 4}, i,
                             [](auto& a, auto& b) { return add(a, b); }));
    cs.push_back(binary_case(std::string("sub/") + args[i], {3, 4}, {3, 4}, i,
                             [](auto& a, auto& b) { return sub(a, b); }));
    cs.push_back(binary_case(std::string("mul/") + args[i], {3, 4}, {3, 4}, i,
                             [](auto& a, auto& b) { return mul(a, b); }));
    cs.push_back(binary_case(std::string("add_bias/") + args[i], {2, 3, 4}, {4}, i,
                             [](auto& a, auto& b) { return add_bias(a, b); }));
    cs.push_back(binary_case(std::string("concat0/") + args[i], {2, 3}, {4, 3}, i,
                             [](auto& a, auto& b) { return concat(a, b, 0); }));
    cs.push_back(binary_case(std::string("concat1/") + args[i], {2, 3, 2}, {2, 1, 2}, i,
                             [](auto& a, auto& b) { return concat(a, b, 1); }));
  }
  cs.push_back(unary_case("transpose", {3, 5}, [](auto& x) { return transpose(x); }));
  cs.push_back(unary_case("scale", {3, 4}, [](auto& x) { return scale(x, -2.5); }));
  cs.push_back(unary_case("add_scalar", {3, 4}, [](auto& x) { return add_scalar(x, 0.7); }));
  cs.push_back(unary_case("square", {3, 4}, [](auto& x) { return square(x); }));
  cs.push_back(unary_case("exp", {3, 4}, [](auto& x) { return ops::exp(x); }));
  cs.push_back(unary_case("log", {3, 4}, [](auto& x) { return ops::log(x); }, 0.5, 2.0));
  cs.push_back(unary_case("relu", {3, 4}, [](auto& x) { return relu(x); }, 0, 0, true));
  cs.push_back(unary_case("abs", {3, 4}, [](auto& x) { return ops::abs(x); }, 0, 0, true));
  cs.push_back(unary_case("silu", {3, 4}, [](auto& x) { return silu(x); }, -3.0, 3.0));
  cs.push_back(unary_case("sqrt", {3, 4}, [](auto& x) { return ops::sqrt(x); }, 0.5, 2.0));
  cs.push_back(unary_case("tanh", {3, 4}, [](auto& x) { return ops::tanh(x); }, -2.0, 2.0));
  cs.push_back(reduction_case("sum", {3, 4}, [](auto& x) { return sum(square(x)); }));
  cs.push_back(reduction_case("mean", {3, 4}, [](auto& x) { return mean(square(x)); }));
  cs.push_back(unary_case("sum_last", {2, 3, 4}, [](auto& x) { return sum_last(x); }));
  cs.push_back(unary_case("softmax/last", {3, 5}, [](auto& x) { return softmax(scale(x, 3.0)); }));
  cs.push_back(unary_case("softmax/axis0", {4, 3}, [](auto& x) { return softmax(x, 0); }));
  cs.push_back(unary_case("softmax/3d-mid", {2, 4, 3}, [](auto& x) { return softmax(x, 1); }));
  cs.push_back(unary_case("reshape", {2, 6}, [](auto& x) { return reshape(x, {3, 4}); }));
  cs.push_back(unary_case("slice", {3, 5, 2}, [](auto& x) { return slice(x, 1, 1, 3); }));
  cs.push_back(unary_case("expand_rows", {2, 3}, [](auto& x) { return expand_rows(x, 4); }));
  cs.push_back(unary_case("gather_rows", {5, 3}, [](auto& x) {
    return gather_rows(x, {4, 0, 4, 2, 2, 2});
  }));
  cs.push_back(unary_case("dropout", {4, 5}, [](auto& x) {
    Rng r(1234);
    return dropout(x, 0.3, r);
  }));
  cs.push_back({"cross_entropy", [](Rng& rng) -> Instance {
                  Tensor x = rand64(rng, {6, 5}, -2.0, 2.0);
                  IndexVec t;
                  for (int i = 0; i < 6; ++i) t.push_back(static_cast<std::int64_t>(rng.below(5)));
                  return {x, [t](const Tensor& v) { return cross_entropy(v, t); }};
                }});
  cs.push_back({"detach/composite", [](Rng& rng) -> Instance {
                  Tensor x = rand64(rng, {3, 4});
                  Tensor y = rand64(rng, {3, 4});
                  return {x, [y](const Tensor& v) {
                            return sum(mul(add(v, detach(mul(y, v))), v));
                          }};
                }});
  cs.push_back({"straight_through", [](Rng& rng) -> Instance {
                  Tensor x = rand64(rng, {3, 4});
                  Tensor w = rand64(rng, {3, 4});
                  return {x, [w](const Tensor& v) {
                            return weighted_sum(straight_through(tanh(v), square(v)), w);
                          }};
                }});

  cs.push_back(ternary_case("linear/x", {2, 3, 4}, {4, 5}, {5}, 0,
                            [](auto& x, auto& w, auto& b) { return nn::linear(x, w, b); }));
  cs.push_back(ternary_case("linear/weight", {6, 4}, {4, 5}, {5}, 1,
                            [](auto& x, auto& w, auto& b) { return nn::linear(x, w, b); }));
  cs.push_back(ternary_case("linear/bias", {6, 4}, {4, 5}, {5}, 2,
                            [](auto& x, auto& w, auto& b) { return nn::linear(x, w, b); }));
  cs.push_back(binary_case("linear/nobias", {3, 4}, {4, 2}, 0,
                           [](auto& x, auto& w) { return nn::linear(x, w, Tensor{}); }));
  struct ConvVariant {
    const char* tag;
    int k, stride, pad;
  };
  for (ConvVariant cv : {ConvVariant{"3x3s1", 3, 1, 1}, ConvVariant{"3x3s2", 3, 2, 1},
                         ConvVariant{"4x4s2p1", 4, 2, 1}, ConvVariant{"1x1", 1, 1, 0}}) {
    for (int i = 0; i < 3; ++i) {
      const int k = cv.k, s = cv.stride, p = cv.pad;
      cs.push_back(ternary_case(std::string("conv2d_") + cv.tag + "/" + args[i], {2, 3, 5, 6},
                                {4, 3, k, k}, {4}, i, [=](auto& x, auto& w, auto& b) {
                                  return nn::conv2d(x, w, b, s, p);
                                }));
    }
  }
  for (int i = 0; i < 3; ++i) {
    cs.push_back(ternary_case(std::string("group_norm/") + args[i], {2, 6, 3, 3}, {6}, {6}, i,
                              [](auto& x, auto& g, auto& b) { return nn::group_norm(x, 3, g, b); }));
  }
  cs.push_back(unary_case("upsample_nearest2x", {2, 3, 2, 3},
                          [](auto& x) { return nn::upsample_nearest2x(x); }));
  cs.push_back(unary_case("to_rows", {2, 3, 2, 4}, [](auto& x) { return nn::to_rows(x); }));
  cs.push_back(unary_case("from_rows", {16, 3}, [](auto& x) { return nn::from_rows(x, 2, 2, 4); }));
  for (int i = 0; i < 2; ++i) {
    cs.push_back(binary_case(std::string("rmsnorm/") + args[i], {2, 3, 6}, {6}, i,
                             [](auto& x, auto& g) { return nn::rmsnorm(x, g); }));
  }
  cs.push_back(unary_case("rope", {2, 5, 8}, [](auto& x) { return nn::rope(x, 2); }));
  cs.push_back(unary_case("rope/positions", {1, 3, 4}, [](auto& x) {
    return nn::rope(x, 1, {7, 2, 11});
  }));
  for (int i = 0; i < 3; ++i) {
    cs.push_back(ternary_case(std::string("causal_attention/") + args[i], {2, 4, 8}, {2, 4, 8},
                              {2, 4, 8}, i, [](auto& q, auto& k, auto& v) {
                                return nn::causal_attention(q, k, v, 2);
                              }));
  }
  return cs;
}

CaseResult run_case(const GradCase& c, int instances, std::uint64_t seed, double eps,
                    double tol) {
  CaseResult r;
  r.name = c.name;
  Rng root(seed);
  for (int i = 0; i < instances; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    auto [x, f] = c.make(rng);
    GradCheckReport rep = grad_check(f, x, eps, tol);
    r.worst_rel = std::max(r.worst_rel, rep.max_rel_error);
    r.passed = r.passed && rep.passed;
    ++r.instances;
  }
  return r;
}

}  // namespace ibq::diag
