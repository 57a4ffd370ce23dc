#pragma once

#include <cstdint>
#include <vector>

#include "ibq/core/rng.hpp"
#include "ibq/core/tape.hpp"
#include "ibq/core/tensor.hpp"

// Differentiable tensor operations. Every op records its adjoint on the
// active tape when an input requires grad, and rejects non-finite results.
namespace ibq::ops {

// a[M×K] · b[K×N].
Tensor matmul(const Tensor& a, const Tensor& b);
// a[M×K] · b[N×K]ᵀ.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x[..., N] + bias[N] broadcast over leading axes.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
// Throws DomainError on non-positive input.
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);
// Subgradient 0 at 0.
Tensor abs(const Tensor& x);
Tensor silu(const Tensor& x);
// Throws DomainError on negative input.
Tensor sqrt(const Tensor& x);
Tensor tanh(const Tensor& x);

// Scalar reductions (shape (1)), fixed left-to-right order.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduction over the last axis: (..., N) -> (...).
Tensor sum_last(const Tensor& x);

// Max-subtracted softmax along `axis`; adjoint p ⊙ (g − ⟨g, p⟩).
Tensor softmax(const Tensor& logits, int axis = -1);

struct ArgmaxOneHot {
  IndexVec indices;
  Tensor onehot;
};
// Row-wise argmax of p[B×K], ties to the lowest index. Not differentiable.
ArgmaxOneHot argmax_onehot(const Tensor& p);

// Value copy with no gradient path.
Tensor detach(const Tensor& x);

// Forward value is `value` bit for bit; the adjoint flows unchanged to
// `surrogate` and nothing reaches `value`. Equals surrogate + sg[value −
// surrogate] in exact arithmetic.
Tensor straight_through(const Tensor& surrogate, const Tensor& value);

Tensor reshape(const Tensor& x, Shape shape);
// rows of table[V×D] picked by `indices` -> [n×D]; adjoint scatter-adds.
Tensor gather_rows(const Tensor& table, const IndexVec& indices);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
// v[B×N] -> [B×T×N], each row repeated T times.
Tensor expand_rows(const Tensor& v, std::int64_t times);

// Mean negative log-likelihood of `targets` under softmax(logits[N×K]).
Tensor cross_entropy(const Tensor& logits, const IndexVec& targets);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// When installed, detach() appends its outputs (recording) or returns the
// recorded values in call order (replaying). The gradient checker uses this
// so finite differences see detached quantities as constants frozen at the
// base point, exactly as the adjoint does.
struct DetachLog {
  std::vector<Tensor> values;
  std::size_t cursor = 0;
  bool replaying = false;
};

DetachLog* set_detach_log(DetachLog* log);

}  // namespace ibq::ops
