#include "ibq/quant/losses.hpp"

#include <cmath>
#include <string>

#include "ibq/core/ops.hpp"
#include "ibq/core/tape.hpp"

namespace ibq {
namespace {

Tensor mse(const Tensor& a, const Tensor& b) { return ops::mean(ops::square(ops::sub(a, b))); }

void require_same(const Tensor& a, const Tensor& b, std::string_view who) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(who) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

Tensor commit(const Tensor& z, const Tensor& target, double beta) {
  Tensor codebook_term = mse(ops::detach(z), target);
  if (beta == 0.0) return codebook_term;
  return ops::add(codebook_term, ops::scale(mse(z, ops::detach(target)), beta));
}

constexpr double kLogFloor = 1e-30;

}  // namespace

Tensor reconstruction_loss(const Tensor& x_hat, const Tensor& x, ReconNorm norm) {
  require_same(x_hat, x, "reconstruction_loss");
  Tensor d = ops::sub(x_hat, x);
  return ops::mean(norm == ReconNorm::l2 ? ops::square(d) : ops::abs(d));
}

Tensor double_quant_loss(const Tensor& z, const QuantOut& q, double beta) {
  if (!q.selected.defined() || !q.z_q.defined()) {
    throw ContractError("double_quant_loss needs both z_q and the selected code rows");
  }
  require_same(z, q.z_q, "double_quant_loss");
  require_same(z, q.selected, "double_quant_loss");
  return ops::add(mse(q.z_q, z), commit(z, q.selected, beta));
}

Tensor vq_commit_loss(const Tensor& z, const QuantOut& q, double beta) {
  if (!q.selected.defined()) throw ContractError("vq_commit_loss needs the selected code rows");
  require_same(z, q.selected, "vq_commit_loss");
  return commit(z, q.selected, beta);
}

EntropyResult entropy_penalty(const Tensor& soft) {
  if (soft.rank() != 2) throw DimensionError("entropy_penalty expects [B×K] probabilities");
  const std::int64_t B = soft.dim(0), K = soft.dim(1);
  EntropyResult r;
  std::vector<double> mean_p(static_cast<std::size_t>(K), 0.0);
  double per_sample = 0.0;
  dispatch(soft.dtype(), [&]<class T>() {
    auto p = soft.data<T>();
    for (std::int64_t i = 0; i < B; ++i) {
      double row = 0.0, h = 0.0;
      for (std::int64_t k = 0; k < K; ++k) {
        const double v = p[i * K + k];
        row += v;
        if (v > 0) h -= v * std::log(v);
        mean_p[k] += v;
      }
      if (std::fabs(row - 1.0) > 1e-4) {
        throw ContractError("entropy_penalty: row " + std::to_string(i) + " sums to " +
                            std::to_string(row));
      }
      per_sample += h;
    }
  });
  double batch = 0.0;
  for (double& m : mean_p) {
    m /= static_cast<double>(B);
    if (m > 0) batch -= m * std::log(m);
  }
  r.parts.per_sample = per_sample / static_cast<double>(B);
  r.parts.batch = batch;
  r.loss = Tensor::scalar(r.parts.per_sample - r.parts.batch, soft.dtype());
  auto pi = soft.impl_ptr();
  detail::record("entropy_penalty", {&soft}, r.loss,
                 [pi, mean_p = std::move(mean_p), B, K](detail::TensorImpl& o) {
                   if (!pi->requires_grad) return;
                   dispatch(o.dtype, [&]<class T>() {
                     const double g = static_cast<double>(o.grads<T>()[0]) / static_cast<double>(B);
                     const auto& p = pi->values<T>();
                     auto gp = pi->grad_buffer<T>();
                     std::vector<double> log_mean(static_cast<std::size_t>(K));
                     for (std::int64_t k = 0; k < K; ++k) {
                       log_mean[k] = std::log(std::max(mean_p[k], kLogFloor));
                     }
                     for (std::int64_t i = 0; i < B; ++i) {
                       for (std::int64_t k = 0; k < K; ++k) {
                         const double v = std::max(static_cast<double>(p[i * K + k]), kLogFloor);
                         gp[i * K + k] += static_cast<T>(g * (log_mean[k] - std::log(v)));
                       }
                     }
                   });
                 });
  return r;
}

LossBundle assemble_loss(const LossTerms& terms, const LossWeights& weights) {
  if (weights.recon < 0 || weights.quant < 0 || weights.entropy < 0) {
    throw DomainError("loss weights must be non-negative");
  }
  LossBundle b;
  b.weights = weights;
  b.recon = terms.recon;
  b.quant = terms.quant;
  b.entropy = terms.entropy;
  DType dtype = DType::f32;
  for (const Tensor* t : {&terms.recon, &terms.quant, &terms.entropy}) {
    if (t->defined()) dtype = t->dtype();
  }
  Tensor total = Tensor::scalar(0.0, dtype);
  auto accumulate = [&](const Tensor& t, double w) {
    if (!t.defined() || w == 0.0) return;
    total = ops::add(total, w == 1.0 ? t : ops::scale(t, w));
  };
  accumulate(terms.recon, weights.recon);
  accumulate(terms.quant, weights.quant);
  accumulate(terms.entropy, weights.entropy);
  b.total = total;
  return b;
}

Tensor attach_losses(const Tensor& z, QuantOut& q, double beta) {
  switch (q.kind) {
    case QuantKind::ibq: q.quant_loss = double_quant_loss(z, q, beta); break;
    case QuantKind::naive: q.quant_loss = vq_commit_loss(z, q, 0.0); break;
    case QuantKind::vqgan:
    case QuantKind::lfq: q.quant_loss = vq_commit_loss(z, q, beta); break;
    case QuantKind::softvq:
      q.quant_loss = q.hard_inference ? vq_commit_loss(z, q, beta) : commit(z, q.z_q, beta);
      break;
  }
  if (!q.soft.defined()) return Tensor{};
  EntropyResult e = entropy_penalty(q.soft);
  q.entropy_parts = e.parts;
  return e.loss;
}

}  // namespace ibq
