#include "ibq/quant/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "ibq/core/ops.hpp"

namespace ibq {
namespace {

void require_features(const Tensor& z, std::int64_t D, std::string_view who) {
  if (z.rank() != 2 || z.dim(1) != D) {
    throw DimensionError(std::string(who) + ": features " + shape_str(z.shape()) +
                         " do not match code dimension " + std::to_string(D));
  }
}

void require_codebook(const Codebook& cb, const Tensor& z, std::string_view who) {
  if (!cb.embeddings.defined()) throw ContractError(std::string(who) + ": empty codebook");
  require_features(z, cb.D, who);
  if (z.dtype() != cb.embeddings.dtype()) {
    throw DimensionError(std::string(who) + ": feature and codebook dtypes differ");
  }
}

Tensor values_of(const Tensor& t) {
  NoGradGuard guard;
  return t.clone().set_requires_grad(false);
}

}  // namespace

std::string_view quant_kind_name(QuantKind kind) {
  switch (kind) {
    case QuantKind::ibq: return "ibq";
    case QuantKind::naive: return "naive";
    case QuantKind::vqgan: return "vqgan";
    case QuantKind::lfq: return "lfq";
    case QuantKind::softvq: return "softvq";
  }
  return "?";
}

QuantKind parse_quant_kind(std::string_view name) {
  for (QuantKind k : {QuantKind::ibq, QuantKind::naive, QuantKind::vqgan, QuantKind::lfq,
                      QuantKind::softvq}) {
    if (quant_kind_name(k) == name) return k;
  }
  throw ConfigError("unknown quantizer '" + std::string(name) +
                    "' (expected ibq, naive, vqgan, lfq or softvq)");
}

bool has_soft(QuantKind kind) {
  return kind == QuantKind::ibq || kind == QuantKind::lfq || kind == QuantKind::softvq;
}

Codebook Codebook::create(std::int64_t K, std::int64_t D, Rng& rng, CodebookInit init,
                          DType dtype, double scale) {
  if (K < 2 || D < 1) {
    throw ConfigError("codebook needs K >= 2 and D >= 1, got K=" + std::to_string(K) +
                      " D=" + std::to_string(D));
  }
  if (scale < 0) throw ConfigError("codebook init scale must be non-negative");
  const bool uniform = init == CodebookInit::uniform;
  if (scale == 0) scale = uniform ? 1.0 / static_cast<double>(K) : 0.02;
  Tensor e = uniform ? rng_uniform(rng, {K, D}, -scale, scale, dtype) : rng_normal(rng, {K, D}, 0.0, scale, dtype);
  return from_embeddings(e);
}

Codebook Codebook::from_embeddings(Tensor embeddings) {
  if (embeddings.rank() != 2) throw DimensionError("codebook embeddings must be [K×D]");
  Codebook cb;
  cb.K = embeddings.dim(0);
  cb.D = embeddings.dim(1);
  cb.embeddings = std::move(embeddings);
  cb.embeddings.set_requires_grad(true);
  return cb;
}

Tensor LfqCodebook::codes(DType dtype) const {
  if (dim < 1 || dim > kLfqMaxDim) {
    throw ConfigError("LFQ dimension must be in [1, " + std::to_string(kLfqMaxDim) + "], got " +
                      std::to_string(dim));
  }
  Tensor c = Tensor::zeros({K(), dim}, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = c.mutable_data<T>();
    for (std::int64_t k = 0; k < K(); ++k) {
      for (int i = 0; i < dim; ++i) d[k * dim + i] = ((k >> i) & 1) ? T(1) : T(-1);
    }
  });
  return c;
}

IndexVec nearest_codes(const Tensor& z, const Tensor& embeddings) {
  const std::int64_t B = z.dim(0), K = embeddings.dim(0), D = embeddings.dim(1);
  Tensor dots;
  {
    NoGradGuard guard;
    dots = ops::matmul_nt(values_of(z), values_of(embeddings));
  }
  IndexVec out(static_cast<std::size_t>(B));
  dispatch(z.dtype(), [&]<class T>() {
    auto zc = z.data<T>();
    auto cc = embeddings.data<T>();
    auto dc = dots.data<T>();
    std::vector<double> norms(static_cast<std::size_t>(K));
    double max_norm = 0.0;
    for (std::int64_t k = 0; k < K; ++k) {
      double s = 0;
      for (std::int64_t j = 0; j < D; ++j) s += double(cc[k * D + j]) * cc[k * D + j];
      norms[k] = s;
      max_norm = std::max(max_norm, s);
    }
    std::vector<double> score(static_cast<std::size_t>(K));
    for (std::int64_t i = 0; i < B; ++i) {
      const T* zi = zc.data() + i * D;
      double zn = 0;
      for (std::int64_t j = 0; j < D; ++j) zn += double(zi[j]) * zi[j];
      double best = std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < K; ++k) {
        score[k] = norms[k] - 2.0 * double(dc[i * K + k]);
        best = std::min(best, score[k]);
      }
      // The gemm scores are screened with a rounding margin; survivors are
      // resolved with exact squared distances so ties go to the lowest index.
      const double margin = 1e-4 * (zn + max_norm) + 1e-30;
      double best_exact = std::numeric_limits<double>::infinity();
      std::int64_t arg = 0;
      for (std::int64_t k = 0; k < K; ++k) {
        if (score[k] > best + margin) continue;
        double d2 = 0;
        for (std::int64_t j = 0; j < D; ++j) {
          const double diff = double(zi[j]) - double(cc[k * D + j]);
          d2 += diff * diff;
        }
        if (d2 < best_exact) {
          best_exact = d2;
          arg = k;
        }
      }
      out[i] = arg;
    }
  });
  return out;
}

Tensor straight_through_index(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape() || hard.rank() != 2) {
    throw DimensionError("straight_through_index: hard " + shape_str(hard.shape()) +
                         " and soft " + shape_str(soft.shape()) + " must be equal [B×K]");
  }
  const std::int64_t B = hard.dim(0), K = hard.dim(1);
  dispatch(hard.dtype(), [&]<class T>() {
    auto h = hard.data<T>();
    for (std::int64_t i = 0; i < B; ++i) {
      int ones = 0;
      for (std::int64_t k = 0; k < K; ++k) {
        const T v = h[i * K + k];
        if (v == T(1)) ++ones;
        else if (v != T(0)) ones = -1000;
      }
      if (ones != 1) {
        throw ContractError("straight_through_index: row " + std::to_string(i) +
                            " of hard is not one-hot");
      }
    }
  });
  return ops::straight_through(soft, hard);
}

QuantOut ibq_quantize(const Tensor& z, const Codebook& cb, const IbqOptions& opts) {
  require_codebook(cb, z, "ibq_quantize");
  QuantOut q;
  q.kind = QuantKind::ibq;
  Tensor logits = ops::matmul_nt(z, cb.embeddings);
  if (opts.logit_scale != 1.0) logits = ops::scale(logits, opts.logit_scale);
  q.soft = ops::softmax(logits);
  // softmax is monotone, so the argmax of the logits is the argmax of Ind_soft
  // without the ties that rounding in exp can introduce.
  auto am = ops::argmax_onehot(logits);
  q.indices = std::move(am.indices);
  q.hard = std::move(am.onehot);
  Tensor ind = straight_through_index(q.hard, opts.corrupt_adjoint ? ops::detach(q.soft) : q.soft);
  q.z_q = ops::matmul(ind, cb.embeddings);
  q.selected = ops::gather_rows(cb.embeddings, q.indices);
  return q;
}

QuantOut naive_vq_quantize(const Tensor& z, const Codebook& cb) {
  require_codebook(cb, z, "naive_vq_quantize");
  QuantOut q;
  q.kind = QuantKind::naive;
  q.indices = nearest_codes(z, cb.embeddings);
  q.selected = ops::gather_rows(cb.embeddings, q.indices);
  q.z_q = ops::detach(q.selected);
  return q;
}

QuantOut vqgan_quantize(const Tensor& z, const Codebook& cb) {
  require_codebook(cb, z, "vqgan_quantize");
  QuantOut q;
  q.kind = QuantKind::vqgan;
  q.indices = nearest_codes(z, cb.embeddings);
  q.selected = ops::gather_rows(cb.embeddings, q.indices);
  q.z_q = ops::straight_through(z, values_of(q.selected));
  return q;
}

QuantOut lfq_quantize(const Tensor& z, const LfqCodebook& cb) {
  if (cb.dim > kLfqMaxDim) {
    throw ConfigError("LFQ dimension " + std::to_string(cb.dim) + " exceeds " +
                      std::to_string(kLfqMaxDim) + " (implicit codebook enumeration too large)");
  }
  require_features(z, cb.dim, "lfq_quantize");
  QuantOut q;
  q.kind = QuantKind::lfq;
  const std::int64_t B = z.dim(0);
  Tensor signs = Tensor::zeros(z.shape(), z.dtype());
  q.indices.assign(static_cast<std::size_t>(B), 0);
  dispatch(z.dtype(), [&]<class T>() {
    auto zc = z.data<T>();
    auto s = signs.mutable_data<T>();
    for (std::int64_t i = 0; i < B; ++i) {
      std::int64_t index = 0;
      for (int j = 0; j < cb.dim; ++j) {
        const bool bit = zc[i * cb.dim + j] > T(0);
        s[i * cb.dim + j] = bit ? T(1) : T(-1);
        if (bit) index |= std::int64_t{1} << j;
      }
      q.indices[i] = index;
    }
  });
  q.selected = signs;
  q.z_q = ops::straight_through(z, signs);
  // −‖z − c‖² = 2⟨z, c⟩ − ‖z‖² − dim; the row constant cancels in softmax.
  q.soft = ops::softmax(ops::scale(ops::matmul_nt(z, cb.codes(z.dtype())), 2.0));
  return q;
}

QuantOut softvq_quantize(const Tensor& z, const Codebook& cb, double tau, bool training) {
  if (!(tau > 0.0)) throw DomainError("softvq_quantize: temperature must be positive");
  require_codebook(cb, z, "softvq_quantize");
  QuantOut q;
  q.kind = QuantKind::softvq;
  // −‖z − c‖² up to the per-row constant ‖z‖², divided by τ.
  Tensor neg_norms = ops::scale(ops::sum_last(ops::square(cb.embeddings)), -1.0);
  Tensor logits =
      ops::scale(ops::add_bias(ops::scale(ops::matmul_nt(z, cb.embeddings), 2.0), neg_norms),
                 1.0 / tau);
  q.soft = ops::softmax(logits);
  q.indices = ops::argmax_onehot(logits).indices;
  q.selected = ops::gather_rows(cb.embeddings, q.indices);
  if (training) {
    q.z_q = ops::matmul(q.soft, cb.embeddings);
  } else {
    q.hard_inference = true;
    q.z_q = ops::straight_through(z, values_of(q.selected));
  }
  return q;
}

double softvq_temperature(std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return kSoftVqTauStart;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return kSoftVqTauEnd +
         0.5 * (kSoftVqTauStart - kSoftVqTauEnd) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace ibq
