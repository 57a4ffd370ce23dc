#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "ibq/core/rng.hpp"
#include "ibq/core/tensor.hpp"

namespace ibq {

enum class QuantKind { ibq, naive, vqgan, lfq, softvq };

std::string_view quant_kind_name(QuantKind kind);
// Throws ConfigError on an unknown name.
QuantKind parse_quant_kind(std::string_view name);
// Whether the quantizer produces a soft categorical distribution.
bool has_soft(QuantKind kind);

enum class CodebookInit { uniform, normal };

struct Codebook {
  Tensor embeddings;  // [K×D], requires grad
  std::int64_t K = 0;
  std::int64_t D = 0;

  // uniform(−a, a) or normal(0, a²); scale 0 picks a = 1/K or 0.02.
  static Codebook create(std::int64_t K, std::int64_t D, Rng& rng,
                         CodebookInit init = CodebookInit::uniform, DType dtype = DType::f32,
                         double scale = 0.0);
  static Codebook from_embeddings(Tensor embeddings);
};

// Implicit {−1, +1}^dim codebook of size 2^dim.
struct LfqCodebook {
  int dim = 0;
  std::int64_t K() const { return std::int64_t{1} << dim; }
  // All 2^dim codes as rows; row k has +1 in position i iff bit i of k is set.
  Tensor codes(DType dtype) const;
};

inline constexpr int kLfqMaxDim = 20;

struct EntropyParts {
  double per_sample = 0.0;  // mean_i H(p_i)
  double batch = 0.0;       // H(mean_i p_i)
};

struct QuantOut {
  QuantKind kind = QuantKind::ibq;
  Tensor z_q;            // [B×D], carries the quantizer's gradient path
  IndexVec indices;      // [B]
  Tensor soft;           // [B×K]; undefined for naive / vqgan
  Tensor hard;           // [B×K] one-hot of indices; IBQ only
  // Selected code rows Ind_hardᵀ·C. Gradient reaches exactly the selected
  // rows. For LFQ these are the constant ±1 codes.
  Tensor selected;
  bool hard_inference = false;  // Soft VQ evaluated the VQGAN way
  Tensor quant_loss;            // filled by attach_losses
  EntropyParts entropy_parts;
};

struct IbqOptions {
  double logit_scale = 1.0;
  // Negative control only: drops the soft-distribution gradient so the
  // codebook learns through the selected rows alone.
  bool corrupt_adjoint = false;
};

QuantOut ibq_quantize(const Tensor& z, const Codebook& cb, const IbqOptions& opts = {});
QuantOut naive_vq_quantize(const Tensor& z, const Codebook& cb);
QuantOut vqgan_quantize(const Tensor& z, const Codebook& cb);
QuantOut lfq_quantize(const Tensor& z, const LfqCodebook& cb);
// training: z_q is the τ-softmax weighted average of the codes; otherwise
// the nearest code is selected with a straight-through path to z.
QuantOut softvq_quantize(const Tensor& z, const Codebook& cb, double tau, bool training = true);

inline constexpr double kSoftVqTauStart = 0.9;
inline constexpr double kSoftVqTauEnd = 1e-6;
double softvq_temperature(std::int64_t step, std::int64_t total_steps);

// Forward value bit-equals `hard`; the adjoint flows to `soft` unchanged.
// Throws ContractError when a row of hard is not one-hot.
Tensor straight_through_index(const Tensor& hard, const Tensor& soft);

// Nearest code rows under Euclidean distance, ties to the lowest index.
IndexVec nearest_codes(const Tensor& z, const Tensor& embeddings);

}  // namespace ibq
