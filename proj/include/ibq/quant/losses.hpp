#pragma once

#include "ibq/core/tensor.hpp"
#include "ibq/quant/quantizers.hpp"

namespace ibq {

enum class ReconNorm { l2, l1 };

// Mean over all pixels of δ² (or |δ|).
Tensor reconstruction_loss(const Tensor& x_hat, const Tensor& x, ReconNorm norm = ReconNorm::l2);

inline constexpr double kDefaultBeta = 0.25;

// ‖z_q − z‖² + ‖sg[z] − z_q′‖² + β‖z − sg[z_q′]‖² with z_q′ the selected code
// rows; each squared norm is averaged over all B·D entries.
Tensor double_quant_loss(const Tensor& z, const QuantOut& q, double beta = kDefaultBeta);

// ‖sg[z] − q‖² + β‖z − sg[q]‖², entry-averaged.
Tensor vq_commit_loss(const Tensor& z, const QuantOut& q, double beta = kDefaultBeta);

struct EntropyResult {
  Tensor loss;  // scalar, differentiable w.r.t. the probabilities
  EntropyParts parts;
};

// mean_i H(p_i) − H(mean_i p_i) for rows p_i of soft[B×K] (natural log).
// Throws ContractError when a row sum is off by more than 1e-4.
EntropyResult entropy_penalty(const Tensor& soft);

struct LossWeights {
  double recon = 1.0;
  double quant = 1.0;
  double entropy = 0.1;
};

struct LossTerms {
  Tensor recon;
  Tensor quant;
  Tensor entropy;
};

struct LossBundle {
  Tensor total;
  Tensor recon;
  Tensor quant;
  Tensor entropy;
  LossWeights weights;
};

// Weighted sum; undefined terms count as zero. Negative weights are rejected.
LossBundle assemble_loss(const LossTerms& terms, const LossWeights& weights);

// The quantization loss used in training for each scheme: the double
// quantization loss for IBQ, the codebook term alone for naive VQ (which has
// no path to the encoder), commit loss for VQGAN and LFQ, and commit loss
// against the soft average for Soft VQ in training mode. Fills q.quant_loss and q.entropy_parts and
// returns the entropy term (undefined when q has no soft distribution).
Tensor attach_losses(const Tensor& z, QuantOut& q, double beta = kDefaultBeta);

}  // namespace ibq
