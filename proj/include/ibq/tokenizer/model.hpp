#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ibq/core/rng.hpp"
#include "ibq/core/tensor.hpp"
#include "ibq/quant/quantizers.hpp"

namespace ibq {

struct TokenizerConfig {
  int channels = 64;        // base width C; level i uses C·2^i
  int num_resblocks = 2;    // per resolution
  int downsample = 4;       // p, a power of two
  int code_dim = 32;        // D
  int codebook_size = 256;  // K; LFQ uses 2^D instead
  int image_size = 32;
  QuantKind quantizer = QuantKind::ibq;
  CodebookInit codebook_init = CodebookInit::uniform;
  double codebook_init_scale = 0.0;  // 0: 1/K (uniform) or 0.02 (normal)
  double logit_scale = 1.0;  // IBQ only

  int levels() const;
  int grid() const { return image_size / downsample; }
  std::int64_t tokens_per_image() const { return std::int64_t{grid()} * grid(); }
  std::int64_t vocab() const;
  // Throws ConfigError on a non-power-of-two p, indivisible image size or
  // out-of-range widths.
  void validate() const;
};

struct NamedParam {
  std::string name;
  Tensor value;
};

struct Conv {
  Tensor w, b;
};

struct GroupNormParams {
  Tensor gamma, beta;
};

struct ResBlock {
  GroupNormParams norm1;
  Conv conv1;
  GroupNormParams norm2;
  Conv conv2;
  Conv skip;  // 1×1, only when the width changes
};

// Groups used for a width: gcd(c, 32).
int norm_groups(int channels);

// Closed-form parameter count of the layer recipe in docs/architecture.md.
std::int64_t tokenizer_param_count(const TokenizerConfig& cfg);

// Quantizer behaviour for one forward pass.
struct QuantMode {
  bool training = true;
  double tau = kSoftVqTauStart;  // Soft VQ only
};

class TokenizerModel {
 public:
  static TokenizerModel create(const TokenizerConfig& cfg, Rng& rng, DType dtype = DType::f32);

  const TokenizerConfig& config() const { return cfg_; }

  // [B×3×H×W] → [B·h·w × D], rows in raster order per image.
  Tensor encode(const Tensor& images) const;
  // [B·h·w × D] → [B×3×H×W] in [−1, 1].
  Tensor decode(const Tensor& rows, std::int64_t batch) const;
  QuantOut quantize(const Tensor& rows, const QuantMode& mode = {}) const;
  // Code embeddings for token indices, ready for decode. Throws DomainError
  // on an index outside the vocabulary.
  Tensor code_rows(const IndexVec& indices) const;

  // Encoder, decoder and codebook, in a fixed order used for checkpoints
  // and the optimizer.
  std::vector<NamedParam> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::int64_t num_params() const;

  const Codebook& codebook() const { return codebook_; }

 private:
  TokenizerConfig cfg_;
  Conv enc_in_;
  std::vector<std::vector<ResBlock>> enc_levels_;
  std::vector<Conv> enc_down_;
  std::vector<ResBlock> enc_mid_;
  GroupNormParams enc_norm_;
  Conv enc_out_;

  Conv dec_in_;
  std::vector<ResBlock> dec_mid_;
  std::vector<Conv> dec_up_;
  std::vector<std::vector<ResBlock>> dec_levels_;
  GroupNormParams dec_norm_;
  Conv dec_out_;

  Codebook codebook_;
  LfqCodebook lfq_;
};

}  // namespace ibq
