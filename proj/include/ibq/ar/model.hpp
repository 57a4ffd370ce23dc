#pragma once

#include <cstdint>
#include <vector>

#include "ibq/core/rng.hpp"
#include "ibq/core/tensor.hpp"

namespace ibq {

struct ARConfig {
  int depth = 2;
  int width = 128;
  int heads = 2;
  int vocab = 256;
  int seq_len = 64;
  int num_classes = 10;
  double dropout = 0.1;

  int head_dim() const { return width / heads; }
  int ffn_hidden() const;
  // Throws ConfigError on non-positive sizes, width not divisible by heads
  // or an odd head dimension.
  void validate() const;
};

// width 64·d, heads d.
ARConfig ar_scale_config(int depth, int vocab = 16384, int seq_len = 256, int num_classes = 1000);

// SwiGLU width: 8w/3 rounded up to a multiple of 256.
int swiglu_hidden(int width);

// Closed form, see docs/architecture.md; equals ARModel::num_params().
std::int64_t ar_param_count(const ARConfig& cfg);

// One transformer layer's weights.
struct ARBlock {
  Tensor attn_norm;            // [w]
  Tensor wq, wk, wv, wo;       // [w×w]
  Tensor ffn_norm;             // [w]
  Tensor w1, w3;               // [w×hidden]
  Tensor w2;                   // [hidden×w]
  Tensor ada_w;                // [w×6w], zero at init
  Tensor ada_b;                // [6w], zero at init
};

// Per-row modulation for one block; each is [B·L × w].
struct Modulation {
  Tensor shift_attn, scale_attn, gate_attn;
  Tensor shift_ffn, scale_ffn, gate_ffn;
};

// x + α₁·attn((1+γ₁)·norm(x) + β₁), then the same pattern around the FFN.
// x is [B×L×w] and the modulation rows follow x's row order.
Tensor ar_block_forward(const ARBlock& blk, const Tensor& x, const Modulation& mod, int heads,
                        double dropout, Rng* rng);
// The block without conditioning: x + attn(norm(x)), then x + ffn(norm(x)).
Tensor ar_block_plain(const ARBlock& blk, const Tensor& x, int heads);

struct ARForwardOptions {
  bool training = false;
  Rng* rng = nullptr;     // dropout source, required when training with dropout > 0
  bool condition = true;  // false feeds zeros to the AdaLN projections
};

struct ARForward {
  Tensor logits;  // [B×L×K]
  Tensor nll;     // scalar mean over B·L when targets are given
};

struct ARBatch {
  std::vector<int> labels;                   // [B]
  std::vector<std::vector<std::int64_t>> tokens;  // B sequences of equal length ≤ T
};

class ARModel {
 public:
  static ARModel create(const ARConfig& cfg, Rng& rng, DType dtype = DType::f32);

  const ARConfig& config() const { return cfg_; }

  // Input is the class start token followed by tokens[0..L−2]; position t
  // predicts tokens[t]. With `with_loss`, nll is the mean cross-entropy
  // against all L tokens. Throws DataError on an out-of-range index or label.
  ARForward forward(const ARBatch& batch, bool with_loss, const ARForwardOptions& opts = {}) const;

  // Next-token logits after the class start token and `prefix` (length < T).
  std::vector<double> next_logits(int label, const std::vector<std::int64_t>& prefix) const;

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::int64_t num_params() const;

  std::vector<ARBlock>& blocks() { return blocks_; }
  const std::vector<ARBlock>& blocks() const { return blocks_; }

 private:
  ARConfig cfg_;
  Tensor tok_emb_;  // [K×w]
  Tensor cls_emb_;  // [(C+1)×w], last row is the null class
  std::vector<ARBlock> blocks_;
  Tensor final_norm_;  // [w]
  Tensor final_ada_w_, final_ada_b_;  // [w×2w], [2w]
  Tensor head_;  // [w×K]
};

struct SampleOptions {
  double temperature = 1.0;
  int top_k = 0;  // 0 means K
};

// Throws DomainError when temperature ≤ 0 or top_k out of [1, K].
std::vector<std::int64_t> ar_sample(const ARModel& model, int label, const SampleOptions& opts,
                                    Rng& rng);

// Draws from softmax(logits / temperature) restricted to the top_k largest
// logits (ties keep the lower index).
std::int64_t sample_logits(const std::vector<double>& logits, const SampleOptions& opts, Rng& rng);

}  // namespace ibq
