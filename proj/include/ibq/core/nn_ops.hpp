#pragma once

#include <cstdint>
#include <vector>

#include "ibq/core/tensor.hpp"

// Fused network layers with hand-written adjoints; each one is covered by
// the finite-difference gradient checker in tests/core.
namespace ibq::nn {

// x[..., in] · weight[in×out] (+ bias[out]); leading axes are treated as rows.
// Pass an undefined Tensor to skip the bias.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// NCHW convolution; weight is [Cout, Cin, kh, kw], bias [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding);

// Per-sample normalization over channel groups of x[B, C, H, W].
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-6);

Tensor upsample_nearest2x(const Tensor& x);

// [B, C, H, W] ↔ [B·H·W, C] with rows in (b, y, x) raster order.
Tensor to_rows(const Tensor& x);
Tensor from_rows(const Tensor& rows, std::int64_t batch, std::int64_t h, std::int64_t w);

// x / sqrt(mean(x²) + eps) · gain over the last axis.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// Rotary embedding on x[B, T, heads·d_head]: each interleaved pair
// (2i, 2i+1) of a head is rotated by positions[t] · 10000^(−2i/d_head).
// Throws ConfigError when d_head is odd.
Tensor rope(const Tensor& x, int heads, const std::vector<std::int64_t>& positions);
Tensor rope(const Tensor& x, int heads);

// Multi-head scaled dot-product attention where query t sees keys 0..t.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int heads);

}  // namespace ibq::nn
