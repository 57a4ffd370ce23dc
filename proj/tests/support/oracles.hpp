#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ibq/core/tensor.hpp"

// Direct f64 evaluations that share no code with the library.
namespace ibq::testing {

inline std::vector<std::int64_t> argmax_dot_oracle(const Tensor& z, const Tensor& c) {
  const auto B = z.dim(0), K = c.dim(0), D = c.dim(1);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(B));
  for (std::int64_t i = 0; i < B; ++i) {
    double best = -INFINITY;
    for (std::int64_t k = 0; k < K; ++k) {
      double s = 0;
      for (std::int64_t j = 0; j < D; ++j) s += z.value(i * D + j) * c.value(k * D + j);
      if (s > best) {
        best = s;
        idx[i] = k;
      }
    }
  }
  return idx;
}

// ‖z_q − z‖² + ‖sg[z] − z_q′‖² + β‖z − sg[z_q′]‖², entry-averaged, with
// z_q = z_q′ = the argmax-dot code row in value.
inline double double_quant_loss_oracle(const Tensor& z, const Tensor& c, double beta) {
  const auto B = z.dim(0), D = c.dim(1);
  const auto idx = argmax_dot_oracle(z, c);
  double t1 = 0, t2 = 0, t3 = 0;
  for (std::int64_t i = 0; i < B; ++i) {
    for (std::int64_t j = 0; j < D; ++j) {
      const double zq = c.value(idx[i] * D + j);
      const double zv = z.value(i * D + j);
      t1 += (zq - zv) * (zq - zv);
      t2 += (zv - zq) * (zv - zq);
      t3 += (zv - zq) * (zv - zq);
    }
  }
  const double n = static_cast<double>(B * D);
  return t1 / n + t2 / n + beta * t3 / n;
}

inline double entropy_oracle(const Tensor& p) {
  const auto B = p.dim(0), K = p.dim(1);
  std::vector<double> mean(static_cast<std::size_t>(K), 0.0);
  double hs = 0;
  for (std::int64_t i = 0; i < B; ++i) {
    for (std::int64_t k = 0; k < K; ++k) {
      const double v = p.value(i * K + k);
      if (v > 0) hs -= v * std::log(v);
      mean[k] += v / static_cast<double>(B);
    }
  }
  double hb = 0;
  for (double m : mean) {
    if (m > 0) hb -= m * std::log(m);
  }
  return hs / static_cast<double>(B) - hb;
}

}  // namespace ibq::testing
