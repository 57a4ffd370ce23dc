#pragma once

#include <cstdint>
#include <vector>

#include "ibq/core/tensor.hpp"

namespace ibq {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;
  // Decoupled (AdamW) decay, applied as p ← p − lr·wd·p before the Adam
  // update. Only rank ≥ 2 parameters decay when decay_matrices_only is set.
  double weight_decay = 0.0;
  bool decay_matrices_only = true;
  // Global L2 norm clipping of all gradients before the moment update; 0 disables.
  double clip_norm = 0.0;
};

struct OptimState {
  AdamHyper hyper;
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static OptimState create(const std::vector<Tensor>& params, AdamHyper hyper);
};

struct StepReport {
  double grad_norm = 0.0;
  double clip_scale = 1.0;
};

double global_grad_norm(const std::vector<Tensor>& params);

// One bias-corrected Adam step using each parameter's accumulated gradient
// (absent gradients count as zero). Throws NumericError, leaving parameters
// and state untouched, if any gradient is non-finite.
StepReport adam_step(std::vector<Tensor>& params, OptimState& state, double lr);

void zero_grads(std::vector<Tensor>& params);

}  // namespace ibq
