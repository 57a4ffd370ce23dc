#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ibq/core/gradcheck.hpp"
#include "ibq/core/rng.hpp"

namespace ibq::diag {

// One random instance: the f64 point and the scalar function of it.
using Instance = std::pair<Tensor, ScalarFn>;

struct GradCase {
  std::string name;
  std::function<Instance(Rng&)> make;
};

Tensor rand64(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0);
// Uniform magnitude in [lo, hi] with random sign; keeps kinks out of reach of ε.
Tensor signed_away_from_zero(Rng& rng, Shape shape, double lo = 0.1, double hi = 1.0);
// Σ y ⊙ w for a fixed random w of y's shape.
Tensor weighted_sum(const Tensor& y, const Tensor& w);

std::vector<GradCase> core_grad_cases();

struct CaseResult {
  std::string name;
  int instances = 0;
  double worst_rel = 0.0;
  bool passed = true;
};

CaseResult run_case(const GradCase& c, int instances, std::uint64_t seed,
                    double eps = 1e-4, double tol = 1e-5);

}  // namespace ibq::diag

namespace ibq::diag {

// Quantizer and loss compositions, f64.
std::vector<GradCase> quant_grad_cases();

}  // namespace ibq::diag
