#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "ibq/core/tensor.hpp"

namespace ibq {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t worst_index = -1;
  std::int64_t checked = 0;
  bool passed = false;

  std::string summary() const;
};

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Compares the autodiff gradient of scalar f at f64 point x against central
// differences (f(x+εe) − f(x−εe)) / 2ε. Detached values are frozen at the
// base point (see ops::DetachLog). Relative error uses
// |a − n| / max(|a|, |n|, 1e-3).
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-4,
                           double tol = 1e-5);

}  // namespace ibq
