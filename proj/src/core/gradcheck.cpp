#include "ibq/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ibq/core/ops.hpp"

namespace ibq {
namespace {

class LogScope {
 public:
  explicit LogScope(ops::DetachLog* log) : prev_(ops::set_detach_log(log)) {}
  ~LogScope() { ops::set_detach_log(prev_); }
  LogScope(const LogScope&) = delete;
  LogScope& operator=(const LogScope&) = delete;

 private:
  ops::DetachLog* prev_;
};

double eval_frozen(const ScalarFn& f, const Tensor& x, ops::DetachLog& log) {
  NoGradGuard guard;
  log.cursor = 0;
  log.replaying = true;
  LogScope scope(&log);
  return f(x).item();
}

}  // namespace

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " max_rel=" << max_rel_error
     << " max_abs=" << max_abs_error << " worst=" << worst_index << " n=" << checked;
  return os.str();
}

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, double eps, double tol) {
  if (x.dtype() != DType::f64) throw ContractError("grad_check expects an f64 point");
  active_tape().clear();
  ops::DetachLog log;
  Tensor base = x.clone();
  base.set_requires_grad(true);
  Tensor y;
  {
    LogScope scope(&log);
    y = f(base);
  }
  if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
  backward(y);
  const std::vector<double> analytic = base.grad().to_vector();

  GradCheckReport r;
  const auto n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor xp = x.clone();
    Tensor xm = x.clone();
    xp.mutable_data<double>()[static_cast<std::size_t>(i)] += eps;
    xm.mutable_data<double>()[static_cast<std::size_t>(i)] -= eps;
    const double numeric = (eval_frozen(f, xp, log) - eval_frozen(f, xm, log)) / (2.0 * eps);
    const double a = analytic[static_cast<std::size_t>(i)];
    const double abs_err = std::fabs(a - numeric);
    const double rel = abs_err / std::max({std::fabs(a), std::fabs(numeric), 1e-3});
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    if (rel > r.max_rel_error || r.worst_index < 0) {
      r.max_rel_error = std::max(r.max_rel_error, rel);
      r.worst_index = i;
    }
  }
  r.checked = n;
  r.passed = r.max_rel_error < tol;
  return r;
}

}  // namespace ibq
