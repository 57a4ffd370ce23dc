#include "ibq/core/optim.hpp"

#include <cmath>
#include <string>

namespace ibq {

OptimState OptimState::create(const std::vector<Tensor>& params, AdamHyper hyper) {
  OptimState s;
  s.hyper = hyper;
  for (const Tensor& p : params) {
    s.m.push_back(Tensor::zeros(p.shape(), p.dtype()));
    s.v.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
  return s;
}

double global_grad_norm(const std::vector<Tensor>& params) {
  double total = 0.0;
  for (const Tensor& p : params) {
    dispatch(p.dtype(), [&]<class T>() {
      for (T g : p.grad_data<T>()) total += static_cast<double>(g) * g;
    });
  }
  return std::sqrt(total);
}

StepReport adam_step(std::vector<Tensor>& params, OptimState& state, double lr) {
  if (!(lr > 0.0)) throw DomainError("adam_step: learning rate must be positive");
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " +
                        std::to_string(state.m.size()) + " parameters, given " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != state.m[i].shape()) {
      throw DimensionError("adam_step: moment shape " + shape_str(state.m[i].shape()) +
                           " does not match parameter " + shape_str(params[i].shape()));
    }
    dispatch(params[i].dtype(), [&]<class T>() {
      for (T g : params[i].grad_data<T>()) {
        if (!std::isfinite(g)) {
          throw NumericError("adam_step: non-finite gradient in parameter #" +
                             std::to_string(i) + " of shape " + shape_str(params[i].shape()) +
                             "; step aborted");
        }
      }
    });
  }
  const AdamHyper& h = state.hyper;
  StepReport report;
  report.grad_norm = global_grad_norm(params);
  if (h.clip_norm > 0.0 && report.grad_norm > h.clip_norm) {
    report.clip_scale = h.clip_norm / report.grad_norm;
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    const bool decay = h.weight_decay > 0.0 && (!h.decay_matrices_only || p.rank() >= 2);
    dispatch(p.dtype(), [&]<class T>() {
      auto w = p.mutable_data<T>();
      auto g = p.grad_data<T>();
      auto m = state.m[i].mutable_data<T>();
      auto v = state.v[i].mutable_data<T>();
      const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
      const T step_size = static_cast<T>(lr / (bc1 == 0.0 ? 1.0 : bc1));
      const T inv_bc2 = static_cast<T>(1.0 / (bc2 == 0.0 ? 1.0 : bc2));
      const T eps = static_cast<T>(h.eps);
      const T clip = static_cast<T>(report.clip_scale);
      const T keep = static_cast<T>(1.0 - lr * h.weight_decay);
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T gj = g.empty() ? T(0) : g[j] * clip;
        m[j] = b1 * m[j] + (1 - b1) * gj;
        v[j] = b2 * v[j] + (1 - b2) * gj * gj;
        if (decay) w[j] *= keep;
        w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
      }
    });
  }
  return report;
}

void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace ibq
