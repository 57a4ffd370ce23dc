#include "ibq/core/tape.hpp"

#include <cmath>
#include <string>

namespace ibq {
namespace {

thread_local Tape g_tape;
thread_local bool g_grad_enabled = true;

}  // namespace

Tape& active_tape() { return g_tape; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void Tape::record(std::string_view op,
                  std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
                  std::shared_ptr<detail::TensorImpl> output,
                  Adjoint adjoint) {
  nodes_.push_back(
      Node{op, std::move(inputs), std::move(output), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  }
  if (!loss.requires_grad()) {
    clear();
    return;
  }
  dispatch(loss.dtype(), [&]<class T>() {
    loss.impl()->grad_buffer<T>()[0] += T(1);
  });
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->has_grad()) continue;
    it->adjoint(*it->output);
  }
  // Non-leaf outputs drop their adjoint buffers with the tape.
  clear();
}

void backward(const Tensor& loss) { active_tape().backward(loss); }

namespace detail {

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void record(std::string_view op, std::initializer_list<const Tensor*> inputs,
            Tensor& out, Tape::Adjoint adjoint) {
  if (!g_grad_enabled || !any_requires_grad(inputs)) return;
  out.set_requires_grad(true);
  std::vector<std::shared_ptr<TensorImpl>> refs;
  refs.reserve(inputs.size());
  for (const Tensor* t : inputs) {
    if (t && t->defined()) refs.push_back(t->impl_ptr());
  }
  g_tape.record(op, std::move(refs), out.impl_ptr(), std::move(adjoint));
}

void check_finite(const Tensor& t, std::string_view op) {
  dispatch(t.dtype(), [&]<class T>() {
    for (T v : t.data<T>()) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string(op) + " produced a non-finite value");
      }
    }
  });
}

}  // namespace detail
}  // namespace ibq
