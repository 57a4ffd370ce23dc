#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "ibq/core/tensor.hpp"

namespace ibq {

// Ordered record of differentiable ops for one forward pass. backward()
// walks the nodes in strict reverse order and accumulates adjoints
// additively into inputs, then clears the tape.
class Tape {
 public:
  using Adjoint = std::function<void(detail::TensorImpl& out)>;

  struct Node {
    std::string_view op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    Adjoint adjoint;
  };

  void record(std::string_view op,
              std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
              std::shared_ptr<detail::TensorImpl> output, Adjoint adjoint);

  void backward(const Tensor& loss);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
};

// Per-thread active tape used by every op.
Tape& active_tape();

bool grad_enabled();

// Disables recording for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Backpropagates a scalar loss through the active tape.
void backward(const Tensor& loss);

namespace detail {

bool any_requires_grad(std::initializer_list<const Tensor*> inputs);

// Marks `out` as requiring grad and records the adjoint when any input
// requires grad and recording is enabled.
void record(std::string_view op, std::initializer_list<const Tensor*> inputs,
            Tensor& out, Tape::Adjoint adjoint);

void check_finite(const Tensor& t, std::string_view op);

}  // namespace detail

}  // namespace ibq
