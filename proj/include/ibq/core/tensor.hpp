#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "ibq/core/errors.hpp"

namespace ibq {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

// Runs f.template operator()<T>() with T matching the runtime dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<float> g32;
  std::vector<double> g64;
  bool requires_grad = false;

  template <class T>
  std::vector<T>& values() {
    if constexpr (std::is_same_v<T, float>) return f32;
    else return f64;
  }
  template <class T>
  std::vector<T>& grads() {
    if constexpr (std::is_same_v<T, float>) return g32;
    else return g64;
  }
  bool has_grad() const { return !g32.empty() || !g64.empty(); }

  // Gradient buffer, zero-allocated on first use.
  template <class T>
  std::span<T> grad_buffer() {
    auto& g = grads<T>();
    if (g.empty()) g.assign(values<T>().size(), T(0));
    return g;
  }
};

}  // namespace detail

// Dense row-major array. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  static Tensor from_vector(Shape shape, std::vector<float> values);
  static Tensor from_vector(Shape shape, std::vector<double> values);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  // Negative axes count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;
  DType dtype() const { return impl_->dtype; }

  template <class T>
  std::span<const T> data() const {
    check_dtype<T>();
    return impl_->values<T>();
  }
  // Direct write access; reserved for initializers and optimizer updates.
  template <class T>
  std::span<T> mutable_data() {
    check_dtype<T>();
    return impl_->values<T>();
  }

  double value(std::int64_t flat_index) const;
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true);

  bool has_grad() const { return impl_->has_grad(); }
  // Copy of the accumulated gradient; zeros when nothing reached this tensor.
  Tensor grad() const;
  template <class T>
  std::span<const T> grad_data() const {
    check_dtype<T>();
    return impl_->grads<T>();
  }
  template <class T>
  std::span<T> mutable_grad() {
    check_dtype<T>();
    return impl_->grad_buffer<T>();
  }
  void zero_grad();

  Tensor clone() const;
  Tensor to(DType dtype) const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  template <class T>
  void check_dtype() const {
    if (impl_->dtype != dtype_of<T>()) {
      throw ContractError(std::string("tensor dtype is ") +
                          dtype_name(impl_->dtype) + ", accessed as " +
                          dtype_name(dtype_of<T>()));
    }
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Indices produced by selection ops; not part of the gradient graph.
using IndexVec = std::vector<std::int64_t>;

}  // namespace ibq
