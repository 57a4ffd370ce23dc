#include "ibq/core/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace ibq {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) {
      throw DimensionError("non-positive extent in shape " + shape_str(shape));
    }
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

const char* dtype_name(DType dtype) {
  return dtype == DType::f32 ? "f32" : "f64";
}

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, DType dtype) {
  auto impl = std::make_shared<detail::TensorImpl>();
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  if (dtype == DType::f32) impl->f32.assign(n, 0.0f);
  else impl->f64.assign(n, 0.0);
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype) {
  return Tensor(make_impl(std::move(shape), dtype));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) {
  return full({1}, value, dtype);
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::f32;
  impl->f32 = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::f64;
  impl->f64 = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values,
                           DType dtype) {
  if (dtype == DType::f64) {
    return from_vector(std::move(shape), std::vector<double>(values));
  }
  std::vector<float> v(values.begin(), values.end());
  return from_vector(std::move(shape), std::move(v));
}

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const { return shape_numel(impl_->shape); }

double Tensor::value(std::int64_t flat_index) const {
  return dispatch(dtype(), [&]<class T>() -> double {
    return static_cast<double>(impl_->values<T>().at(
        static_cast<std::size_t>(flat_index)));
  });
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return value(0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    const auto& v = impl_->values<T>();
    return std::vector<double>(v.begin(), v.end());
  });
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

Tensor Tensor::grad() const {
  Tensor g = zeros(shape(), dtype());
  dispatch(dtype(), [&]<class T>() {
    const auto& src = impl_->grads<T>();
    if (!src.empty()) std::copy(src.begin(), src.end(), g.impl_->values<T>().begin());
  });
  return g;
}

void Tensor::zero_grad() {
  impl_->g32.clear();
  impl_->g64.clear();
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->f32 = impl_->f32;
  impl->f64 = impl_->f64;
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = target;
  if (target == DType::f32) {
    impl->f32.assign(impl_->f64.begin(), impl_->f64.end());
  } else {
    impl->f64.assign(impl_->f32.begin(), impl_->f32.end());
  }
  return Tensor(std::move(impl));
}

}  // namespace ibq
