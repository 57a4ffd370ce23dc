#include "ibq/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "ibq/core/gemm.hpp"

namespace ibq::ops {
namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using gemm::Trans;

void require_same_dtype(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": dtype mismatch " +
                        dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  require_same_dtype(a, b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, int rank, std::string_view op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(a.shape()));
  }
}

int normalize_axis(const Tensor& x, int axis, std::string_view op) {
  const int a = axis < 0 ? axis + x.rank() : axis;
  if (a < 0 || a >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(x.shape()));
  }
  return a;
}

// (outer, extent, inner) decomposition around `axis`.
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.extent = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) {
    r.inner *= s[i];
  }
  return r;
}

template <class T>
std::span<T> gbuf(const ImplPtr& p) {
  return p->grad_buffer<T>();
}

template <class F, class D>
Tensor unary(std::string_view op, const Tensor& x, F f, D df) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto xs = x.data<T>();
    auto ys = out.mutable_data<T>();
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  });
  detail::check_finite(out, op);
  ImplPtr xi = x.impl_ptr();
  detail::record(op, {&x}, out, [xi, df](TensorImpl& o) {
    if (!xi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      const auto& xv = xi->values<T>();
      const auto& yv = o.values<T>();
      auto gx = gbuf<T>(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
    });
  });
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require_same_dtype(a, b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) +
                         " · " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    gemm::gemm<T>(Trans::no, Trans::no, m, n, k, a.data<T>().data(), k,
                  b.data<T>().data(), n, out.mutable_data<T>().data(), n, false);
  });
  detail::check_finite(out, "matmul");
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  detail::record("matmul", {&a, &b}, out, [ai, bi, m, n, k](TensorImpl& o) {
    dispatch(o.dtype, [&]<class T>() {
      const T* g = o.grads<T>().data();
      if (ai->requires_grad) {
        gemm::gemm<T>(Trans::no, Trans::yes, m, k, n, g, n,
                      bi->values<T>().data(), n, gbuf<T>(ai).data(), k, true);
      }
      if (bi->requires_grad) {
        gemm::gemm<T>(Trans::yes, Trans::no, k, n, m, ai->values<T>().data(), k,
                      g, n, gbuf<T>(bi).data(), n, true);
      }
    });
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  require_same_dtype(a, b, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner extents differ, " +
                         shape_str(a.shape()) + " · " + shape_str(b.shape()) +
                         "ᵀ");
  }
  Tensor out = Tensor::zeros({m, n}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    gemm::gemm<T>(Trans::no, Trans::yes, m, n, k, a.data<T>().data(), k,
                  b.data<T>().data(), k, out.mutable_data<T>().data(), n, false);
  });
  detail::check_finite(out, "matmul_nt");
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  detail::record("matmul_nt", {&a, &b}, out, [ai, bi, m, n, k](TensorImpl& o) {
    dispatch(o.dtype, [&]<class T>() {
      const T* g = o.grads<T>().data();
      if (ai->requires_grad) {
        gemm::gemm<T>(Trans::no, Trans::no, m, k, n, g, n,
                      bi->values<T>().data(), k, gbuf<T>(ai).data(), k, true);
      }
      if (bi->requires_grad) {
        gemm::gemm<T>(Trans::yes, Trans::no, n, k, m, g, n,
                      ai->values<T>().data(), k, gbuf<T>(bi).data(), k, true);
      }
    });
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto src = a.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  });
  ImplPtr ai = a.impl_ptr();
  detail::record("transpose", {&a}, out, [ai, m, n](TensorImpl& o) {
    if (!ai->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      auto ga = gbuf<T>(ai);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.mutable_data<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  });
  detail::check_finite(out, "add");
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  detail::record("add", {&a, &b}, out, [ai, bi](TensorImpl& o) {
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      for (const ImplPtr& p : {ai, bi}) {
        if (!p->requires_grad) continue;
        auto gp = gbuf<T>(p);
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
      }
    });
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.mutable_data<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] - y[i];
  });
  detail::check_finite(out, "sub");
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  detail::record("sub", {&a, &b}, out, [ai, bi](TensorImpl& o) {
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      if (ai->requires_grad) {
        auto ga = gbuf<T>(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto gb = gbuf<T>(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.mutable_data<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
  });
  detail::check_finite(out, "mul");
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  detail::record("mul", {&a, &b}, out, [ai, bi](TensorImpl& o) {
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      if (ai->requires_grad) {
        auto ga = gbuf<T>(ai);
        const auto& y = bi->values<T>();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (bi->requires_grad) {
        auto gb = gbuf<T>(bi);
        const auto& x = ai->values<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  });
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_same_dtype(x, bias, "add_bias");
  require_rank(bias, 1, "add_bias");
  const auto n = bias.dim(0);
  if (x.dim(-1) != n) {
    throw DimensionError("add_bias: last extent of " + shape_str(x.shape()) +
                         " differs from bias " + shape_str(bias.shape()));
  }
  const auto rows = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto xs = x.data<T>(), bs = bias.data<T>();
    auto ys = out.mutable_data<T>();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < n; ++j) ys[r * n + j] = xs[r * n + j] + bs[j];
  });
  detail::check_finite(out, "add_bias");
  ImplPtr xi = x.impl_ptr(), bi = bias.impl_ptr();
  detail::record("add_bias", {&x, &bias}, out, [xi, bi, rows, n](TensorImpl& o) {
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      if (xi->requires_grad) {
        auto gx = gbuf<T>(xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bi->requires_grad) {
        auto gb = gbuf<T>(bi);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
    });
  });
  return out;
}

Tensor scale(const Tensor& x, double s) {
  return unary(
      "scale", x, [s](auto v) { return static_cast<decltype(v)>(v * s); },
      [s](auto, auto v) { return static_cast<decltype(v)>(s); });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      "add_scalar", x, [s](auto v) { return static_cast<decltype(v)>(v + s); },
      [](auto, auto v) { return static_cast<decltype(v)>(1); });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](auto v) { return v * v; },
      [](auto xv, auto) { return 2 * xv; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](auto v) { return std::exp(v); },
      [](auto, auto y) { return y; });
}

Tensor log(const Tensor& x) {
  dispatch(x.dtype(), [&]<class T>() {
    for (T v : x.data<T>()) {
      if (!(v > T(0))) {
        throw DomainError("log of non-positive value " + std::to_string(v));
      }
    }
  });
  return unary(
      "log", x, [](auto v) { return std::log(v); },
      [](auto xv, auto) { return 1 / xv; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](auto v) { return v > 0 ? v : decltype(v)(0); },
      [](auto xv, auto) { return xv > 0 ? decltype(xv)(1) : decltype(xv)(0); });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](auto v) { return std::fabs(v); },
      [](auto xv, auto) { return xv > 0 ? decltype(xv)(1) : (xv < 0 ? decltype(xv)(-1) : decltype(xv)(0)); });
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x,
      [](auto v) { return v / (1 + std::exp(-v)); },
      [](auto xv, auto) {
        const auto s = 1 / (1 + std::exp(-xv));
        return s * (1 + xv * (1 - s));
      });
}

Tensor sqrt(const Tensor& x) {
  dispatch(x.dtype(), [&]<class T>() {
    for (T v : x.data<T>()) {
      if (v < T(0)) throw DomainError("sqrt of negative value " + std::to_string(v));
    }
  });
  return unary(
      "sqrt", x, [](auto v) { return std::sqrt(v); },
      [](auto, auto y) { return 1 / (2 * y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](auto v) { return std::tanh(v); },
      [](auto, auto y) { return 1 - y * y; });
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({1}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    double acc = 0.0;
    for (T v : x.data<T>()) acc += v;
    out.mutable_data<T>()[0] = static_cast<T>(acc);
  });
  detail::check_finite(out, "sum");
  ImplPtr xi = x.impl_ptr();
  detail::record("sum", {&x}, out, [xi](TensorImpl& o) {
    if (!xi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const T g = o.grads<T>()[0];
      for (T& v : gbuf<T>(xi)) v += g;
    });
  });
  return out;
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  Tensor out = Tensor::zeros({1}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    double acc = 0.0;
    for (T v : x.data<T>()) acc += v;
    out.mutable_data<T>()[0] = static_cast<T>(acc / n);
  });
  detail::check_finite(out, "mean");
  ImplPtr xi = x.impl_ptr();
  detail::record("mean", {&x}, out, [xi, n](TensorImpl& o) {
    if (!xi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const T g = static_cast<T>(o.grads<T>()[0] / n);
      for (T& v : gbuf<T>(xi)) v += g;
    });
  });
  return out;
}

Tensor sum_last(const Tensor& x) {
  const auto n = x.dim(-1);
  const auto rows = x.numel() / n;
  Shape s(x.shape().begin(), x.shape().end() - 1);
  if (s.empty()) s = {1};
  Tensor out = Tensor::zeros(s, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto xs = x.data<T>();
    auto ys = out.mutable_data<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < n; ++j) acc += xs[r * n + j];
      ys[r] = static_cast<T>(acc);
    }
  });
  detail::check_finite(out, "sum_last");
  ImplPtr xi = x.impl_ptr();
  detail::record("sum_last", {&x}, out, [xi, rows, n](TensorImpl& o) {
    if (!xi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      auto gx = gbuf<T>(xi);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < n; ++j) gx[r * n + j] += g[r];
    });
  });
  return out;
}

Tensor softmax(const Tensor& logits, int axis) {
  const int ax = normalize_axis(logits, axis, "softmax");
  const AxisSplit sp = split_axis(logits.shape(), ax);
  Tensor out = Tensor::zeros(logits.shape(), logits.dtype());
  dispatch(logits.dtype(), [&]<class T>() {
    auto x = logits.data<T>();
    auto y = out.mutable_data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.extent * sp.inner + in;
        T mx = x[base];
        for (std::int64_t k = 1; k < sp.extent; ++k) mx = std::max(mx, x[base + k * sp.inner]);
        T total = 0;
        for (std::int64_t k = 0; k < sp.extent; ++k) {
          const T e = std::exp(x[base + k * sp.inner] - mx);
          y[base + k * sp.inner] = e;
          total += e;
        }
        const T inv = T(1) / total;
        for (std::int64_t k = 0; k < sp.extent; ++k) y[base + k * sp.inner] *= inv;
      }
    }
  });
  detail::check_finite(out, "softmax");
  ImplPtr li = logits.impl_ptr();
  detail::record("softmax", {&logits}, out, [li, sp](TensorImpl& o) {
    if (!li->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      const auto& p = o.values<T>();
      auto gx = gbuf<T>(li);
      for (std::int64_t ou = 0; ou < sp.outer; ++ou) {
        for (std::int64_t in = 0; in < sp.inner; ++in) {
          const std::int64_t base = ou * sp.extent * sp.inner + in;
          T dot = 0;
          for (std::int64_t k = 0; k < sp.extent; ++k) {
            dot += g[base + k * sp.inner] * p[base + k * sp.inner];
          }
          for (std::int64_t k = 0; k < sp.extent; ++k) {
            const auto i = base + k * sp.inner;
            gx[i] += p[i] * (g[i] - dot);
          }
        }
      }
    });
  });
  return out;
}

ArgmaxOneHot argmax_onehot(const Tensor& p) {
  require_rank(p, 2, "argmax_onehot");
  const auto b = p.dim(0), k = p.dim(1);
  ArgmaxOneHot r;
  r.indices.resize(static_cast<std::size_t>(b));
  r.onehot = Tensor::zeros({b, k}, p.dtype());
  dispatch(p.dtype(), [&]<class T>() {
    auto x = p.data<T>();
    auto oh = r.onehot.mutable_data<T>();
    for (std::int64_t i = 0; i < b; ++i) {
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < k; ++j) {
        if (x[i * k + j] > x[i * k + best]) best = j;
      }
      r.indices[static_cast<std::size_t>(i)] = best;
      oh[i * k + best] = T(1);
    }
  });
  return r;
}

namespace {
thread_local DetachLog* g_detach_log = nullptr;
}  // namespace

DetachLog* set_detach_log(DetachLog* log) {
  DetachLog* prev = g_detach_log;
  g_detach_log = log;
  return prev;
}

Tensor detach(const Tensor& x) {
  if (g_detach_log == nullptr) return x.clone();
  auto& log = *g_detach_log;
  if (!log.replaying) {
    log.values.push_back(x.clone());
    return log.values.back().clone();
  }
  if (log.cursor >= log.values.size() || log.values[log.cursor].shape() != x.shape()) {
    throw ContractError("detach replay diverged from the recorded forward pass");
  }
  return log.values[log.cursor++].clone();
}

Tensor straight_through(const Tensor& surrogate, const Tensor& value) {
  require_same_shape(surrogate, value, "straight_through");
  Tensor out = value.clone();
  if (g_detach_log != nullptr) {
    // Under a detach log the offset value − surrogate is the frozen quantity,
    // so replayed passes see surrogate + offset.
    Tensor offset = Tensor::zeros(value.shape(), value.dtype());
    dispatch(value.dtype(), [&]<class T>() {
      auto o = offset.mutable_data<T>();
      auto v = value.data<T>();
      auto s = surrogate.data<T>();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] - s[i];
    });
    offset = detach(offset);
    if (g_detach_log->replaying) {
      dispatch(value.dtype(), [&]<class T>() {
        auto o = out.mutable_data<T>();
        auto d = offset.data<T>();
        auto s = surrogate.data<T>();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = s[i] + d[i];
      });
    }
  }
  ImplPtr si = surrogate.impl_ptr();
  detail::record("straight_through", {&surrogate}, out, [si](TensorImpl& o) {
    if (!si->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      auto gs = gbuf<T>(si);
      for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
    });
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  Tensor out = x.clone();
  out.impl()->shape = std::move(shape);
  ImplPtr xi = x.impl_ptr();
  detail::record("reshape", {&x}, out, [xi](TensorImpl& o) {
    if (!xi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      auto gx = gbuf<T>(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  });
  return out;
}

Tensor gather_rows(const Tensor& table, const IndexVec& indices) {
  require_rank(table, 2, "gather_rows");
  const auto v = table.dim(0), d = table.dim(1);
  const auto n = static_cast<std::int64_t>(indices.size());
  if (n == 0) throw DimensionError("gather_rows: empty index list");
  for (auto i : indices) {
    if (i < 0 || i >= v) {
      throw DataError("gather_rows: index " + std::to_string(i) +
                      " outside [0, " + std::to_string(v) + ")");
    }
  }
  Tensor out = Tensor::zeros({n, d}, table.dtype());
  dispatch(table.dtype(), [&]<class T>() {
    auto src = table.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::int64_t r = 0; r < n; ++r) {
      std::memcpy(dst.data() + r * d, src.data() + indices[static_cast<std::size_t>(r)] * d,
                  sizeof(T) * static_cast<std::size_t>(d));
    }
  });
  ImplPtr ti = table.impl_ptr();
  detail::record("gather_rows", {&table}, out, [ti, indices, d](TensorImpl& o) {
    if (!ti->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      auto gt = gbuf<T>(ti);
      for (std::size_t r = 0; r < indices.size(); ++r) {
        const auto row = indices[r];
        for (std::int64_t j = 0; j < d; ++j) {
          gt[row * d + j] += g[static_cast<std::int64_t>(r) * d + j];
        }
      }
    });
  });
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  require_same_dtype(a, b, "concat");
  if (a.rank() != b.rank()) {
    throw DimensionError("concat: rank mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const int ax = normalize_axis(a, axis, "concat");
  for (int i = 0; i < a.rank(); ++i) {
    if (i != ax && a.dim(i) != b.dim(i)) {
      throw DimensionError("concat: shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()) + " differ off-axis");
    }
  }
  const AxisSplit sa = split_axis(a.shape(), ax);
  const AxisSplit sb = split_axis(b.shape(), ax);
  Shape s = a.shape();
  s[static_cast<std::size_t>(ax)] += b.dim(ax);
  const std::int64_t ca = sa.extent * sa.inner, cb = sb.extent * sb.inner;
  Tensor out = Tensor::zeros(s, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.mutable_data<T>();
    for (std::int64_t o = 0; o < sa.outer; ++o) {
      std::copy_n(x.data() + o * ca, ca, z.data() + o * (ca + cb));
      std::copy_n(y.data() + o * cb, cb, z.data() + o * (ca + cb) + ca);
    }
  });
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  const std::int64_t outer = sa.outer;
  detail::record("concat", {&a, &b}, out, [ai, bi, outer, ca, cb](TensorImpl& o) {
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      if (ai->requires_grad) {
        auto ga = gbuf<T>(ai);
        for (std::int64_t r = 0; r < outer; ++r)
          for (std::int64_t j = 0; j < ca; ++j) ga[r * ca + j] += g[r * (ca + cb) + j];
      }
      if (bi->requires_grad) {
        auto gb = gbuf<T>(bi);
        for (std::int64_t r = 0; r < outer; ++r)
          for (std::int64_t j = 0; j < cb; ++j) gb[r * cb + j] += g[r * (ca + cb) + ca + j];
      }
    });
  });
  return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  const int ax = normalize_axis(x, axis, "slice");
  const AxisSplit sp = split_axis(x.shape(), ax);
  if (start < 0 || length <= 0 || start + length > sp.extent) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") outside axis of " +
                         shape_str(x.shape()));
  }
  Shape s = x.shape();
  s[static_cast<std::size_t>(ax)] = length;
  Tensor out = Tensor::zeros(s, x.dtype());
  const std::int64_t src_chunk = sp.extent * sp.inner, dst_chunk = length * sp.inner;
  const std::int64_t offset = start * sp.inner;
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(src.data() + o * src_chunk + offset, dst_chunk, dst.data() + o * dst_chunk);
    }
  });
  ImplPtr xi = x.impl_ptr();
  const std::int64_t outer = sp.outer;
  detail::record("slice", {&x}, out,
                 [xi, outer, src_chunk, dst_chunk, offset](TensorImpl& o) {
                   if (!xi->requires_grad) return;
                   dispatch(o.dtype, [&]<class T>() {
                     const auto& g = o.grads<T>();
                     auto gx = gbuf<T>(xi);
                     for (std::int64_t r = 0; r < outer; ++r)
                       for (std::int64_t j = 0; j < dst_chunk; ++j)
                         gx[r * src_chunk + offset + j] += g[r * dst_chunk + j];
                   });
                 });
  return out;
}

Tensor expand_rows(const Tensor& v, std::int64_t times) {
  require_rank(v, 2, "expand_rows");
  if (times <= 0) throw DimensionError("expand_rows: non-positive repeat count");
  const auto b = v.dim(0), n = v.dim(1);
  Tensor out = Tensor::zeros({b, times, n}, v.dtype());
  dispatch(v.dtype(), [&]<class T>() {
    auto src = v.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t t = 0; t < times; ++t)
        std::copy_n(src.data() + i * n, n, dst.data() + (i * times + t) * n);
  });
  ImplPtr vi = v.impl_ptr();
  detail::record("expand_rows", {&v}, out, [vi, b, times, n](TensorImpl& o) {
    if (!vi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      auto gv = gbuf<T>(vi);
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t t = 0; t < times; ++t)
          for (std::int64_t j = 0; j < n; ++j) gv[i * n + j] += g[(i * times + t) * n + j];
    });
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, const IndexVec& targets) {
  require_rank(logits, 2, "cross_entropy");
  const auto n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
  }
  for (auto t : targets) {
    if (t < 0 || t >= k) {
      throw DataError("cross_entropy: target " + std::to_string(t) +
                      " outside [0, " + std::to_string(k) + ")");
    }
  }
  Tensor out = Tensor::zeros({1}, logits.dtype());
  dispatch(logits.dtype(), [&]<class T>() {
    auto x = logits.data<T>();
    double total = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
      const T* row = x.data() + r * k;
      T mx = row[0];
      for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double s = 0.0;
      for (std::int64_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j] - mx));
      total += std::log(s) + static_cast<double>(mx) -
               static_cast<double>(row[targets[static_cast<std::size_t>(r)]]);
    }
    out.mutable_data<T>()[0] = static_cast<T>(total / static_cast<double>(n));
  });
  detail::check_finite(out, "cross_entropy");
  ImplPtr li = logits.impl_ptr();
  detail::record("cross_entropy", {&logits}, out, [li, targets, n, k](TensorImpl& o) {
    if (!li->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const T g = o.grads<T>()[0] / static_cast<T>(n);
      const auto& x = li->values<T>();
      auto gx = gbuf<T>(li);
      for (std::int64_t r = 0; r < n; ++r) {
        const T* row = x.data() + r * k;
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T s = 0;
        for (std::int64_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
        for (std::int64_t j = 0; j < k; ++j) {
          gx[r * k + j] += g * std::exp(row[j] - mx) / s;
        }
        gx[r * k + targets[static_cast<std::size_t>(r)]] -= g;
      }
    });
  });
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw DomainError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(x.numel()));
  for (auto& m : *mask) m = rng.uniform() >= rate ? 1 : 0;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto xs = x.data<T>();
    auto ys = out.mutable_data<T>();
    const T s = static_cast<T>(keep_scale);
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = (*mask)[i] ? xs[i] * s : T(0);
  });
  ImplPtr xi = x.impl_ptr();
  detail::record("dropout", {&x}, out, [xi, mask, keep_scale](TensorImpl& o) {
    if (!xi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const auto& g = o.grads<T>();
      auto gx = gbuf<T>(xi);
      const T s = static_cast<T>(keep_scale);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if ((*mask)[i]) gx[i] += g[i] * s;
      }
    });
  });
  return out;
}

}  // namespace ibq::ops
