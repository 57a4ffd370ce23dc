#include "ibq/core/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ibq/core/gemm.hpp"
#include "ibq/core/tape.hpp"

namespace ibq::nn {
namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using gemm::Trans;

template <class T>
std::span<T> gbuf(const ImplPtr& p) {
  return p->grad_buffer<T>();
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

struct ConvGeom {
  std::int64_t batch, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
  std::int64_t patch() const { return cin * kh * kw; }
  std::int64_t out_pixels() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Output columns ox whose input column ox·stride − pad + kj lies inside the image.
std::pair<std::int64_t, std::int64_t> valid_columns(const ConvGeom& g, std::int64_t kj) {
  const std::int64_t off = kj - g.pad;
  std::int64_t lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  std::int64_t hi = g.w - off <= 0 ? 0 : (g.w - off + g.stride - 1) / g.stride;
  hi = std::min(hi, g.wo);
  lo = std::min(lo, hi);
  return {lo, hi};
}

template <class T>
void im2col(const ConvGeom& g, const T* x, T* cols) {
  const std::int64_t n = g.out_pixels();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * n;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + iy) * g.w - g.pad + kj;
          const auto [lo, hi] = valid_columns(g, kj);
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
    }
  }
}

template <class T>
void col2im_add(const ConvGeom& g, const T* cols, T* dx) {
  const std::int64_t n = g.out_pixels();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * n;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = dx + (c * g.h + iy) * g.w - g.pad + kj;
          const T* src = row + oy * g.wo;
          const auto [lo, hi] = valid_columns(g, kj);
          for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(weight.rank() == 2, "linear: weight must be 2-D, got " + shape_str(weight.shape()));
  const auto in = weight.dim(0), out_dim = weight.dim(1);
  require(x.dim(-1) == in, "linear: input " + shape_str(x.shape()) +
                               " incompatible with weight " + shape_str(weight.shape()));
  if (x.dtype() != weight.dtype()) throw ContractError("linear: dtype mismatch");
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(bias.rank() == 1 && bias.dim(0) == out_dim,
            "linear: bias " + shape_str(bias.shape()) + " does not match " +
                shape_str(weight.shape()));
  }
  const auto rows = x.numel() / in;
  Shape s = x.shape();
  s.back() = out_dim;
  Tensor out = Tensor::zeros(s, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    T* y = out.mutable_data<T>().data();
    gemm::gemm<T>(Trans::no, Trans::no, rows, out_dim, in, x.data<T>().data(), in,
                  weight.data<T>().data(), out_dim, y, out_dim, false);
    if (has_bias) {
      auto b = bias.data<T>();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < out_dim; ++j) y[r * out_dim + j] += b[j];
    }
  });
  detail::check_finite(out, "linear");
  ImplPtr xi = x.impl_ptr(), wi = weight.impl_ptr();
  ImplPtr bi = has_bias ? bias.impl_ptr() : nullptr;
  detail::record("linear", {&x, &weight, has_bias ? &bias : nullptr}, out,
                 [xi, wi, bi, rows, in, out_dim](TensorImpl& o) {
                   dispatch(o.dtype, [&]<class T>() {
                     const T* g = o.grads<T>().data();
                     if (xi->requires_grad) {
                       gemm::gemm<T>(Trans::no, Trans::yes, rows, in, out_dim, g, out_dim,
                                     wi->values<T>().data(), out_dim,
                                     gbuf<T>(xi).data(), in, true);
                     }
                     if (wi->requires_grad) {
                       gemm::gemm<T>(Trans::yes, Trans::no, in, out_dim, rows,
                                     xi->values<T>().data(), in, g, out_dim,
                                     gbuf<T>(wi).data(), out_dim, true);
                     }
                     if (bi && bi->requires_grad) {
                       auto gb = gbuf<T>(bi);
                       for (std::int64_t r = 0; r < rows; ++r)
                         for (std::int64_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
                     }
                   });
                 });
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
  require(x.rank() == 4, "conv2d: input must be NCHW, got " + shape_str(x.shape()));
  require(weight.rank() == 4, "conv2d: weight must be [Cout, Cin, kh, kw], got " +
                                  shape_str(weight.shape()));
  require(x.dim(1) == weight.dim(1), "conv2d: input channels of " + shape_str(x.shape()) +
                                         " differ from weight " + shape_str(weight.shape()));
  if (x.dtype() != weight.dtype()) throw ContractError("conv2d: dtype mismatch");
  if (stride < 1 || padding < 0) throw ContractError("conv2d: invalid stride/padding");
  ConvGeom g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(bias.rank() == 1 && bias.dim(0) == g.cout, "conv2d: bias shape mismatch");
  }
  Tensor out = Tensor::zeros({g.batch, g.cout, g.ho, g.wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* xs = x.data<T>().data();
    const T* ws = weight.data<T>().data();
    T* ys = out.mutable_data<T>().data();
    const std::int64_t n = g.out_pixels(), kdim = g.patch();
    std::vector<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(kdim * n));
    for (std::int64_t b = 0; b < g.batch; ++b) {
      const T* xb = xs + b * g.cin * g.h * g.w;
      const T* src = xb;
      if (!g.pointwise()) {
        im2col(g, xb, cols.data());
        src = cols.data();
      }
      T* yb = ys + b * g.cout * n;
      gemm::gemm<T>(Trans::no, Trans::no, g.cout, n, kdim, ws, kdim, src, n, yb, n, false);
      if (has_bias) {
        auto bs = bias.data<T>();
        for (std::int64_t c = 0; c < g.cout; ++c)
          for (std::int64_t p = 0; p < n; ++p) yb[c * n + p] += bs[c];
      }
    }
  });
  detail::check_finite(out, "conv2d");
  ImplPtr xi = x.impl_ptr(), wi = weight.impl_ptr();
  ImplPtr bi = has_bias ? bias.impl_ptr() : nullptr;
  detail::record("conv2d", {&x, &weight, has_bias ? &bias : nullptr}, out,
                 [xi, wi, bi, g](TensorImpl& o) {
                   dispatch(o.dtype, [&]<class T>() {
                     const T* gy = o.grads<T>().data();
                     const T* xs = xi->values<T>().data();
                     const T* ws = wi->values<T>().data();
                     const std::int64_t n = g.out_pixels(), kdim = g.patch();
                     const std::int64_t in_size = g.cin * g.h * g.w;
                     std::vector<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(kdim * n));
                     std::vector<T> dcols(g.pointwise() ? 0 : static_cast<std::size_t>(kdim * n));
                     T* gw = wi->requires_grad ? gbuf<T>(wi).data() : nullptr;
                     T* gx = xi->requires_grad ? gbuf<T>(xi).data() : nullptr;
                     for (std::int64_t b = 0; b < g.batch; ++b) {
                       const T* gyb = gy + b * g.cout * n;
                       const T* xb = xs + b * in_size;
                       if (gw) {
                         const T* src = xb;
                         if (!g.pointwise()) {
                           im2col(g, xb, cols.data());
                           src = cols.data();
                         }
                         gemm::gemm<T>(Trans::no, Trans::yes, g.cout, kdim, n, gyb, n, src, n,
                                       gw, kdim, true);
                       }
                       if (gx) {
                         if (g.pointwise()) {
                           gemm::gemm<T>(Trans::yes, Trans::no, kdim, n, g.cout, ws, kdim, gyb,
                                         n, gx + b * in_size, n, true);
                         } else {
                           gemm::gemm<T>(Trans::yes, Trans::no, kdim, n, g.cout, ws, kdim, gyb,
                                         n, dcols.data(), n, false);
                           col2im_add(g, dcols.data(), gx + b * in_size);
                         }
                       }
                     }
                     if (bi && bi->requires_grad) {
                       auto gb = gbuf<T>(bi);
                       for (std::int64_t b = 0; b < g.batch; ++b)
                         for (std::int64_t c = 0; c < g.cout; ++c) {
                           const T* row = gy + (b * g.cout + c) * n;
                           T acc = 0;
                           for (std::int64_t p = 0; p < n; ++p) acc += row[p];
                           gb[c] += acc;
                         }
                     }
                   });
                 });
  return out;
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  require(x.rank() == 4, "group_norm: input must be NCHW, got " + shape_str(x.shape()));
  const auto b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups <= 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  require(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
          "group_norm: affine parameters must have shape (" + std::to_string(c) + ")");
  const std::int64_t cpg = c / groups;
  const std::int64_t gsize = cpg * hw;
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(2 * b * groups));
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* xs = x.data<T>().data();
    const T* gm = gamma.data<T>().data();
    const T* bt = beta.data<T>().data();
    T* ys = out.mutable_data<T>().data();
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t gi = 0; gi < groups; ++gi) {
        const T* src = xs + (i * c + gi * cpg) * hw;
        double s = 0.0;
        for (std::int64_t j = 0; j < gsize; ++j) s += src[j];
        const double mu = s / static_cast<double>(gsize);
        double v = 0.0;
        for (std::int64_t j = 0; j < gsize; ++j) {
          const double d = src[j] - mu;
          v += d * d;
        }
        const double rstd = 1.0 / std::sqrt(v / static_cast<double>(gsize) + eps);
        (*stats)[static_cast<std::size_t>(2 * (i * groups + gi))] = mu;
        (*stats)[static_cast<std::size_t>(2 * (i * groups + gi) + 1)] = rstd;
        T* dst = ys + (i * c + gi * cpg) * hw;
        for (std::int64_t ch = 0; ch < cpg; ++ch) {
          const std::int64_t cc = gi * cpg + ch;
          const T a = static_cast<T>(rstd) * gm[cc];
          const T off = bt[cc] - static_cast<T>(mu) * a;
          for (std::int64_t p = 0; p < hw; ++p) dst[ch * hw + p] = src[ch * hw + p] * a + off;
        }
      }
    }
  });
  detail::check_finite(out, "group_norm");
  ImplPtr xi = x.impl_ptr(), gi_ = gamma.impl_ptr(), bi = beta.impl_ptr();
  detail::record("group_norm", {&x, &gamma, &beta}, out,
                 [xi, gi_, bi, stats, b, c, hw, groups, cpg, gsize](TensorImpl& o) {
                   dispatch(o.dtype, [&]<class T>() {
                     const T* gy = o.grads<T>().data();
                     const T* xs = xi->values<T>().data();
                     const T* gm = gi_->values<T>().data();
                     T* gx = xi->requires_grad ? gbuf<T>(xi).data() : nullptr;
                     T* gg = gi_->requires_grad ? gbuf<T>(gi_).data() : nullptr;
                     T* gbt = bi->requires_grad ? gbuf<T>(bi).data() : nullptr;
                     for (std::int64_t i = 0; i < b; ++i) {
                       for (std::int64_t g = 0; g < groups; ++g) {
                         const double mu = (*stats)[static_cast<std::size_t>(2 * (i * groups + g))];
                         const double rstd = (*stats)[static_cast<std::size_t>(2 * (i * groups + g) + 1)];
                         const std::int64_t base = (i * c + g * cpg) * hw;
                         double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                         for (std::int64_t ch = 0; ch < cpg; ++ch) {
                           const std::int64_t cc = g * cpg + ch;
                           double dg = 0.0, db = 0.0;
                           for (std::int64_t p = 0; p < hw; ++p) {
                             const std::int64_t idx = base + ch * hw + p;
                             const double xhat = (xs[idx] - mu) * rstd;
                             const double dy = gy[idx];
                             dg += dy * xhat;
                             db += dy;
                             const double dxhat = dy * gm[cc];
                             sum_dxhat += dxhat;
                             sum_dxhat_xhat += dxhat * xhat;
                           }
                           if (gg) gg[cc] += static_cast<T>(dg);
                           if (gbt) gbt[cc] += static_cast<T>(db);
                         }
                         if (!gx) continue;
                         const double m1 = sum_dxhat / static_cast<double>(gsize);
                         const double m2 = sum_dxhat_xhat / static_cast<double>(gsize);
                         for (std::int64_t ch = 0; ch < cpg; ++ch) {
                           const std::int64_t cc = g * cpg + ch;
                           for (std::int64_t p = 0; p < hw; ++p) {
                             const std::int64_t idx = base + ch * hw + p;
                             const double xhat = (xs[idx] - mu) * rstd;
                             const double dxhat = static_cast<double>(gy[idx]) * gm[cc];
                             gx[idx] += static_cast<T>(rstd * (dxhat - m1 - xhat * m2));
                           }
                         }
                       }
                     }
                   });
                 });
  return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
  require(x.rank() == 4, "upsample_nearest2x: input must be NCHW, got " + shape_str(x.shape()));
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1), 2 * h, 2 * w}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* xs = x.data<T>().data();
    T* ys = out.mutable_data<T>().data();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t i = 0; i < 2 * h; ++i) {
        const T* src = xs + (p * h + i / 2) * w;
        T* dst = ys + (p * 2 * h + i) * 2 * w;
        for (std::int64_t j = 0; j < 2 * w; ++j) dst[j] = src[j / 2];
      }
  });
  ImplPtr xi = x.impl_ptr();
  detail::record("upsample_nearest2x", {&x}, out, [xi, planes, h, w](TensorImpl& o) {
    if (!xi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      const T* gy = o.grads<T>().data();
      T* gx = gbuf<T>(xi).data();
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < 2 * h; ++i) {
          const T* src = gy + (p * 2 * h + i) * 2 * w;
          T* dst = gx + (p * h + i / 2) * w;
          for (std::int64_t j = 0; j < 2 * w; ++j) dst[j / 2] += src[j];
        }
    });
  });
  return out;
}

namespace {

// Moves between [B, C, S] and [B, S, C]; to_rows selects the direction.
template <class T>
void permute_bcs(const T* src, T* dst, std::int64_t B, std::int64_t C, std::int64_t S, bool to_rows,
                 bool accumulate) {
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t s = 0; s < S; ++s) {
        const std::int64_t nchw = (b * C + c) * S + s, rows = (b * S + s) * C + c;
        T& d = dst[to_rows ? rows : nchw];
        const T v = src[to_rows ? nchw : rows];
        d = accumulate ? d + v : v;
      }
}

}  // namespace

Tensor to_rows(const Tensor& x) {
  require(x.rank() == 4, "to_rows: input must be NCHW, got " + shape_str(x.shape()));
  const auto B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({B * S, C}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    permute_bcs(x.data<T>().data(), out.mutable_data<T>().data(), B, C, S, true, false);
  });
  ImplPtr xi = x.impl_ptr();
  detail::record("to_rows", {&x}, out, [xi, B, C, S](TensorImpl& o) {
    if (!xi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      permute_bcs(o.grads<T>().data(), gbuf<T>(xi).data(), B, C, S, false, true);
    });
  });
  return out;
}

Tensor from_rows(const Tensor& rows, std::int64_t batch, std::int64_t h, std::int64_t w) {
  require(rows.rank() == 2 && rows.dim(0) == batch * h * w,
          "from_rows: " + shape_str(rows.shape()) + " does not hold " + std::to_string(batch) +
              "x" + std::to_string(h) + "x" + std::to_string(w) + " positions");
  const auto C = rows.dim(1), S = h * w;
  Tensor out = Tensor::zeros({batch, C, h, w}, rows.dtype());
  dispatch(rows.dtype(), [&]<class T>() {
    permute_bcs(rows.data<T>().data(), out.mutable_data<T>().data(), batch, C, S, false, false);
  });
  ImplPtr ri = rows.impl_ptr();
  detail::record("from_rows", {&rows}, out, [ri, batch, C, S](TensorImpl& o) {
    if (!ri->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      permute_bcs(o.grads<T>().data(), gbuf<T>(ri).data(), batch, C, S, true, true);
    });
  });
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  const auto n = x.dim(-1);
  require(gain.rank() == 1 && gain.dim(0) == n,
          "rmsnorm: gain " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
  if (x.dtype() != gain.dtype()) throw ContractError("rmsnorm: dtype mismatch");
  const auto rows = x.numel() / n;
  auto rinv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* xs = x.data<T>().data();
    const T* gs = gain.data<T>().data();
    T* ys = out.mutable_data<T>().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      double ms = 0.0;
      for (std::int64_t j = 0; j < n; ++j) ms += static_cast<double>(xs[r * n + j]) * xs[r * n + j];
      const double ri = 1.0 / std::sqrt(ms / static_cast<double>(n) + eps);
      (*rinv)[static_cast<std::size_t>(r)] = ri;
      for (std::int64_t j = 0; j < n; ++j) {
        ys[r * n + j] = static_cast<T>(xs[r * n + j] * ri) * gs[j];
      }
    }
  });
  detail::check_finite(out, "rmsnorm");
  ImplPtr xi = x.impl_ptr(), gi = gain.impl_ptr();
  detail::record("rmsnorm", {&x, &gain}, out, [xi, gi, rinv, rows, n](TensorImpl& o) {
    dispatch(o.dtype, [&]<class T>() {
      const T* gy = o.grads<T>().data();
      const T* xs = xi->values<T>().data();
      const T* gs = gi->values<T>().data();
      T* gx = xi->requires_grad ? gbuf<T>(xi).data() : nullptr;
      T* gg = gi->requires_grad ? gbuf<T>(gi).data() : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        const double ri = (*rinv)[static_cast<std::size_t>(r)];
        double dot = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
          const double u = xs[r * n + j] * ri;
          const double du = static_cast<double>(gy[r * n + j]) * gs[j];
          dot += du * u;
          if (gg) gg[j] += static_cast<T>(gy[r * n + j] * u);
        }
        if (!gx) continue;
        const double m = dot / static_cast<double>(n);
        for (std::int64_t j = 0; j < n; ++j) {
          const double u = xs[r * n + j] * ri;
          const double du = static_cast<double>(gy[r * n + j]) * gs[j];
          gx[r * n + j] += static_cast<T>(ri * (du - u * m));
        }
      }
    });
  });
  return out;
}

Tensor rope(const Tensor& x, int heads, const std::vector<std::int64_t>& positions) {
  require(x.rank() == 3, "rope: input must be [B, T, w], got " + shape_str(x.shape()));
  const auto b = x.dim(0), t = x.dim(1), w = x.dim(2);
  if (heads <= 0 || w % heads != 0) {
    throw ConfigError("rope: width " + std::to_string(w) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::int64_t dh = w / heads;
  if (dh % 2 != 0) {
    throw ConfigError("rope: head dimension " + std::to_string(dh) + " must be even");
  }
  require(static_cast<std::int64_t>(positions.size()) == t,
          "rope: " + std::to_string(positions.size()) + " positions for length " +
              std::to_string(t));
  // cos/sin table [T × dh/2], shared between forward and adjoint.
  auto table = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t * dh));
  for (std::int64_t p = 0; p < t; ++p) {
    for (std::int64_t i = 0; i < dh / 2; ++i) {
      const double theta = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double ang = static_cast<double>(positions[static_cast<std::size_t>(p)]) * theta;
      (*table)[static_cast<std::size_t>(p * dh + 2 * i)] = std::cos(ang);
      (*table)[static_cast<std::size_t>(p * dh + 2 * i + 1)] = std::sin(ang);
    }
  }
  auto apply = [b, t, w, dh, table]<class T>(const T* src, T* dst, double sign, bool add) {
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t p = 0; p < t; ++p) {
        const double* cs = table->data() + p * dh;
        for (std::int64_t j = 0; j < w; j += 2) {
          const std::int64_t pair = (j % dh) / 2;
          const T c = static_cast<T>(cs[2 * pair]);
          const T s = static_cast<T>(sign * cs[2 * pair + 1]);
          const std::int64_t idx = (i * t + p) * w + j;
          const T a0 = src[idx], a1 = src[idx + 1];
          const T r0 = a0 * c - a1 * s;
          const T r1 = a0 * s + a1 * c;
          if (add) {
            dst[idx] += r0;
            dst[idx + 1] += r1;
          } else {
            dst[idx] = r0;
            dst[idx + 1] = r1;
          }
        }
      }
  };
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    apply.template operator()<T>(x.data<T>().data(), out.mutable_data<T>().data(), 1.0, false);
  });
  ImplPtr xi = x.impl_ptr();
  detail::record("rope", {&x}, out, [xi, apply](TensorImpl& o) {
    if (!xi->requires_grad) return;
    dispatch(o.dtype, [&]<class T>() {
      // The adjoint of a rotation is the inverse rotation.
      apply.template operator()<T>(o.grads<T>().data(), gbuf<T>(xi).data(), -1.0, true);
    });
  });
  return out;
}

Tensor rope(const Tensor& x, int heads) {
  std::vector<std::int64_t> pos(static_cast<std::size_t>(x.dim(1)));
  std::iota(pos.begin(), pos.end(), 0);
  return rope(x, heads, pos);
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  require(q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
          "causal_attention: q/k/v must share shape [B, T, w], got " + shape_str(q.shape()) +
              ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
  if (q.dtype() != k.dtype() || q.dtype() != v.dtype()) {
    throw ContractError("causal_attention: dtype mismatch");
  }
  const auto b = q.dim(0), t = q.dim(1), w = q.dim(2);
  if (heads <= 0 || w % heads != 0) {
    throw ConfigError("causal_attention: width " + std::to_string(w) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::int64_t dh = w / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out = Tensor::zeros(q.shape(), q.dtype());
  // Attention probabilities [B, heads, T, T], zero above the diagonal.
  auto probs = std::make_shared<Tensor>(Tensor::zeros({b, heads, t, t}, q.dtype()));
  dispatch(q.dtype(), [&]<class T>() {
    const T* qs = q.data<T>().data();
    const T* ks = k.data<T>().data();
    const T* vs = v.data<T>().data();
    T* ys = out.mutable_data<T>().data();
    T* ps = probs->mutable_data<T>().data();
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t off = i * t * w + h * dh;
        T* p = ps + (i * heads + h) * t * t;
        gemm::gemm<T>(Trans::no, Trans::yes, t, t, dh, qs + off, w, ks + off, w, p, t, false);
        for (std::int64_t r = 0; r < t; ++r) {
          T* row = p + r * t;
          T mx = row[0] * static_cast<T>(scale);
          for (std::int64_t c = 0; c <= r; ++c) {
            row[c] *= static_cast<T>(scale);
            mx = std::max(mx, row[c]);
          }
          T total = 0;
          for (std::int64_t c = 0; c <= r; ++c) {
            row[c] = std::exp(row[c] - mx);
            total += row[c];
          }
          const T inv = T(1) / total;
          for (std::int64_t c = 0; c <= r; ++c) row[c] *= inv;
          for (std::int64_t c = r + 1; c < t; ++c) row[c] = T(0);
        }
        gemm::gemm<T>(Trans::no, Trans::no, t, dh, t, p, t, vs + off, w, ys + off, w, false);
      }
    }
  });
  detail::check_finite(out, "causal_attention");
  ImplPtr qi = q.impl_ptr(), ki = k.impl_ptr(), vi = v.impl_ptr();
  detail::record("causal_attention", {&q, &k, &v}, out,
                 [qi, ki, vi, probs, b, t, w, heads, dh, scale](TensorImpl& o) {
                   dispatch(o.dtype, [&]<class T>() {
                     const T* gy = o.grads<T>().data();
                     const T* qs = qi->values<T>().data();
                     const T* ks = ki->values<T>().data();
                     const T* vs = vi->values<T>().data();
                     const T* ps = probs->template data<T>().data();
                     T* gq = qi->requires_grad ? gbuf<T>(qi).data() : nullptr;
                     T* gk = ki->requires_grad ? gbuf<T>(ki).data() : nullptr;
                     T* gv = vi->requires_grad ? gbuf<T>(vi).data() : nullptr;
                     std::vector<T> dp(static_cast<std::size_t>(t * t));
                     for (std::int64_t i = 0; i < b; ++i) {
                       for (std::int64_t h = 0; h < heads; ++h) {
                         const std::int64_t off = i * t * w + h * dh;
                         const T* p = ps + (i * heads + h) * t * t;
                         if (gv) {
                           gemm::gemm<T>(Trans::yes, Trans::no, t, dh, t, p, t, gy + off, w,
                                         gv + off, w, true);
                         }
                         if (!gq && !gk) continue;
                         gemm::gemm<T>(Trans::no, Trans::yes, t, t, dh, gy + off, w, vs + off, w,
                                       dp.data(), t, false);
                         for (std::int64_t r = 0; r < t; ++r) {
                           T* drow = dp.data() + r * t;
                           const T* prow = p + r * t;
                           T dot = 0;
                           for (std::int64_t c = 0; c <= r; ++c) dot += drow[c] * prow[c];
                           for (std::int64_t c = 0; c <= r; ++c) {
                             drow[c] = prow[c] * (drow[c] - dot) * static_cast<T>(scale);
                           }
                           for (std::int64_t c = r + 1; c < t; ++c) drow[c] = T(0);
                         }
                         if (gq) {
                           gemm::gemm<T>(Trans::no, Trans::no, t, dh, t, dp.data(), t, ks + off,
                                         w, gq + off, w, true);
                         }
                         if (gk) {
                           gemm::gemm<T>(Trans::yes, Trans::no, t, dh, t, dp.data(), t, qs + off,
                                         w, gk + off, w, true);
                         }
                       }
                     }
                   });
                 });
  return out;
}

}  // namespace ibq::nn
