#include "ibq/core/gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace ibq::gemm {
namespace {

typedef float v16f __attribute__((vector_size(64)));
typedef double v8d __attribute__((vector_size(64)));

template <class T>
struct Simd;

template <>
struct Simd<float> {
  using V = v16f;
  static constexpr int kLanes = 16;
};

template <>
struct Simd<double> {
  using V = v8d;
  static constexpr int kLanes = 8;
};

constexpr std::int64_t kMr = 6;
constexpr std::int64_t kKc = 256;
constexpr std::int64_t kMc = 72;
constexpr std::int64_t kNc = 2048;

template <class T>
struct Workspace {
  using V = typename Simd<T>::V;
  std::vector<V> a_pack;
  std::vector<V> b_pack;

  T* a(std::size_t n) {
    const std::size_t vecs = (n + Simd<T>::kLanes - 1) / Simd<T>::kLanes;
    if (a_pack.size() < vecs) a_pack.resize(vecs);
    return reinterpret_cast<T*>(a_pack.data());
  }
  T* b(std::size_t n) {
    const std::size_t vecs = (n + Simd<T>::kLanes - 1) / Simd<T>::kLanes;
    if (b_pack.size() < vecs) b_pack.resize(vecs);
    return reinterpret_cast<T*>(b_pack.data());
  }
};

template <class T>
Workspace<T>& workspace() {
  thread_local Workspace<T> ws;
  return ws;
}

// Packs op(B)[pc:pc+kc, jc:jc+nc] into column panels of width kNr, each laid
// out as kc rows of kNr contiguous values, zero padded past nc.
template <class T>
void pack_b(Trans tb, const T* b, std::int64_t ldb, std::int64_t pc,
            std::int64_t jc, std::int64_t kc, std::int64_t nc, T* out) {
  constexpr std::int64_t kNr = 2 * Simd<T>::kLanes;
  for (std::int64_t j0 = 0; j0 < nc; j0 += kNr) {
    const std::int64_t nr = std::min(kNr, nc - j0);
    T* panel = out + j0 * kc;
    for (std::int64_t p = 0; p < kc; ++p) {
      T* row = panel + p * kNr;
      if (tb == Trans::no) {
        const T* src = b + (pc + p) * ldb + jc + j0;
        std::memcpy(row, src, sizeof(T) * nr);
      } else {
        for (std::int64_t j = 0; j < nr; ++j) {
          row[j] = b[(jc + j0 + j) * ldb + pc + p];
        }
      }
      for (std::int64_t j = nr; j < kNr; ++j) row[j] = T(0);
    }
  }
}

// Packs op(A)[ic:ic+mc, pc:pc+kc] into row panels of height kMr.
template <class T>
void pack_a(Trans ta, const T* a, std::int64_t lda, std::int64_t ic,
            std::int64_t pc, std::int64_t mc, std::int64_t kc, T* out) {
  for (std::int64_t i0 = 0; i0 < mc; i0 += kMr) {
    const std::int64_t mr = std::min(kMr, mc - i0);
    T* panel = out + i0 * kc;
    for (std::int64_t p = 0; p < kc; ++p) {
      T* col = panel + p * kMr;
      for (std::int64_t i = 0; i < mr; ++i) {
        col[i] = ta == Trans::no ? a[(ic + i0 + i) * lda + pc + p]
                                 : a[(pc + p) * lda + ic + i0 + i];
      }
      for (std::int64_t i = mr; i < kMr; ++i) col[i] = T(0);
    }
  }
}

template <class T>
void micro_kernel(std::int64_t kc, const T* ap, const T* bp, T* c,
                  std::int64_t ldc, std::int64_t mr, std::int64_t nr,
                  bool overwrite) {
  using V = typename Simd<T>::V;
  constexpr int kL = Simd<T>::kLanes;
  constexpr std::int64_t kNr = 2 * kL;
  V acc[kMr][2];
  for (auto& row : acc) {
    row[0] = V{};
    row[1] = V{};
  }
  const V* bv = reinterpret_cast<const V*>(bp);
  for (std::int64_t p = 0; p < kc; ++p) {
    const V b0 = bv[2 * p];
    const V b1 = bv[2 * p + 1];
    const T* a = ap + p * kMr;
#pragma GCC unroll 6
    for (int r = 0; r < kMr; ++r) {
      const V av = V{} + a[r];
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
    }
  }
  if (mr == kMr && nr == kNr) {
    for (int r = 0; r < kMr; ++r) {
      T* out = c + r * ldc;
      V c0, c1;
      if (overwrite) {
        c0 = acc[r][0];
        c1 = acc[r][1];
      } else {
        std::memcpy(&c0, out, sizeof(V));
        std::memcpy(&c1, out + kL, sizeof(V));
        c0 += acc[r][0];
        c1 += acc[r][1];
      }
      std::memcpy(out, &c0, sizeof(V));
      std::memcpy(out + kL, &c1, sizeof(V));
    }
    return;
  }
  alignas(64) T tile[kMr][kNr];
  for (int r = 0; r < kMr; ++r) {
    std::memcpy(&tile[r][0], &acc[r][0], sizeof(V));
    std::memcpy(&tile[r][kL], &acc[r][1], sizeof(V));
  }
  for (std::int64_t r = 0; r < mr; ++r) {
    T* out = c + r * ldc;
    for (std::int64_t j = 0; j < nr; ++j) {
      out[j] = overwrite ? tile[r][j] : out[j] + tile[r][j];
    }
  }
}

template <class T>
void gemm_impl(Trans ta, Trans tb, std::int64_t m, std::int64_t n,
               std::int64_t k, const T* a, std::int64_t lda, const T* b,
               std::int64_t ldb, T* c, std::int64_t ldc, bool accumulate) {
  constexpr std::int64_t kNr = 2 * Simd<T>::kLanes;
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate) {
      for (std::int64_t i = 0; i < m; ++i) {
        std::fill(c + i * ldc, c + i * ldc + n, T(0));
      }
    }
    return;
  }
  auto& ws = workspace<T>();
  for (std::int64_t jc = 0; jc < n; jc += kNc) {
    const std::int64_t nc = std::min(kNc, n - jc);
    const std::int64_t nc_pad = (nc + kNr - 1) / kNr * kNr;
    for (std::int64_t pc = 0; pc < k; pc += kKc) {
      const std::int64_t kc = std::min(kKc, k - pc);
      T* bp = ws.b(static_cast<std::size_t>(nc_pad * kc));
      pack_b(tb, b, ldb, pc, jc, kc, nc, bp);
      const bool overwrite = !accumulate && pc == 0;
      for (std::int64_t ic = 0; ic < m; ic += kMc) {
        const std::int64_t mc = std::min(kMc, m - ic);
        const std::int64_t mc_pad = (mc + kMr - 1) / kMr * kMr;
        T* ap = ws.a(static_cast<std::size_t>(mc_pad * kc));
        pack_a(ta, a, lda, ic, pc, mc, kc, ap);
        for (std::int64_t j0 = 0; j0 < nc; j0 += kNr) {
          const std::int64_t nr = std::min(kNr, nc - j0);
          for (std::int64_t i0 = 0; i0 < mc; i0 += kMr) {
            const std::int64_t mr = std::min(kMr, mc - i0);
            micro_kernel<T>(kc, ap + i0 * kc, bp + j0 * kc,
                            c + (ic + i0) * ldc + jc + j0, ldc, mr, nr,
                            overwrite);
          }
        }
      }
    }
  }
}

}  // namespace

void sgemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k,
           const float* a, std::int64_t lda, const float* b, std::int64_t ldb,
           float* c, std::int64_t ldc, bool accumulate) {
  gemm_impl<float>(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

void dgemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k,
           const double* a, std::int64_t lda, const double* b,
           std::int64_t ldb, double* c, std::int64_t ldc, bool accumulate) {
  gemm_impl<double>(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

}  // namespace ibq::gemm
