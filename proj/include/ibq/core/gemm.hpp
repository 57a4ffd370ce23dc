#pragma once

#include <cstdint>

namespace ibq::gemm {

enum class Trans : bool { no = false, yes = true };

// Row-major C[M×N] (+)= op(A)·op(B), where op(A) is M×K and op(B) is K×N.
// lda/ldb/ldc are row strides of the stored (untransposed) matrices.
// Summation over K runs in a fixed order independent of thread count, so
// results are bit-stable for identical shapes.
void sgemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k,
           const float* a, std::int64_t lda, const float* b, std::int64_t ldb,
           float* c, std::int64_t ldc, bool accumulate);

void dgemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k,
           const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
           double* c, std::int64_t ldc, bool accumulate);

template <class T>
inline void gemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n,
                 std::int64_t k, const T* a, std::int64_t lda, const T* b,
                 std::int64_t ldb, T* c, std::int64_t ldc, bool accumulate) {
  if constexpr (sizeof(T) == sizeof(float)) {
    sgemm(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  } else {
    dgemm(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  }
}

}  // namespace ibq::gemm
