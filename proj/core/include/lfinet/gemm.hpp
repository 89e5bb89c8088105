#pragma once

#include "lfinet/common.hpp"

namespace lfinet {

// Row-major C[m x n] = alpha * op(A) * op(B) + beta * C. Backed by BLAS,
// pinned to a single thread; callers parallelize at a coarser grain so
// results stay bit-deterministic for any worker count.
void gemm(bool trans_a, bool trans_b, index_t m, index_t n, index_t k, float alpha,
          const float* a, index_t lda, const float* b, index_t ldb, float beta, float* c,
          index_t ldc);
void gemm(bool trans_a, bool trans_b, index_t m, index_t n, index_t k, double alpha,
          const double* a, index_t lda, const double* b, index_t ldb, double beta, double* c,
          index_t ldc);

}  // namespace lfinet
