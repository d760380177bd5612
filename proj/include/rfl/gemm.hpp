#pragma once

#include <cstddef>

namespace rfl {

// Row-major double GEMM kernels shared by matmul, conv and the recurrent
// layers. `accumulate == false` overwrites C, otherwise adds into it.

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(size_t m, size_t n, size_t k, const double* a, const double* b,
             double* c, bool accumulate);
// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt(size_t m, size_t n, size_t k, const double* a, const double* b,
             double* c, bool accumulate);
// C[m,n] (+)= A[k,m]^T * B[k,n]
void gemm_tn(size_t m, size_t n, size_t k, const double* a, const double* b,
             double* c, bool accumulate);

}  // namespace rfl
