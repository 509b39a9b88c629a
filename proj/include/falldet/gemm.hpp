#pragma once

#include <cstddef>

// Accumulating dense kernels; C is updated in place. Row-major throughout.
namespace falldet::gemm {

// C[M,N] += A[M,K] * B[K,N]
void nn_acc(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);

// C[M,N] += A[M,K] * B[N,K]^T
void nt_acc(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);

// C[K,N] += A[M,K]^T * B[M,N]
void tn_acc(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);

}  // namespace falldet::gemm
