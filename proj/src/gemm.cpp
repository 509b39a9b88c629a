#include "falldet/gemm.hpp"

namespace falldet::gemm {

// i-k-j order: the inner loop runs contiguously over B and C rows, which the
// compiler turns into FMA vector code.
void nn_acc(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    std::size_t p = 0;
    // unroll by 4 over k to keep several independent accumulator streams
    for (; p + 4 <= k; p += 4) {
      const double a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
      const double* b0 = b + p * n;
      const double* b1 = b0 + n;
      const double* b2 = b1 + n;
      const double* b3 = b2 + n;
      for (std::size_t j = 0; j < n; ++j)
        ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; p < k; ++p) {
      const double ap = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ap * bp[j];
    }
  }
}

void nt_acc(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      // eight independent partial sums so the reduction can run in SIMD lanes
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8) {
        s0 += ai[p] * bj[p];
        s1 += ai[p + 1] * bj[p + 1];
        s2 += ai[p + 2] * bj[p + 2];
        s3 += ai[p + 3] * bj[p + 3];
        s4 += ai[p + 4] * bj[p + 4];
        s5 += ai[p + 5] * bj[p + 5];
        s6 += ai[p + 6] * bj[p + 6];
        s7 += ai[p + 7] * bj[p + 7];
      }
      double acc = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
      for (; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

void tn_acc(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double ap = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += ap * bi[j];
    }
  }
}

}  // namespace falldet::gemm
