#pragma once

#include <cblas.h>

#include "rst/tensor.hpp"

namespace rst::detail {

/// C = alpha * op(A) * op(B) + beta * C, row-major.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, Real alpha, const Real* a,
                 const Real* b, Real beta, Real* c) {
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  const auto lda = static_cast<blasint>(trans_a ? m : k);
  const auto ldb = static_cast<blasint>(trans_b ? k : n);
  const auto mi = static_cast<blasint>(m);
  const auto ni = static_cast<blasint>(n);
  const auto ki = static_cast<blasint>(k);
#ifdef RST_SINGLE_PRECISION
  cblas_sgemm(CblasRowMajor, ta, tb, mi, ni, ki, alpha, a, lda, b, ldb, beta, c, ni);
#else
  cblas_dgemm(CblasRowMajor, ta, tb, mi, ni, ki, alpha, a, lda, b, ldb, beta, c, ni);
#endif
}

}  // namespace rst::detail
