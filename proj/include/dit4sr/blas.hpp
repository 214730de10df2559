#pragma once

#include <cblas.h>

#include <algorithm>
#include <cstddef>
#include <vector>

namespace dit4sr::blas {

// A fixed thread count keeps gemm reduction order, and therefore results, stable run to run.
inline void set_single_threaded() {
#ifdef OPENBLAS_VERSION
    openblas_set_num_threads(1);
#endif
}

// Row-major C = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
                 const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
                 std::size_t ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

// Double precision stays off OpenBLAS: 0.3.20's dgemm small-matrix kernels return wrong
// products on AVX-512 (Cooperlake) hosts. The 64-bit path serves the oracles and gradient
// checks, which are small, so a plain loop with a fixed summation order is enough.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
                 std::size_t ldc) {
    std::vector<double> bt;  // op(B) as a row-major [k, n] panel
    const double* bp = b;
    std::size_t ldbp = ldb;
    if (trans_b) {
        bt.resize(k * n);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * ldb + p];
        bp = bt.data();
        ldbp = n;
    }
    std::vector<double> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = trans_a ? a[p * lda + i] : a[i * lda + p];
            const double* br = bp + p * ldbp;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * br[j];
        }
        double* cr = c + i * ldc;
        for (std::size_t j = 0; j < n; ++j) cr[j] = beta == 0.0 ? alpha * row[j] : alpha * row[j] + beta * cr[j];
    }
}

}  // namespace dit4sr::blas
