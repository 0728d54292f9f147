#pragma once

#include <algorithm>
#include <cstdint>

namespace dg::detail {

// Row-major C[m,n] (+)= op(A)[m,k] * op(B)[k,n]. Loop orders are chosen per
// transpose case so the innermost loop walks contiguous memory.
inline void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
                 const double* a, const double* b, double* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    if (!ta && !tb) {
        for (std::int64_t i = 0; i < m; ++i) {
            double* crow = c + i * n;
            const double* arow = a + i * k;
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b + p * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!ta && tb) { // B given as [n,k]
        for (std::int64_t i = 0; i < m; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double s = 0.0;
                for (std::int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                crow[j] += s;
            }
        }
    } else if (ta && !tb) { // A given as [k,m]
        for (std::int64_t p = 0; p < k; ++p) {
            const double* acol = a + p * m;
            const double* brow = b + p * n;
            for (std::int64_t i = 0; i < m; ++i) {
                const double av = acol[i];
                double* crow = c + i * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else { // A [k,m], B [n,k]
        for (std::int64_t i = 0; i < m; ++i) {
            double* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double s = 0.0;
                for (std::int64_t p = 0; p < k; ++p) s += a[p * m + i] * brow[p];
                crow[j] += s;
            }
        }
    }
}

} // namespace dg::detail
