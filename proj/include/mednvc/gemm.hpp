#pragma once

// Row-major GEMM used by conv, linear and attention. The k-loop is unrolled
// by 4 with a fixed accumulation order, so results are identical for any
// worker count.

#include <cstddef>
#include <vector>

#include "mednvc/threading.hpp"

namespace mednvc {

// C(MxN) = A(MxK) * B(KxN), or += when accumulate is set.
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
    auto row_range = [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const T* __restrict a_row = A + i * K;
            T* __restrict c = C + i * N;
            if (!accumulate) {
                for (std::size_t j = 0; j < N; ++j) c[j] = T(0);
            }
            std::size_t k = 0;
            for (; k + 4 <= K; k += 4) {
                const T a0 = a_row[k];
                const T a1 = a_row[k + 1];
                const T a2 = a_row[k + 2];
                const T a3 = a_row[k + 3];
                const T* __restrict b0 = B + k * N;
                const T* __restrict b1 = b0 + N;
                const T* __restrict b2 = b1 + N;
                const T* __restrict b3 = b2 + N;
                for (std::size_t j = 0; j < N; ++j) {
                    c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
            }
            for (; k < K; ++k) {
                const T a0 = a_row[k];
                const T* __restrict b0 = B + k * N;
                for (std::size_t j = 0; j < N; ++j) c[j] += a0 * b0[j];
            }
        }
    };
    if (num_threads() > 1 && M * N * K >= (std::size_t(1) << 20)) {
        parallel_for(M, row_range);
    } else {
        row_range(0, M);
    }
}

// dst(NxM) = src(MxN)^T
template <typename T>
void pack_transpose(std::size_t M, std::size_t N, const T* src, T* dst) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* s = src + i * N;
        for (std::size_t j = 0; j < N; ++j) dst[j * M + i] = s[j];
    }
}

template <typename T>
std::vector<T> transposed(std::size_t M, std::size_t N, const T* src) {
    std::vector<T> out(M * N);
    pack_transpose(M, N, src, out.data());
    return out;
}

}  // namespace mednvc
