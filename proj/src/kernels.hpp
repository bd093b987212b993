// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace libkd::kernels {

namespace detail {

template <class T>
struct VecOf;
template <>
struct VecOf<float> {
  typedef float type __attribute__((vector_size(64)));
};
template <>
struct VecOf<double> {
  typedef double type __attribute__((vector_size(64)));
};
template <class T>
using Vec = typename VecOf<T>::type;

template <class T, std::size_t MR, std::size_t NV>
inline void gemm_tile(std::size_t K, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                      std::size_t ldc, bool accumulate) {
  constexpr std::size_t L = 64 / sizeof(T);
  Vec<T> acc[MR][NV];
  for (std::size_t r = 0; r < MR; ++r) {
    for (std::size_t v = 0; v < NV; ++v) {
      if (accumulate) {
        __builtin_memcpy(&acc[r][v], c + r * ldc + v * L, sizeof(Vec<T>));
      } else {
        acc[r][v] = Vec<T>{};
      }
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    const T* brow = b + k * ldb;
    Vec<T> bv[NV];
    for (std::size_t v = 0; v < NV; ++v) __builtin_memcpy(&bv[v], brow + v * L, sizeof(Vec<T>));
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[r * lda + k];
      for (std::size_t v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    for (std::size_t v = 0; v < NV; ++v) __builtin_memcpy(c + r * ldc + v * L, &acc[r][v], sizeof(Vec<T>));
  }
}

template <class T>
inline void gemm_edge(std::size_t rows, std::size_t cols, std::size_t K, const T* a, std::size_t lda,
                      const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      T s = accumulate ? c[r * ldc + j] : T(0);
      for (std::size_t k = 0; k < K; ++k) s += a[r * lda + k] * b[k * ldb + j];
      c[r * ldc + j] = s;
    }
  }
}

template <class T, std::size_t NV>
inline void gemm_rows(std::size_t rows, std::size_t K, const T* a, std::size_t lda, const T* b,
                      std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  switch (rows) {
    case 1: gemm_tile<T, 1, NV>(K, a, lda, b, ldb, c, ldc, accumulate); break;
    case 2: gemm_tile<T, 2, NV>(K, a, lda, b, ldb, c, ldc, accumulate); break;
    case 3: gemm_tile<T, 3, NV>(K, a, lda, b, ldb, c, ldc, accumulate); break;
    case 4: gemm_tile<T, 4, NV>(K, a, lda, b, ldb, c, ldc, accumulate); break;
    case 5: gemm_tile<T, 5, NV>(K, a, lda, b, ldb, c, ldc, accumulate); break;
    default: break;
  }
}

template <class T>
void gemm_direct(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t lda,
                 const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

}  // namespace detail

template <class T>
void detail::gemm_direct(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t lda,
                         const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t MR = 6;
  constexpr std::size_t L = 64 / sizeof(T);
  constexpr std::size_t NR = 2 * L;
  const std::size_t n_full = N - N % NR;
  const std::size_t m_full = M - M % MR;
  for (std::size_t j = 0; j < n_full; j += NR) {
    for (std::size_t i = 0; i < m_full; i += MR) {
      gemm_tile<T, MR, 2>(K, a + i * lda, lda, b + j, ldb, c + i * ldc + j, ldc, accumulate);
    }
    if (m_full < M) {
      gemm_rows<T, 2>(M - m_full, K, a + m_full * lda, lda, b + j, ldb, c + m_full * ldc + j, ldc,
                      accumulate);
    }
  }
  std::size_t j = n_full;
  if (N - j >= L) {
    for (std::size_t i = 0; i < m_full; i += MR) {
      gemm_tile<T, MR, 1>(K, a + i * lda, lda, b + j, ldb, c + i * ldc + j, ldc, accumulate);
    }
    if (m_full < M) {
      gemm_rows<T, 1>(M - m_full, K, a + m_full * lda, lda, b + j, ldb, c + m_full * ldc + j, ldc,
                      accumulate);
    }
    j += L;
  }
  if (j < N) gemm_edge(M, N - j, K, a, lda, b + j, ldb, c + j, ldc, accumulate);
}

/// Plain transpose of a rows x cols block into dst (cols x rows).
template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, std::size_t lds, T* dst,
               std::size_t ldd) {
  constexpr std::size_t B = 16;
  for (std::size_t i0 = 0; i0 < rows; i0 += B) {
    for (std::size_t j0 = 0; j0 < cols; j0 += B) {
      const std::size_t i1 = std::min(rows, i0 + B);
      const std::size_t j1 = std::min(cols, j0 + B);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * ldd + i] = src[i * lds + j];
      }
    }
  }
}

/// C[M x N] = A[M x K] * B[K x N] (or C += ... when accumulate), row-major with
/// leading dimensions. Every output element sums its K products one at a time
/// in ascending k, starting from 0 (or from the previous C value), so the
/// result does not depend on M, N, blocking or the route taken below.
template <class T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t L = 64 / sizeof(T);
  if (M == 0 || N == 0) return;
  if (K == 0) {
    if (!accumulate) {
      for (std::size_t i = 0; i < M; ++i) std::fill(c + i * ldc, c + i * ldc + N, T(0));
    }
    return;
  }
  if (N % L == 0 || M < 2 * L || N >= 4 * L) {
    detail::gemm_direct(M, N, K, a, lda, b, ldb, c, ldc, accumulate);
    return;
  }
  // Narrow output: compute C^T = B^T A^T so the wide dimension is vectorized.
  std::vector<T> at(K * M), bt(N * K), ct(N * M);
  transpose(M, K, a, lda, at.data(), M);
  transpose(K, N, b, ldb, bt.data(), K);
  if (accumulate) transpose(M, N, c, ldc, ct.data(), M);
  detail::gemm_direct(N, M, K, bt.data(), K, at.data(), M, ct.data(), M, accumulate);
  transpose(N, M, ct.data(), M, c, ldc);
}

}  // namespace libkd::kernels
