#pragma once

// Dense accumulate-GEMM kernels used by the tensor ops.
//
// Each output element is summed over the inner dimension in ascending order,
// starting from its current value, whatever the row count. Results therefore
// do not depend on how many rows share a call (batching, padding).

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace dstgcnt::detail {

template <class T, std::size_t W>
using gemm_vec [[gnu::vector_size(sizeof(T) * W)]] = T;

/// R x W tile of C accumulated over the full inner dimension.
/// `a(r, p)` is read at a[r * a_rs + p * a_ps].
template <class T, std::size_t R, std::size_t W>
inline void gemm_tile(std::size_t k, const T* a, std::size_t a_rs, std::size_t a_ps, const T* b, std::size_t ldb, T* c,
                      std::size_t ldc) {
  using V = gemm_vec<T, W>;
  V acc[R];
  for (std::size_t r = 0; r < R; ++r) std::memcpy(&acc[r], c + r * ldc, sizeof(V));
  for (std::size_t p = 0; p < k; ++p) {
    V bv;
    std::memcpy(&bv, b + p * ldb, sizeof(V));
    for (std::size_t r = 0; r < R; ++r) acc[r] += a[r * a_rs + p * a_ps] * bv;
  }
  for (std::size_t r = 0; r < R; ++r) std::memcpy(c + r * ldc, &acc[r], sizeof(V));
}

template <class T, std::size_t W>
inline void gemm_panel(std::size_t m, std::size_t k, const T* a, std::size_t a_rs, std::size_t a_ps, const T* b,
                       std::size_t ldb, T* c, std::size_t ldc) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_tile<T, 4, W>(k, a + i * a_rs, a_rs, a_ps, b, ldb, c + i * ldc, ldc);
  for (; i < m; ++i) gemm_tile<T, 1, W>(k, a + i * a_rs, a_rs, a_ps, b, ldb, c + i * ldc, ldc);
}

/// Right-edge columns, fewer than 4.
template <class T>
inline void gemm_edge(std::size_t width, std::size_t k, const T* a, std::size_t a_ps, const T* b, std::size_t ldb, T* c) {
  T acc[4];
  for (std::size_t w = 0; w < width; ++w) acc[w] = c[w];
  for (std::size_t p = 0; p < k; ++p) {
    const T av = a[p * a_ps];
    const T* br = b + p * ldb;
    for (std::size_t w = 0; w < width; ++w) acc[w] += av * br[w];
  }
  for (std::size_t w = 0; w < width; ++w) c[w] = acc[w];
}

template <class T>
inline void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t a_rs, std::size_t a_ps,
                         const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) gemm_panel<T, 16>(m, k, a, a_rs, a_ps, b + j, ldb, c + j, ldc);
  if (j + 8 <= n) {
    gemm_panel<T, 8>(m, k, a, a_rs, a_ps, b + j, ldb, c + j, ldc);
    j += 8;
  }
  if (j + 4 <= n) {
    gemm_panel<T, 4>(m, k, a, a_rs, a_ps, b + j, ldb, c + j, ldc);
    j += 4;
  }
  if (j < n)
    for (std::size_t i = 0; i < m; ++i) gemm_edge(n - j, k, a + i * a_rs, a_ps, b + j, ldb, c + i * ldc + j);
}

/// C[m, n] += A[m, k] B[k, n]
template <class T>
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
                    std::size_t ldb, T* c, std::size_t ldc) {
  gemm_strided(m, n, k, a, lda, std::size_t{1}, b, ldb, c, ldc);
}

/// C[m, n] += A[k, m]^T B[k, n]
template <class T>
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
                    std::size_t ldb, T* c, std::size_t ldc) {
  gemm_strided(m, n, k, a, std::size_t{1}, lda, b, ldb, c, ldc);
}

/// C[m, n] += A[m, k] B[n, k]^T
template <class T>
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
                    std::size_t ldb, T* c, std::size_t ldc) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * ldb + p];
  gemm_nn(m, n, k, a, lda, bt.data(), n, c, ldc);
}

// ---------------------------------------------------------------------------
// Temporal convolution, x[outer, T, N, Fin] * kernel[k, Fin, Fout] with frames
// outside [0, T) reading as zero. Each output sums taps in ascending order and
// channels in ascending order within a tap; taps that fall outside the
// sequence are skipped, which equals adding exact zeros.

/// R consecutive joints of one frame, W output channels, taps [dt0, dt1).
template <class T, std::size_t R, std::size_t W>
inline void conv_tile(std::size_t taps, std::size_t fin, const T* x, std::size_t frame_stride, const T* kern,
                      std::size_t fout, T* c) {
  using V = gemm_vec<T, W>;
  V acc[R];
  for (std::size_t r = 0; r < R; ++r) std::memcpy(&acc[r], c + r * fout, sizeof(V));
  for (std::size_t d = 0; d < taps; ++d) {
    const T* xa = x + d * frame_stride;
    const T* kb = kern + d * fin * fout;
    for (std::size_t ch = 0; ch < fin; ++ch) {
      V bv;
      std::memcpy(&bv, kb + ch * fout, sizeof(V));
      for (std::size_t r = 0; r < R; ++r) acc[r] += xa[r * fin + ch] * bv;
    }
  }
  for (std::size_t r = 0; r < R; ++r) std::memcpy(c + r * fout, &acc[r], sizeof(V));
}

template <class T>
inline void conv_edge(std::size_t width, std::size_t taps, std::size_t fin, const T* x, std::size_t frame_stride,
                      const T* kern, std::size_t fout, T* c) {
  T acc[4];
  for (std::size_t w = 0; w < width; ++w) acc[w] = c[w];
  for (std::size_t d = 0; d < taps; ++d)
    for (std::size_t ch = 0; ch < fin; ++ch) {
      const T av = x[d * frame_stride + ch];
      const T* kb = kern + d * fin * fout + ch * fout;
      for (std::size_t w = 0; w < width; ++w) acc[w] += av * kb[w];
    }
  for (std::size_t w = 0; w < width; ++w) c[w] = acc[w];
}

template <class T, std::size_t W>
inline void conv_panel(std::size_t n, std::size_t taps, std::size_t fin, const T* x, std::size_t frame_stride,
                       const T* kern, std::size_t fout, T* c) {
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) conv_tile<T, 4, W>(taps, fin, x + j * fin, frame_stride, kern, fout, c + j * fout);
  for (; j < n; ++j) conv_tile<T, 1, W>(taps, fin, x + j * fin, frame_stride, kern, fout, c + j * fout);
}

/// out (zero-initialized by the caller or holding a partial sum) += conv(x).
template <class T>
inline void temporal_conv_acc(std::size_t outer, std::size_t t_len, std::size_t n, std::size_t fin, std::size_t fout,
                              std::size_t k, std::size_t left, const T* x, const T* kern, T* out) {
  const std::size_t frame_in = n * fin, frame_out = n * fout;
  for (std::size_t b = 0; b < outer; ++b) {
    const T* xb = x + b * t_len * frame_in;
    T* ob = out + b * t_len * frame_out;
    for (std::size_t t = 0; t < t_len; ++t) {
      const std::size_t dt0 = t < left ? left - t : 0;
      const std::size_t dt1 = std::min(k, t_len + left - t);
      if (dt1 <= dt0) continue;
      const T* xs = xb + (t + dt0 - left) * frame_in;
      const T* ks = kern + dt0 * fin * fout;
      T* os = ob + t * frame_out;
      const std::size_t taps = dt1 - dt0;
      std::size_t col = 0;
      for (; col + 16 <= fout; col += 16) conv_panel<T, 16>(n, taps, fin, xs, frame_in, ks + col, fout, os + col);
      if (col + 8 <= fout) {
        conv_panel<T, 8>(n, taps, fin, xs, frame_in, ks + col, fout, os + col);
        col += 8;
      }
      if (col + 4 <= fout) {
        conv_panel<T, 4>(n, taps, fin, xs, frame_in, ks + col, fout, os + col);
        col += 4;
      }
      if (col < fout)
        for (std::size_t j = 0; j < n; ++j)
          conv_edge(fout - col, taps, fin, xs + j * fin, frame_in, ks + col, fout, os + j * fout + col);
    }
  }
}

}  // namespace dstgcnt::detail
