#pragma once

// Dense kernels shared by the autograd operations. Every kernel partitions
// work by output row and sums each output element in a fixed order, so the
// result is bit-identical regardless of how many worker threads run it.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

#include <tbb/blocked_range.h>
#include <tbb/parallel_for.h>

namespace crosspoint::kernels {

// Below this many multiply-adds a kernel stays on the calling thread.
inline constexpr std::size_t parallel_threshold = 1 << 16;

template <typename Fn>
void for_rows(std::size_t rows, std::size_t work_per_row, Fn&& fn) {
  if (rows == 0) return;
  if (rows == 1 || rows * work_per_row < parallel_threshold) {
    fn(std::size_t{0}, rows);
    return;
  }
  const std::size_t grain =
      std::max<std::size_t>(1, parallel_threshold / std::max<std::size_t>(1, work_per_row));
  tbb::parallel_for(tbb::blocked_range<std::size_t>(0, rows, grain),
                    [&](const tbb::blocked_range<std::size_t>& r) {
                      fn(r.begin(), r.end());
                    });
}

/// Row-major transpose of a rows x cols matrix.
inline std::vector<double> transpose(std::size_t rows, std::size_t cols, const double* a) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
  return out;
}

namespace detail {

inline constexpr std::size_t panel_width = 16;
inline constexpr std::size_t block_rows = 4;
inline constexpr std::size_t depth_block = 256;

// Copies rows [p0, p0 + kc) of B into column panels of width 16, each stored
// kc x 16 contiguously, zero-padded past column n.
inline void pack_b(std::size_t kc, std::size_t n, std::size_t p0, const double* b, std::size_t brs,
                   std::size_t bcs, std::vector<double>& out) {
  const std::size_t panels = (n + panel_width - 1) / panel_width;
  out.assign(panels * kc * panel_width, 0.0);
  for (std::size_t q = 0; q < panels; ++q) {
    double* dst = out.data() + q * kc * panel_width;
    const std::size_t j0 = q * panel_width;
    const std::size_t w = std::min(panel_width, n - j0);
    for (std::size_t p = 0; p < kc; ++p) {
      const double* src = b + (p0 + p) * brs + j0 * bcs;
      for (std::size_t j = 0; j < w; ++j) dst[p * panel_width + j] = src[j * bcs];
    }
  }
}

// Eight doubles; lowered to whatever vector width the target has.
typedef double lane8 __attribute__((vector_size(64)));

// Each accumulator runs over p in order; every output element sees the same sequence
// of operations whatever R is.
template <std::size_t R>
inline void micro_kernel(std::size_t kc, const double* a, std::size_t ars, std::size_t acs,
                         const double* panel, double* c, std::size_t ldc, std::size_t width) {
  lane8 lo[R] = {};
  lane8 hi[R] = {};
  for (std::size_t p = 0; p < kc; ++p) {
    lane8 b0, b1;
    std::memcpy(&b0, panel + p * panel_width, sizeof b0);
    std::memcpy(&b1, panel + p * panel_width + 8, sizeof b1);
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * ars + p * acs];
      lo[r] += av * b0;
      hi[r] += av * b1;
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    double out[panel_width];
    std::memcpy(out, &lo[r], sizeof lo[r]);
    std::memcpy(out + 8, &hi[r], sizeof hi[r]);
    for (std::size_t j = 0; j < width; ++j) c[r * ldc + j] += out[j];
  }
}

/// C[m x n] (+)= A * B with A(i, p) = a[i ars + p acs] and B(p, j) = b[p brs + j bcs].
inline void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t ars,
                 std::size_t acs, const double* b, std::size_t brs, std::size_t bcs, double* c,
                 bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (m == 0 || n == 0 || k == 0) return;
  std::vector<double> packed;
  const std::size_t panels = (n + panel_width - 1) / panel_width;
  for (std::size_t p0 = 0; p0 < k; p0 += depth_block) {
    const std::size_t kc = std::min(depth_block, k - p0);
    pack_b(kc, n, p0, b, brs, bcs, packed);
    const std::size_t row_blocks = (m + block_rows - 1) / block_rows;
    for_rows(row_blocks, block_rows * n * kc, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t rb = lo; rb < hi; ++rb) {
        const std::size_t i0 = rb * block_rows;
        const std::size_t rows = std::min(block_rows, m - i0);
        const double* a_block = a + i0 * ars + p0 * acs;
        for (std::size_t q = 0; q < panels; ++q) {
          const double* panel = packed.data() + q * kc * panel_width;
          double* c_block = c + i0 * n + q * panel_width;
          const std::size_t width = std::min(panel_width, n - q * panel_width);
          switch (rows) {
            case 4: micro_kernel<4>(kc, a_block, ars, acs, panel, c_block, n, width); break;
            case 3: micro_kernel<3>(kc, a_block, ars, acs, panel, c_block, n, width); break;
            case 2: micro_kernel<2>(kc, a_block, ars, acs, panel, c_block, n, width); break;
            default: micro_kernel<1>(kc, a_block, ars, acs, panel, c_block, n, width); break;
          }
        }
      }
    });
  }
}

}  // namespace detail

/// C[m x n] (+)= A[m x k] * B[k x n]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, bool accumulate = false) {
  detail::gemm(m, n, k, a, k, 1, b, n, 1, c, accumulate);
}

/// C[m x n] (+)= A[m x k] * B^T where B is n x k.
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, bool accumulate = false) {
  detail::gemm(m, n, k, a, k, 1, b, 1, k, c, accumulate);
}

/// C[m x n] (+)= A^T * B where A is r x m and B is r x n.
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t r, const double* a, const double* b,
                    double* c, bool accumulate = false) {
  detail::gemm(m, n, r, a, 1, m, b, n, 1, c, accumulate);
}

}  // namespace crosspoint::kernels
