// AVX2+FMA backend. Compiled only on x86_64; selected at runtime when the
// CPU reports both features.

#include "oarstd/kernels.hpp"

#if defined(OARSTD_BUILD_AVX2)

#include <immintrin.h>

namespace oarstd::kernels {

namespace {

float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

void scale_c(std::int64_t n, float beta, float* c) {
  if (beta == 1.0f) return;
  if (beta == 0.0f) {
    for (std::int64_t i = 0; i < n; ++i) c[i] = 0.0f;
  } else {
    for (std::int64_t i = 0; i < n; ++i) c[i] *= beta;
  }
}

// Plain loops for the fringe that the register-blocked kernels do not cover.
void gemm_fringe(Op opa, int i_begin, int i_end, int j_begin, int j_end, int m,
                 int k, float alpha, const float* a, const float* b, float* c,
                 int n) {
  for (int i = i_begin; i < i_end; ++i) {
    float* ci = c + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = alpha * (opa == Op::none
                                    ? a[static_cast<std::int64_t>(i) * k + p]
                                    : a[static_cast<std::int64_t>(p) * m + i]);
      if (av == 0.0f) continue;
      const float* bp = b + static_cast<std::int64_t>(p) * n;
      for (int j = j_begin; j < j_end; ++j) ci[j] += av * bp[j];
    }
  }
}

// C += alpha * op(A) * B with op(A) m-by-k and B k-by-n. 4x16 register tile.
template <bool ATRANS>
void gemm_xn(int m, int n, int k, float alpha, const float* a, const float* b,
             float* c) {
  const __m256 valpha = _mm256_set1_ps(alpha);
  const int n_main = n & ~15;
  const int m_main = m & ~3;
  for (int j0 = 0; j0 < n_main; j0 += 16) {
    for (int i0 = 0; i0 < m_main; i0 += 4) {
      __m256 acc00 = _mm256_setzero_ps(), acc01 = _mm256_setzero_ps();
      __m256 acc10 = _mm256_setzero_ps(), acc11 = _mm256_setzero_ps();
      __m256 acc20 = _mm256_setzero_ps(), acc21 = _mm256_setzero_ps();
      __m256 acc30 = _mm256_setzero_ps(), acc31 = _mm256_setzero_ps();
      for (int p = 0; p < k; ++p) {
        const float* bp = b + static_cast<std::int64_t>(p) * n + j0;
        const __m256 b0 = _mm256_loadu_ps(bp);
        const __m256 b1 = _mm256_loadu_ps(bp + 8);
        const float* ap = ATRANS ? a + static_cast<std::int64_t>(p) * m + i0
                                 : a + static_cast<std::int64_t>(i0) * k + p;
        const std::int64_t stride = ATRANS ? 1 : k;
        __m256 av = _mm256_broadcast_ss(ap);
        acc00 = _mm256_fmadd_ps(av, b0, acc00);
        acc01 = _mm256_fmadd_ps(av, b1, acc01);
        av = _mm256_broadcast_ss(ap + stride);
        acc10 = _mm256_fmadd_ps(av, b0, acc10);
        acc11 = _mm256_fmadd_ps(av, b1, acc11);
        av = _mm256_broadcast_ss(ap + 2 * stride);
        acc20 = _mm256_fmadd_ps(av, b0, acc20);
        acc21 = _mm256_fmadd_ps(av, b1, acc21);
        av = _mm256_broadcast_ss(ap + 3 * stride);
        acc30 = _mm256_fmadd_ps(av, b0, acc30);
        acc31 = _mm256_fmadd_ps(av, b1, acc31);
      }
      float* crow = c + static_cast<std::int64_t>(i0) * n + j0;
      _mm256_storeu_ps(crow, _mm256_fmadd_ps(valpha, acc00, _mm256_loadu_ps(crow)));
      _mm256_storeu_ps(crow + 8, _mm256_fmadd_ps(valpha, acc01, _mm256_loadu_ps(crow + 8)));
      crow += n;
      _mm256_storeu_ps(crow, _mm256_fmadd_ps(valpha, acc10, _mm256_loadu_ps(crow)));
      _mm256_storeu_ps(crow + 8, _mm256_fmadd_ps(valpha, acc11, _mm256_loadu_ps(crow + 8)));
      crow += n;
      _mm256_storeu_ps(crow, _mm256_fmadd_ps(valpha, acc20, _mm256_loadu_ps(crow)));
      _mm256_storeu_ps(crow + 8, _mm256_fmadd_ps(valpha, acc21, _mm256_loadu_ps(crow + 8)));
      crow += n;
      _mm256_storeu_ps(crow, _mm256_fmadd_ps(valpha, acc30, _mm256_loadu_ps(crow)));
      _mm256_storeu_ps(crow + 8, _mm256_fmadd_ps(valpha, acc31, _mm256_loadu_ps(crow + 8)));
    }
  }
  const Op opa = ATRANS ? Op::trans : Op::none;
  if (m_main < m) gemm_fringe(opa, m_main, m, 0, n_main, m, k, alpha, a, b, c, n);
  if (n_main < n) gemm_fringe(opa, 0, m, n_main, n, m, k, alpha, a, b, c, n);
}

// C += alpha * A * B^T with A m-by-k and B n-by-k. Dot-product tiles of 4x2.
void gemm_nt(int m, int n, int k, float alpha, const float* a, const float* b,
             float* c) {
  const int k_main = k & ~7;
  const int m_main = m & ~3;
  const int n_main = n & ~1;
  for (int i0 = 0; i0 < m_main; i0 += 4) {
    const float* a0 = a + static_cast<std::int64_t>(i0) * k;
    const float* a1 = a0 + k;
    const float* a2 = a1 + k;
    const float* a3 = a2 + k;
    for (int j0 = 0; j0 < n_main; j0 += 2) {
      const float* b0 = b + static_cast<std::int64_t>(j0) * k;
      const float* b1 = b0 + k;
      __m256 s00 = _mm256_setzero_ps(), s01 = _mm256_setzero_ps();
      __m256 s10 = _mm256_setzero_ps(), s11 = _mm256_setzero_ps();
      __m256 s20 = _mm256_setzero_ps(), s21 = _mm256_setzero_ps();
      __m256 s30 = _mm256_setzero_ps(), s31 = _mm256_setzero_ps();
      for (int p = 0; p < k_main; p += 8) {
        const __m256 vb0 = _mm256_loadu_ps(b0 + p);
        const __m256 vb1 = _mm256_loadu_ps(b1 + p);
        __m256 va = _mm256_loadu_ps(a0 + p);
        s00 = _mm256_fmadd_ps(va, vb0, s00);
        s01 = _mm256_fmadd_ps(va, vb1, s01);
        va = _mm256_loadu_ps(a1 + p);
        s10 = _mm256_fmadd_ps(va, vb0, s10);
        s11 = _mm256_fmadd_ps(va, vb1, s11);
        va = _mm256_loadu_ps(a2 + p);
        s20 = _mm256_fmadd_ps(va, vb0, s20);
        s21 = _mm256_fmadd_ps(va, vb1, s21);
        va = _mm256_loadu_ps(a3 + p);
        s30 = _mm256_fmadd_ps(va, vb0, s30);
        s31 = _mm256_fmadd_ps(va, vb1, s31);
      }
      float d[4][2] = {{hsum(s00), hsum(s01)},
                       {hsum(s10), hsum(s11)},
                       {hsum(s20), hsum(s21)},
                       {hsum(s30), hsum(s31)}};
      for (int p = k_main; p < k; ++p) {
        d[0][0] += a0[p] * b0[p];
        d[0][1] += a0[p] * b1[p];
        d[1][0] += a1[p] * b0[p];
        d[1][1] += a1[p] * b1[p];
        d[2][0] += a2[p] * b0[p];
        d[2][1] += a2[p] * b1[p];
        d[3][0] += a3[p] * b0[p];
        d[3][1] += a3[p] * b1[p];
      }
      for (int r = 0; r < 4; ++r)
        for (int s = 0; s < 2; ++s)
          c[static_cast<std::int64_t>(i0 + r) * n + j0 + s] += alpha * d[r][s];
    }
  }
  for (int i = 0; i < m; ++i) {
    const bool fringe_row = i >= m_main;
    const float* ai = a + static_cast<std::int64_t>(i) * k;
    for (int j = fringe_row ? 0 : n_main; j < n; ++j) {
      const float* bj = b + static_cast<std::int64_t>(j) * k;
      __m256 s = _mm256_setzero_ps();
      for (int p = 0; p < k_main; p += 8)
        s = _mm256_fmadd_ps(_mm256_loadu_ps(ai + p), _mm256_loadu_ps(bj + p), s);
      float acc = hsum(s);
      for (int p = k_main; p < k; ++p) acc += ai[p] * bj[p];
      c[static_cast<std::int64_t>(i) * n + j] += alpha * acc;
    }
  }
}

void sgemm_avx2(Op opa, Op opb, int m, int n, int k, float alpha,
                const float* a, const float* b, float beta, float* c) {
  scale_c(static_cast<std::int64_t>(m) * n, beta, c);
  if (alpha == 0.0f || k == 0) return;
  if (opb == Op::none) {
    if (opa == Op::none)
      gemm_xn<false>(m, n, k, alpha, a, b, c);
    else
      gemm_xn<true>(m, n, k, alpha, a, b, c);
  } else if (opa == Op::none) {
    gemm_nt(m, n, k, alpha, a, b, c);
  } else {
    scalar_backend().sgemm(Op::trans, Op::trans, m, n, k, alpha, a, b, 1.0f, c);
  }
}

float sdot_avx2(const float* a, const float* b, std::int64_t n) {
  __m256 s0 = _mm256_setzero_ps();
  __m256 s1 = _mm256_setzero_ps();
  std::int64_t i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), s1);
  }
  for (; i + 8 <= n; i += 8)
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s0);
  float acc = hsum(_mm256_add_ps(s0, s1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void saxpy_avx2(std::int64_t n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void sscale_avx2(std::int64_t n, float alpha, float* x) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(x + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

void sadd_avx2(std::int64_t n, const float* a, const float* b, float* c) {
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(c + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) c[i] = a[i] + b[i];
}

void srelu_avx2(std::int64_t n, const float* x, float* y) {
  const __m256 zero = _mm256_setzero_ps();
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_max_ps(zero, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void srelu_bwd_avx2(std::int64_t n, const float* y, const float* gy, float* gx) {
  const __m256 zero = _mm256_setzero_ps();
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(y + i), zero, _CMP_GT_OQ);
    const __m256 add = _mm256_and_ps(mask, _mm256_loadu_ps(gy + i));
    _mm256_storeu_ps(gx + i, _mm256_add_ps(_mm256_loadu_ps(gx + i), add));
  }
  for (; i < n; ++i)
    if (y[i] > 0.0f) gx[i] += gy[i];
}

}  // namespace

const Backend& avx2_backend() {
  static const Backend backend{
      "avx2",      sgemm_avx2, sdot_avx2,  saxpy_avx2,
      sscale_avx2, sadd_avx2,  srelu_avx2, srelu_bwd_avx2,
  };
  return backend;
}

}  // namespace oarstd::kernels

#endif  // OARSTD_BUILD_AVX2
