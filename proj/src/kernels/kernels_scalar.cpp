#include "oarstd/kernels.hpp"

namespace oarstd::kernels {

namespace {

template <typename T>
void gemm_impl(Op opa, Op opb, int m, int n, int k, T alpha, const T* a,
               const T* b, T beta, T* c) {
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m) * n; ++i)
    c[i] = beta == T(0) ? T(0) : c[i] * beta;
  if (alpha == T(0) || k == 0) return;

  if (opa == Op::none && opb == Op::none) {
    for (int i = 0; i < m; ++i) {
      T* ci = c + static_cast<std::int64_t>(i) * n;
      const T* ai = a + static_cast<std::int64_t>(i) * k;
      for (int p = 0; p < k; ++p) {
        const T av = alpha * ai[p];
        if (av == T(0)) continue;
        const T* bp = b + static_cast<std::int64_t>(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (opa == Op::trans && opb == Op::none) {
    // a stored k-by-m
    for (int i = 0; i < m; ++i) {
      T* ci = c + static_cast<std::int64_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const T av = alpha * a[static_cast<std::int64_t>(p) * m + i];
        if (av == T(0)) continue;
        const T* bp = b + static_cast<std::int64_t>(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (opa == Op::none && opb == Op::trans) {
    // b stored n-by-k
    for (int i = 0; i < m; ++i) {
      const T* ai = a + static_cast<std::int64_t>(i) * k;
      T* ci = c + static_cast<std::int64_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const T* bj = b + static_cast<std::int64_t>(j) * k;
        T acc = T(0);
        for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] += alpha * acc;
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      T* ci = c + static_cast<std::int64_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        T acc = T(0);
        for (int p = 0; p < k; ++p)
          acc += a[static_cast<std::int64_t>(p) * m + i] *
                 b[static_cast<std::int64_t>(j) * k + p];
        ci[j] += alpha * acc;
      }
    }
  }
}

void sgemm_scalar(Op opa, Op opb, int m, int n, int k, float alpha,
                  const float* a, const float* b, float beta, float* c) {
  gemm_impl<float>(opa, opb, m, n, k, alpha, a, b, beta, c);
}

float sdot_scalar(const float* a, const float* b, std::int64_t n) {
  float acc = 0.0f;
  for (std::int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void saxpy_scalar(std::int64_t n, float alpha, const float* x, float* y) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void sscale_scalar(std::int64_t n, float alpha, float* x) {
  for (std::int64_t i = 0; i < n; ++i) x[i] *= alpha;
}

void sadd_scalar(std::int64_t n, const float* a, const float* b, float* c) {
  for (std::int64_t i = 0; i < n; ++i) c[i] = a[i] + b[i];
}

void srelu_scalar(std::int64_t n, const float* x, float* y) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void srelu_bwd_scalar(std::int64_t n, const float* y, const float* gy, float* gx) {
  for (std::int64_t i = 0; i < n; ++i)
    if (y[i] > 0.0f) gx[i] += gy[i];
}

}  // namespace

const Backend& scalar_backend() {
  static const Backend backend{
      "scalar",     sgemm_scalar, sdot_scalar,  saxpy_scalar,
      sscale_scalar, sadd_scalar,  srelu_scalar, srelu_bwd_scalar,
  };
  return backend;
}

void dgemm(Op opa, Op opb, int m, int n, int k, double alpha, const double* a,
           const double* b, double beta, double* c) {
  gemm_impl<double>(opa, opb, m, n, k, alpha, a, b, beta, c);
}

double ddot(const double* a, const double* b, std::int64_t n) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void daxpy(std::int64_t n, double alpha, const double* x, double* y) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void dscale(std::int64_t n, double alpha, double* x) {
  for (std::int64_t i = 0; i < n; ++i) x[i] *= alpha;
}

void dadd(std::int64_t n, const double* a, const double* b, double* c) {
  for (std::int64_t i = 0; i < n; ++i) c[i] = a[i] + b[i];
}

void drelu(std::int64_t n, const double* x, double* y) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void drelu_bwd(std::int64_t n, const double* y, const double* gy, double* gx) {
  for (std::int64_t i = 0; i < n; ++i)
    if (y[i] > 0.0) gx[i] += gy[i];
}

}  // namespace oarstd::kernels
