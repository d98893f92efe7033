#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace oarstd::kernels {

// Low-level numeric kernels behind the network layers. Every entry point has
// a scalar reference implementation; vectorized backends are selected at
// runtime from CPU capabilities, or pinned via the OARSTD_BACKEND environment
// variable (or set_active). All matrices are dense row-major with tight
// leading dimensions.

enum class Op : std::uint8_t { none, trans };

struct Backend {
  const char* name;

  // C = alpha * op(A) * op(B) + beta * C, with op(A) m-by-k and op(B) k-by-n.
  void (*sgemm)(Op opa, Op opb, int m, int n, int k, float alpha,
                const float* a, const float* b, float beta, float* c);
  float (*sdot)(const float* a, const float* b, std::int64_t n);
  void (*saxpy)(std::int64_t n, float alpha, const float* x, float* y);
  void (*sscale)(std::int64_t n, float alpha, float* x);
  void (*sadd)(std::int64_t n, const float* a, const float* b, float* c);
  // y = max(x, 0)
  void (*srelu)(std::int64_t n, const float* x, float* y);
  // gx += gy where y > 0 (y is the relu output)
  void (*srelu_bwd)(std::int64_t n, const float* y, const float* gy, float* gx);
};

const Backend& scalar_backend();

// Backend currently in use.
const Backend& active();
// Pins a backend by name ("scalar", "avx2"); false if unknown or unsupported
// on this machine.
bool set_active(std::string_view name);
// Every backend usable on this machine, scalar first.
std::vector<const Backend*> available();

// Double-precision reference path (scalar only); used where gradient checks
// need headroom beyond single precision.
void dgemm(Op opa, Op opb, int m, int n, int k, double alpha, const double* a,
           const double* b, double beta, double* c);
double ddot(const double* a, const double* b, std::int64_t n);
void daxpy(std::int64_t n, double alpha, const double* x, double* y);
void dscale(std::int64_t n, double alpha, double* x);
void dadd(std::int64_t n, const double* a, const double* b, double* c);
void drelu(std::int64_t n, const double* x, double* y);
void drelu_bwd(std::int64_t n, const double* y, const double* gy, double* gx);

// Type-dispatched wrappers so templated layer code routes float through the
// active backend and double through the reference path.
template <typename T>
void gemm(Op opa, Op opb, int m, int n, int k, T alpha, const T* a, const T* b,
          T beta, T* c);
template <>
inline void gemm<float>(Op opa, Op opb, int m, int n, int k, float alpha,
                        const float* a, const float* b, float beta, float* c) {
  active().sgemm(opa, opb, m, n, k, alpha, a, b, beta, c);
}
template <>
inline void gemm<double>(Op opa, Op opb, int m, int n, int k, double alpha,
                         const double* a, const double* b, double beta, double* c) {
  dgemm(opa, opb, m, n, k, alpha, a, b, beta, c);
}

template <typename T>
T dot(const T* a, const T* b, std::int64_t n);
template <>
inline float dot<float>(const float* a, const float* b, std::int64_t n) {
  return active().sdot(a, b, n);
}
template <>
inline double dot<double>(const double* a, const double* b, std::int64_t n) {
  return ddot(a, b, n);
}

template <typename T>
void axpy(std::int64_t n, T alpha, const T* x, T* y);
template <>
inline void axpy<float>(std::int64_t n, float alpha, const float* x, float* y) {
  active().saxpy(n, alpha, x, y);
}
template <>
inline void axpy<double>(std::int64_t n, double alpha, const double* x, double* y) {
  daxpy(n, alpha, x, y);
}

template <typename T>
void scale(std::int64_t n, T alpha, T* x);
template <>
inline void scale<float>(std::int64_t n, float alpha, float* x) {
  active().sscale(n, alpha, x);
}
template <>
inline void scale<double>(std::int64_t n, double alpha, double* x) {
  dscale(n, alpha, x);
}

template <typename T>
void add(std::int64_t n, const T* a, const T* b, T* c);
template <>
inline void add<float>(std::int64_t n, const float* a, const float* b, float* c) {
  active().sadd(n, a, b, c);
}
template <>
inline void add<double>(std::int64_t n, const double* a, const double* b, double* c) {
  dadd(n, a, b, c);
}

template <typename T>
void relu(std::int64_t n, const T* x, T* y);
template <>
inline void relu<float>(std::int64_t n, const float* x, float* y) {
  active().srelu(n, x, y);
}
template <>
inline void relu<double>(std::int64_t n, const double* x, double* y) {
  drelu(n, x, y);
}

template <typename T>
void relu_bwd(std::int64_t n, const T* y, const T* gy, T* gx);
template <>
inline void relu_bwd<float>(std::int64_t n, const float* y, const float* gy, float* gx) {
  active().srelu_bwd(n, y, gy, gx);
}
template <>
inline void relu_bwd<double>(std::int64_t n, const double* y, const double* gy, double* gx) {
  drelu_bwd(n, y, gy, gx);
}

}  // namespace oarstd::kernels
