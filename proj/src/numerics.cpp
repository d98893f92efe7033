#include "oarstd/numerics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace oarstd {

void ExactSum::add(double x) {
  std::size_t used = 0;
  for (double y : partials_) {
    if (std::fabs(x) < std::fabs(y)) std::swap(x, y);
    double hi = x + y;
    double lo = y - (hi - x);
    if (lo != 0.0) partials_[used++] = lo;
    x = hi;
  }
  partials_.resize(used);
  partials_.push_back(x);
}

double ExactSum::value() const {
  double s = 0.0;
  for (double p : partials_) s += p;
  return s;
}

double exact_sum(const double* x, std::size_t n) {
  ExactSum acc;
  for (std::size_t i = 0; i < n; ++i) acc.add(x[i]);
  return acc.value();
}

namespace {

// Lentz's algorithm for the continued fraction of I_x(a, b).
double betacf(double a, double b, double x) {
  const double eps = std::numeric_limits<double>::epsilon();
  const double fpmin = std::numeric_limits<double>::min() / eps;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

}  // namespace

double reg_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("beta parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * betacf(a, b, x) / a;
  }
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double f_survival(double f, double d1, double d2) {
  if (f <= 0.0) return 1.0;
  if (std::isinf(f)) return 0.0;
  return reg_incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d1 * f + d2));
}

}  // namespace oarstd
