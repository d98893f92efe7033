#pragma once

#include <cstddef>
#include <vector>

namespace oarstd {

// Error-free summation of doubles (Shewchuk's adaptive partials). The result
// is the correctly rounded sum of the inputs, so it is invariant under input
// permutation and exact under duplication.
class ExactSum {
 public:
  void add(double x);
  double value() const;
  void reset() { partials_.clear(); }

 private:
  std::vector<double> partials_;  // nonoverlapping, increasing magnitude
};

double exact_sum(const double* x, std::size_t n);

// Regularized incomplete beta function I_x(a, b) via the continued fraction
// expansion with the symmetry transform for fast convergence.
double reg_incomplete_beta(double a, double b, double x);

// Survival function of the F distribution: P(F_{d1,d2} > f).
double f_survival(double f, double d1, double d2);

}  // namespace oarstd
