#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

// Small statistics helpers for the test suite. The incomplete-gamma
// evaluation follows the classic series / continued-fraction split.
namespace testsupport {

inline double log_gamma(double x) { return std::lgamma(x); }

// Regularized lower incomplete gamma P(a, x).
inline double gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw std::invalid_argument("gamma_p domain");
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) {
    // series representation
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - log_gamma(a));
  }
  // continued fraction for Q(a, x)
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  const double q = std::exp(-x + a * std::log(x) - log_gamma(a)) * h;
  return 1.0 - q;
}

// Survival function of the chi-squared distribution (p-value of the stat).
inline double chi2_sf(double stat, int dof) {
  return 1.0 - gamma_p(dof / 2.0, stat / 2.0);
}

// Pearson chi-squared statistic against uniform expected counts.
inline double chi2_uniform_stat(const std::vector<std::size_t>& counts) {
  std::size_t total = 0;
  for (auto c : counts) total += c;
  const double expect =
      static_cast<double>(total) / static_cast<double>(counts.size());
  double stat = 0.0;
  for (auto c : counts) {
    const double d = static_cast<double>(c) - expect;
    stat += d * d / expect;
  }
  return stat;
}

}  // namespace testsupport
