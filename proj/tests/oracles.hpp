#pragma once

// Independent reference computations for the tests. Nothing here calls into
// the library.

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

namespace oracle {

inline double softplus_naive(double x) { return std::log1p(std::exp(x)); }

inline double binomial_pmf(std::size_t i, std::size_t n, double p) {
  return std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) + static_cast<double>(i) * std::log(p) +
                  static_cast<double>(n - i) * std::log1p(-p));
}

/// Central interval [lo, hi] of Binomial(n, p) holding at least `level`
/// probability, each tail at most (1 - level) / 2.
inline std::pair<std::size_t, std::size_t> binomial_interval(std::size_t n, double p, double level) {
  const double tail = (1.0 - level) / 2.0;
  std::size_t lo = 0;
  double below = 0.0;
  while (lo < n && below + binomial_pmf(lo, n, p) <= tail) below += binomial_pmf(lo++, n, p);
  std::size_t hi = n;
  double above = 0.0;
  while (hi > lo && above + binomial_pmf(hi, n, p) <= tail) above += binomial_pmf(hi--, n, p);
  return {lo, hi};
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// TV distance between N(m1, 1) and N(m2, 1).
inline double unit_gaussian_tv(double m1, double m2) { return 2.0 * normal_cdf(std::abs(m1 - m2) / 2.0) - 1.0; }

/// Stationary distribution of a row-stochastic matrix by power iteration.
inline std::vector<double> stationary(const std::vector<std::vector<double>>& p, int iters = 20000) {
  const std::size_t n = p.size();
  std::vector<double> pi(n, 1.0 / static_cast<double>(n)), next(n);
  for (int it = 0; it < iters; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) next[j] += pi[i] * p[i][j];
    pi.swap(next);
  }
  return pi;
}

/// Cosine similarity of two vectors.
inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace oracle
