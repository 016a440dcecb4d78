#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "csmoe/stat/mixture.hpp"

namespace csmoe::stat {

struct TvOptions {
  std::size_t x_samples = 200;
  std::size_t y_points = 2001;
  double y_halfwidth_sd = 8.0;  // grid covers all means +- this many of the largest std
  double normalization_tol = 1e-3;
  std::uint64_t seed = 0x7F;
};

/// 1/2 * integral |p(y) - q(y)| dy on a trapezoid grid; throws
/// ResolutionError when either integrand does not integrate to 1.
template <class P, class Q>
double tv_on_grid(P p, Q q, double lo, double hi, std::size_t points, double tol) {
  if (points < 3 || !(hi > lo)) throw ResolutionError("tv: degenerate y-grid");
  const double h = (hi - lo) / static_cast<double>(points - 1);
  double mass_p = 0.0, mass_q = 0.0, diff = 0.0;
  for (std::size_t k = 0; k < points; ++k) {
    const double y = lo + h * static_cast<double>(k);
    const double w = (k == 0 || k + 1 == points) ? 0.5 * h : h;
    const double a = p(y), b = q(y);
    mass_p += w * a;
    mass_q += w * b;
    diff += w * std::abs(a - b);
  }
  if (std::abs(mass_p - 1.0) > tol || std::abs(mass_q - 1.0) > tol) {
    throw ResolutionError("tv: y-grid does not resolve the densities (masses " + std::to_string(mass_p) + ", " +
                          std::to_string(mass_q) + ")");
  }
  return 0.5 * diff;
}

/// E_X[ V(p_G1(.|X), p_G2(.|X)) ] with X ~ U[-1,1]^d, Monte Carlo over a fixed x sample.
inline double tv_distance(const MixingMeasure& g1, const MixingMeasure& g2, const TvOptions& opt = {}) {
  g1.validate();
  g2.validate();
  if (g1.dim != g2.dim) throw DimensionError("tv_distance: measures have different input dimensions");
  if (opt.x_samples < 1) throw ConfigError("tv_distance: need at least one x sample");
  Rng rng = make_rng(opt.seed, 0x7F0);
  std::vector<double> x(g1.dim);
  double total = 0.0;
  for (std::size_t s = 0; s < opt.x_samples; ++s) {
    for (auto& v : x) v = uniform(rng, -1.0, 1.0);
    double lo = INFINITY, hi = -INFINITY, sd = 0.0;
    for (const auto* g : {&g1, &g2}) {
      for (const auto& a : g->atoms) {
        const double m = expert_value(g->kind, a.expert, x);
        lo = std::min(lo, m);
        hi = std::max(hi, m);
        sd = std::max(sd, std::sqrt(a.nu));
      }
    }
    const double pad = opt.y_halfwidth_sd * sd;
    total += tv_on_grid([&](double y) { return std::exp(log_density(g1, x, y)); },
                        [&](double y) { return std::exp(log_density(g2, x, y)); }, lo - pad, hi + pad, opt.y_points,
                        opt.normalization_tol);
  }
  return total / static_cast<double>(opt.x_samples);
}

}  // namespace csmoe::stat
