#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "csmoe/activation.hpp"
#include "csmoe/config.hpp"
#include "csmoe/errors.hpp"
#include "csmoe/random.hpp"

namespace csmoe::stat {

// Gaussian mixture of experts whose gate is the experts' own response:
//   p_G(y|x) = sum_i w_i(x) N(y; g_i(x), nu_i),
//   w_i(x)  ∝ exp(softplus(g_i(x)) + c_i) = exp(c_i) (1 + exp(g_i(x))).
//
// Expert parameter layout (d = input dimension):
//   linear: [a_1..a_d, b]            g = a.x + b
//   ffn:    [w2, w1_1..w1_d, b]      g = w2 softplus(w1.x + b)

struct Atom {
  double c = 0.0;
  std::vector<double> expert;
  double nu = 1.0;  // variance
};

inline std::size_t expert_size(ExpertKind kind, std::size_t d) { return kind == ExpertKind::linear ? d + 1 : d + 2; }

struct MixingMeasure {
  ExpertKind kind = ExpertKind::linear;
  std::size_t dim = 1;
  std::vector<Atom> atoms;

  std::size_t size() const { return atoms.size(); }

  void validate() const {
    if (atoms.empty()) throw DomainError("mixing measure has no atoms");
    if (dim == 0) throw DomainError("input dimension must be positive");
    for (const auto& a : atoms) {
      if (!(a.nu > 0.0)) throw DomainError("atom variance must be > 0, got " + std::to_string(a.nu));
      if (a.expert.size() != expert_size(kind, dim)) throw DomainError("atom expert parameters have the wrong length");
    }
  }

  double total_weight() const {
    double s = 0.0;
    for (const auto& a : atoms) s += std::exp(a.c);
    return s;
  }
};

/// Shifts every c_i by the same constant (the density is unchanged) so that
/// sum_i exp(c_i) equals target.
inline void normalize_weights(MixingMeasure& g, double target) {
  const double shift = std::log(target / g.total_weight());
  for (auto& a : g.atoms) a.c += shift;
}

inline double expert_value(ExpertKind kind, std::span<const double> p, std::span<const double> x) {
  const std::size_t d = x.size();
  if (kind == ExpertKind::linear) {
    double v = p[d];
    for (std::size_t k = 0; k < d; ++k) v += p[k] * x[k];
    return v;
  }
  double z = p[d + 1];
  for (std::size_t k = 0; k < d; ++k) z += p[1 + k] * x[k];
  return p[0] * scalar::softplus(z);
}

/// dg/dp written into grad (same layout as p); returns g.
inline double expert_value_grad(ExpertKind kind, std::span<const double> p, std::span<const double> x, std::span<double> grad) {
  const std::size_t d = x.size();
  if (kind == ExpertKind::linear) {
    double v = p[d];
    for (std::size_t k = 0; k < d; ++k) {
      v += p[k] * x[k];
      grad[k] = x[k];
    }
    grad[d] = 1.0;
    return v;
  }
  double z = p[d + 1];
  for (std::size_t k = 0; k < d; ++k) z += p[1 + k] * x[k];
  const double h = scalar::softplus(z);
  const double s = scalar::sigmoid(z);
  grad[0] = h;
  for (std::size_t k = 0; k < d; ++k) grad[1 + k] = p[0] * s * x[k];
  grad[d + 1] = p[0] * s;
  return p[0] * h;
}

inline double log_normal_pdf(double y, double mean, double var) {
  const double r = y - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + r * r / var);
}

inline double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double a : v) mx = std::max(mx, a);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double a : v) s += std::exp(a - mx);
  return mx + std::log(s);
}

/// Gate weights w_i(x).
inline std::vector<double> gate_weights(const MixingMeasure& g, std::span<const double> x) {
  std::vector<double> logit(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) logit[i] = scalar::softplus(expert_value(g.kind, g.atoms[i].expert, x)) + g.atoms[i].c;
  const double z = log_sum_exp(logit);
  for (auto& v : logit) v = std::exp(v - z);
  return logit;
}

inline double log_density(const MixingMeasure& g, std::span<const double> x, double y) {
  std::vector<double> gate(g.size()), comp(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double m = expert_value(g.kind, g.atoms[i].expert, x);
    gate[i] = scalar::softplus(m) + g.atoms[i].c;
    comp[i] = gate[i] + log_normal_pdf(y, m, g.atoms[i].nu);
  }
  return log_sum_exp(comp) - log_sum_exp(gate);
}

inline double density(const MixingMeasure& g, std::span<const double> x, double y) {
  g.validate();
  if (x.size() != g.dim) throw DimensionError("density: x has the wrong dimension");
  return std::exp(log_density(g, x, y));
}

struct Dataset {
  std::size_t dim = 1;
  std::vector<double> x;  // n * dim, row-major
  std::vector<double> y;
  std::vector<std::size_t> component;  // generating atom, for diagnostics

  std::size_t size() const { return y.size(); }
  std::span<const double> xi(std::size_t i) const { return {x.data() + i * dim, dim}; }
};

/// x ~ U[-1,1]^d, component ~ w(x), y ~ N(g(x), nu).
inline Dataset sample_dataset(const MixingMeasure& g, std::size_t n, std::uint64_t seed) {
  g.validate();
  if (n < 1) throw DomainError("sample_dataset: n must be >= 1");
  Rng rng = make_rng(seed, 0xDA7A);
  Dataset d;
  d.dim = g.dim;
  d.x.resize(n * g.dim);
  d.y.resize(n);
  d.component.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < g.dim; ++k) d.x[i * g.dim + k] = uniform(rng, -1.0, 1.0);
    auto w = gate_weights(g, d.xi(i));
    double u = uniform01(rng);
    std::size_t comp = w.size() - 1;
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (u < w[j]) {
        comp = j;
        break;
      }
      u -= w[j];
    }
    const Atom& a = g.atoms[comp];
    d.component[i] = comp;
    d.y[i] = normal(rng, expert_value(g.kind, a.expert, d.xi(i)), std::sqrt(a.nu));
  }
  return d;
}

/// Mean log-likelihood of a dataset.
inline double mean_log_likelihood(const MixingMeasure& g, const Dataset& d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) s += log_density(g, d.xi(i), d.y[i]);
  return s / static_cast<double>(d.size());
}

/// Ground truths used by the rate experiments (input dimension 1, c* = 0).
inline MixingMeasure ground_truth(ExpertKind kind, std::size_t n_true = 2) {
  MixingMeasure g;
  g.kind = kind;
  g.dim = 1;
  if (n_true != 2) throw ConfigError("built-in ground truths have two atoms");
  if (kind == ExpertKind::linear) {
    g.atoms = {Atom{0.0, {-1.5, 0.0}, 0.3}, Atom{0.0, {1.5, 0.0}, 0.3}};
  } else {
    g.atoms = {Atom{0.0, {1.0, 2.0, 0.5}, 0.3}, Atom{0.0, {-1.0, -2.0, 0.0}, 0.3}};
  }
  return g;
}

}  // namespace csmoe::stat
