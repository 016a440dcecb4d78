#pragma once

#include <ceres/ceres.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "csmoe/stat/mixture.hpp"

namespace csmoe::stat {

struct FitOptions {
  std::size_t restarts = 10;
  std::size_t restart_subsample = 0;  // > 0: restarts see only this many points, the best is refined on all
  std::size_t restart_iterations = 5000;
  std::size_t max_iterations = 5000;
  double gradient_tolerance = 1e-7;
  double nu_floor = 1e-3;
  double c_bound = 8.0;        // |c_i - c_0| <= c_bound
  double param_bound = 10.0;   // |expert parameter| <= param_bound
};

struct FitResult {
  MixingMeasure g;
  double log_likelihood = 0.0;  // mean over the full data
  std::size_t iterations = 0;
  bool converged = false;
  std::string status;  // ok | max_iter | failed
};

namespace detail {

// Unconstrained coordinates u -> atoms. c_0 is pinned at 0 (the density is
// invariant to a common shift of c); bounded quantities go through a scaled
// tanh, variances through nu_floor + exp(u).
class Layout {
 public:
  Layout(ExpertKind kind, std::size_t dim, std::size_t atoms, const FitOptions& opt)
      : kind_(kind), dim_(dim), atoms_(atoms), p_(expert_size(kind, dim)), opt_(opt) {}

  std::size_t size() const { return atoms_ * (p_ + 1) + (atoms_ - 1); }
  std::size_t expert_params() const { return p_; }

  // Offsets inside u.
  std::size_t c_at(std::size_t i) const { return atoms_ * (p_ + 1) + (i - 1); }
  std::size_t expert_at(std::size_t i) const { return i * (p_ + 1); }
  std::size_t nu_at(std::size_t i) const { return i * (p_ + 1) + p_; }

  static double bounded(double u, double b) { return b * std::tanh(u / b); }
  static double bounded_d(double u, double b) {
    const double t = std::tanh(u / b);
    return 1.0 - t * t;
  }
  static double unbounded(double v, double b) {
    const double r = std::clamp(v / b, -1.0 + 1e-12, 1.0 - 1e-12);
    return b * std::atanh(r);
  }

  MixingMeasure decode(const double* u) const {
    MixingMeasure g;
    g.kind = kind_;
    g.dim = dim_;
    for (std::size_t i = 0; i < atoms_; ++i) {
      Atom a;
      a.c = i == 0 ? 0.0 : bounded(u[c_at(i)], opt_.c_bound);
      a.expert.resize(p_);
      for (std::size_t k = 0; k < p_; ++k) a.expert[k] = bounded(u[expert_at(i) + k], opt_.param_bound);
      a.nu = opt_.nu_floor + std::exp(u[nu_at(i)]);
      g.atoms.push_back(std::move(a));
    }
    return g;
  }

  std::vector<double> encode(const MixingMeasure& g) const {
    std::vector<double> u(size(), 0.0);
    const double c0 = g.atoms[0].c;
    for (std::size_t i = 0; i < atoms_; ++i) {
      const Atom& a = g.atoms[i];
      if (i > 0) u[c_at(i)] = unbounded(a.c - c0, opt_.c_bound);
      for (std::size_t k = 0; k < p_; ++k) u[expert_at(i) + k] = unbounded(a.expert[k], opt_.param_bound);
      u[nu_at(i)] = std::log(std::max(a.nu - opt_.nu_floor, 1e-12));
    }
    return u;
  }

  ExpertKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  std::size_t atoms() const { return atoms_; }
  const FitOptions& options() const { return opt_; }

 private:
  ExpertKind kind_;
  std::size_t dim_, atoms_, p_;
  FitOptions opt_;
};

// Negative mean log-likelihood and its gradient in u. Per sample, with
// r = posterior responsibilities and pi = gate weights:
//   d/dc_i  = r_i - pi_i
//   d/dg_i  = (r_i - pi_i) sigmoid(g_i) + r_i (y - g_i) / nu_i
//   d/dnu_i = r_i ((y - g_i)^2 / (2 nu_i^2) - 1 / (2 nu_i))
class NegLogLik final : public ceres::FirstOrderFunction {
 public:
  NegLogLik(const Layout& layout, const Dataset& data, std::size_t begin, std::size_t end)
      : layout_(layout), data_(data), begin_(begin), end_(end) {}

  int NumParameters() const override { return static_cast<int>(layout_.size()); }

  bool Evaluate(const double* u, double* cost, double* gradient) const override {
    const MixingMeasure g = layout_.decode(u);
    const std::size_t n_atoms = layout_.atoms(), p = layout_.expert_params();
    std::vector<double> m(n_atoms), pi(n_atoms), r(n_atoms), dm(n_atoms * p);
    std::vector<double> gate(n_atoms), comp(n_atoms);
    std::vector<double> gc(n_atoms, 0.0), gnu(n_atoms, 0.0), gexp(n_atoms * p, 0.0);
    std::vector<double> ec(n_atoms), norm(n_atoms), half_inv_nu(n_atoms);
    for (std::size_t i = 0; i < n_atoms; ++i) {
      ec[i] = std::exp(g.atoms[i].c);
      norm[i] = 1.0 / std::sqrt(2.0 * std::numbers::pi * g.atoms[i].nu);
      half_inv_nu[i] = 0.5 / g.atoms[i].nu;
    }
    double total = 0.0;
    for (std::size_t s = begin_; s < end_; ++s) {
      auto x = data_.xi(s);
      const double y = data_.y[s];
      // exp(softplus(m) + c) = exp(c) (1 + exp(m)); the box keeps m far from overflow.
      double zg = 0.0, zc = 0.0;
      for (std::size_t i = 0; i < n_atoms; ++i) {
        m[i] = gradient ? expert_value_grad(g.kind, g.atoms[i].expert, x, {dm.data() + i * p, p})
                        : expert_value(g.kind, g.atoms[i].expert, x);
        const double res = y - m[i];
        zg += (pi[i] = ec[i] * (1.0 + std::exp(m[i])));
        zc += (r[i] = pi[i] * norm[i] * std::exp(-res * res * half_inv_nu[i]));
      }
      if (zc > 1e-250 && std::isfinite(zg)) {
        total += std::log(zc / zg);
        if (!gradient) continue;
        for (std::size_t i = 0; i < n_atoms; ++i) {
          pi[i] /= zg;
          r[i] /= zc;
        }
      } else {
        // Far tail: redo the sample in log space.
        for (std::size_t i = 0; i < n_atoms; ++i) {
          gate[i] = scalar::softplus(m[i]) + g.atoms[i].c;
          comp[i] = gate[i] + log_normal_pdf(y, m[i], g.atoms[i].nu);
        }
        const double lg = log_sum_exp(gate), lc = log_sum_exp(comp);
        total += lc - lg;
        if (!gradient) continue;
        for (std::size_t i = 0; i < n_atoms; ++i) {
          pi[i] = std::exp(gate[i] - lg);
          r[i] = std::exp(comp[i] - lc);
        }
      }
      for (std::size_t i = 0; i < n_atoms; ++i) {
        const double nu = g.atoms[i].nu, res = y - m[i];
        gc[i] += r[i] - pi[i];
        gnu[i] += r[i] * (res * res / (2.0 * nu * nu) - 0.5 / nu);
        const double dg = (r[i] - pi[i]) * scalar::sigmoid(m[i]) + r[i] * res / nu;
        for (std::size_t k = 0; k < p; ++k) gexp[i * p + k] += dg * dm[i * p + k];
      }
    }
    const double inv_n = 1.0 / static_cast<double>(end_ - begin_);
    *cost = -total * inv_n;
    if (!std::isfinite(*cost)) return false;
    if (gradient) {
      const auto& opt = layout_.options();
      std::fill(gradient, gradient + layout_.size(), 0.0);
      for (std::size_t i = 0; i < n_atoms; ++i) {
        if (i > 0) gradient[layout_.c_at(i)] = -gc[i] * inv_n * Layout::bounded_d(u[layout_.c_at(i)], opt.c_bound);
        for (std::size_t k = 0; k < p; ++k) {
          const std::size_t at = layout_.expert_at(i) + k;
          gradient[at] = -gexp[i * p + k] * inv_n * Layout::bounded_d(u[at], opt.param_bound);
        }
        gradient[layout_.nu_at(i)] = -gnu[i] * inv_n * std::exp(u[layout_.nu_at(i)]);
      }
      // An overflowing variance gives 0 * inf here; report the point as
      // invalid so the line search backs off.
      for (std::size_t k = 0; k < layout_.size(); ++k)
        if (!std::isfinite(gradient[k])) return false;
    }
    return true;
  }

 private:
  const Layout& layout_;
  const Dataset& data_;
  std::size_t begin_, end_;
};

struct Minimized {
  std::vector<double> u;
  double cost = std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
  bool converged = false;
};

inline Minimized minimize(const Layout& layout, const Dataset& data, std::size_t count, std::vector<double> u,
                          std::size_t max_iter, double grad_tol) {
  ceres::GradientProblem problem(new NegLogLik(layout, data, 0, count));
  ceres::GradientProblemSolver::Options o;
  o.logging_type = ceres::SILENT;
  o.max_num_iterations = static_cast<int>(max_iter);
  o.gradient_tolerance = grad_tol;
  o.function_tolerance = 1e-15;
  o.parameter_tolerance = 1e-14;
  ceres::GradientProblemSolver::Summary summary;
  ceres::Solve(o, problem, u.data(), &summary);
  Minimized out;
  out.u = std::move(u);
  out.cost = summary.final_cost;
  out.iterations = summary.iterations.size();
  out.converged = summary.termination_type == ceres::CONVERGENCE;
  if (summary.termination_type == ceres::FAILURE || !std::isfinite(out.cost)) out.cost = std::numeric_limits<double>::infinity();
  return out;
}

inline MixingMeasure random_start(ExpertKind kind, std::size_t dim, std::size_t atoms, double y_var, Rng& rng) {
  MixingMeasure g;
  g.kind = kind;
  g.dim = dim;
  for (std::size_t i = 0; i < atoms; ++i) {
    Atom a;
    a.c = i == 0 ? 0.0 : uniform(rng, -0.5, 0.5);
    if (kind == ExpertKind::linear) {
      for (std::size_t k = 0; k < dim; ++k) a.expert.push_back(uniform(rng, -3.0, 3.0));
      a.expert.push_back(uniform(rng, -1.0, 1.0));
    } else {
      a.expert.push_back(uniform(rng, -2.0, 2.0));
      for (std::size_t k = 0; k < dim; ++k) a.expert.push_back(uniform(rng, -3.0, 3.0));
      a.expert.push_back(uniform(rng, -1.0, 1.0));
    }
    a.nu = y_var * uniform(rng, 0.2, 1.0);
    g.atoms.push_back(std::move(a));
  }
  return g;
}

}  // namespace detail

/// Maximum-likelihood fit with N atoms; best of `restarts` seeded starts.
inline FitResult mle_fit(const Dataset& data, std::size_t n_atoms, ExpertKind kind, std::uint64_t seed, const FitOptions& opt = {}) {
  if (n_atoms < 1) throw ConfigError("mle_fit: need at least one atom");
  if (data.size() < 2) throw DomainError("mle_fit: need at least two samples");
  if (opt.restarts < 1) throw ConfigError("mle_fit: need at least one restart");
  detail::Layout layout(kind, data.dim, n_atoms, opt);

  double mean = 0.0, var = 0.0;
  for (double y : data.y) mean += y;
  mean /= static_cast<double>(data.size());
  for (double y : data.y) var += (y - mean) * (y - mean);
  var = std::max(var / static_cast<double>(data.size()), 10.0 * opt.nu_floor);

  // Samples are i.i.d., so a prefix is a uniform subsample.
  const std::size_t sub = opt.restart_subsample == 0 ? data.size() : std::clamp<std::size_t>(opt.restart_subsample, 2, data.size());
  Rng rng = make_rng(seed, 0x3E57A);
  detail::Minimized best;
  for (std::size_t r = 0; r < opt.restarts; ++r) {
    auto start = detail::random_start(kind, data.dim, n_atoms, var, rng);
    auto m = detail::minimize(layout, data, sub, layout.encode(start), opt.restart_iterations, opt.gradient_tolerance);
    if (m.cost < best.cost) best = std::move(m);
  }
  if (!std::isfinite(best.cost)) throw FitFailure("mle_fit: all " + std::to_string(opt.restarts) + " restarts diverged");
  std::size_t iters = best.iterations;
  if (sub < data.size() || !best.converged) {
    best = detail::minimize(layout, data, data.size(), best.u, opt.max_iterations, opt.gradient_tolerance);
    iters += best.iterations;
    if (!std::isfinite(best.cost)) throw FitFailure("mle_fit: refinement on the full data diverged");
  }
  FitResult f;
  f.g = layout.decode(best.u.data());
  f.log_likelihood = -best.cost;
  f.iterations = iters;
  f.converged = best.converged;
  f.status = best.converged ? "ok" : "max_iter";
  return f;
}

}  // namespace csmoe::stat
