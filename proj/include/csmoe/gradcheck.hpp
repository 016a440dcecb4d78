#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "csmoe/params.hpp"
#include "csmoe/tape.hpp"

namespace csmoe {

struct GradCheckOptions {
  double eps = 1e-5;
  // Denominator floor for the relative error. Components smaller than the
  // step are judged on absolute error / floor; their difference quotients are
  // dominated by roundoff (~1e-16 * |f| / eps).
  double magnitude_floor = 1e-5;
  // Test hook: added to every tape gradient before comparison.
  double corrupt_gradient = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
  bool deterministic = true;
  std::map<std::string, double> per_param;  // max relative error per parameter
};

using ScalarFn = std::function<ad::Var(ad::Tape&, const ParamStore::Bound&)>;

inline double relative_error(double analytic, double numeric, double floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares tape gradients against (f(w+eps) - f(w-eps)) / (2 eps) for every
/// coordinate of every parameter.
inline GradCheckReport finite_diff_check(const ScalarFn& f, ParamStore params, const GradCheckOptions& opt = {}) {
  if (!(opt.eps > 0.0 && opt.eps <= 1e-3)) throw ContractError("finite_diff_check: eps must lie in (0, 1e-3]");

  auto evaluate = [&](const ParamStore& p) {
    ad::Tape tape;
    auto bound = p.bind(tape);
    return f(tape, bound).value().item();
  };

  GradCheckReport report;
  ad::GradientMap grads;
  double base = 0.0;
  {
    ad::Tape tape;
    auto bound = params.bind(tape);
    ad::Var out = f(tape, bound);
    base = out.value().item();
    grads = tape.backward(out);
  }
  if (evaluate(params) != base) {
    report.deterministic = false;
    return report;
  }

  for (auto& [name, tensor] : params.all()) {
    const Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double orig = tensor[i];
      tensor[i] = orig + opt.eps;
      const double fp = evaluate(params);
      tensor[i] = orig - opt.eps;
      const double fm = evaluate(params);
      tensor[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double analytic = g[i] + opt.corrupt_gradient;
      const double err = relative_error(analytic, numeric, opt.magnitude_floor);
      ++report.coordinates;
      auto& pm = report.per_param[name];
      pm = std::max(pm, err);
      if (report.worst_param.empty() || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = name;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace csmoe
