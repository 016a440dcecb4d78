#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "csmoe/stat/mle.hpp"
#include "csmoe/stat/tv.hpp"
#include "csmoe/stat/voronoi.hpp"

namespace csmoe::stat {

struct RateSpec {
  ExpertKind kind = ExpertKind::linear;
  std::size_t n_true = 2;
  std::size_t n_fit = 2;
  std::vector<std::size_t> n_grid = {1000, 3000, 10000, 30000};
  std::size_t reps = 20;
  std::uint64_t seed = 2024;
  std::size_t workers = 1;
  FitOptions fit;
  TvOptions tv;

  std::string id() const {
    return std::string(to_string(kind)) + "_true" + std::to_string(n_true) + "_fit" + std::to_string(n_fit);
  }

  void validate() const {
    if (n_grid.empty()) throw ConfigError("rate experiment: n_grid is empty");
    for (std::size_t i = 1; i < n_grid.size(); ++i)
      if (n_grid[i] <= n_grid[i - 1]) throw ConfigError("rate experiment: n_grid must be increasing");
    if (reps < 5) throw ConfigError("rate experiment: reps must be >= 5");
    if (n_fit < n_true) throw ConfigError("rate experiment: n_fit must be >= n_true");
  }
};

struct RateRow {
  std::string experiment_id;
  std::size_t n = 0, rep = 0;
  double loss = std::nan(""), tv = std::nan("");
  double max_singleton_err = std::nan(""), max_multicell_err = std::nan("");
  std::string fit_status;
};

struct RateResult {
  RateSpec spec;
  std::vector<RateRow> rows;  // ordered by (n, rep)
  std::size_t failures = 0;

  /// Finite values of a column at each n, failed fits excluded.
  std::vector<std::pair<double, double>> points(double RateRow::*column) const {
    std::vector<std::pair<double, double>> out;
    for (const auto& r : rows)
      if (r.fit_status != "failed" && std::isfinite(r.*column)) out.push_back({static_cast<double>(r.n), r.*column});
    return out;
  }
};

inline RateRow rate_job(const RateSpec& spec, const MixingMeasure& truth, std::size_t n, std::size_t rep) {
  RateRow row;
  row.experiment_id = spec.id();
  row.n = n;
  row.rep = rep;
  const std::uint64_t job_seed = splitmix64(spec.seed ^ splitmix64(n * 1000003ULL + rep));
  const Dataset data = sample_dataset(truth, n, job_seed);
  try {
    FitResult fit = mle_fit(data, spec.n_fit, spec.kind, job_seed ^ 0xF17, spec.fit);
    normalize_weights(fit.g, truth.total_weight());
    row.loss = voronoi_loss(fit.g, truth);
    row.tv = tv_distance(fit.g, truth, spec.tv);
    const auto err = cell_errors(fit.g, truth);
    row.max_singleton_err = err.max_singleton;
    row.max_multicell_err = err.max_multicell;
    row.fit_status = fit.status;
  } catch (const FitFailure&) {
    row.fit_status = "failed";
  }
  return row;
}

/// Runs every (n, rep) job on a pool of `workers` threads.
inline RateResult rate_experiment(const RateSpec& spec, const std::function<void(const RateRow&)>& on_row = {}) {
  spec.validate();
  const MixingMeasure truth = ground_truth(spec.kind, spec.n_true);
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (auto n : spec.n_grid)
    for (std::size_t r = 0; r < spec.reps; ++r) jobs.push_back({n, r});
  // Largest jobs first keeps the pool busy at the tail.
  std::vector<std::size_t> order(jobs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = jobs.size() - 1 - i;

  RateResult out;
  out.spec = spec;
  out.rows.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex report;
  auto worker = [&] {
    for (std::size_t k = next++; k < order.size(); k = next++) {
      const auto [n, rep] = jobs[order[k]];
      RateRow row = rate_job(spec, truth, n, rep);
      std::lock_guard lock(report);
      if (on_row) on_row(row);
      out.rows[order[k]] = std::move(row);
    }
  };
  const std::size_t w = std::clamp<std::size_t>(spec.workers, 1, jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < w; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& r : out.rows) out.failures += r.fit_status == "failed";
  return out;
}

inline void write_rate_header(std::ostream& os, const std::string& config_hash = "") {
  if (!config_hash.empty()) os << "# config_hash=" << config_hash << "\n";
  os << "experiment_id,n,rep,loss,tv,max_singleton_err,max_multicell_err,fit_status\n";
}

inline void write_rate_row(std::ostream& os, const RateRow& r) {
  auto num = [&](double v) -> std::ostream& {
    if (std::isfinite(v)) os << v;
    else os << "nan";
    return os;
  };
  os.precision(10);
  os << r.experiment_id << ',' << r.n << ',' << r.rep << ',';
  num(r.loss) << ',';
  num(r.tv) << ',';
  num(r.max_singleton_err) << ',';
  num(r.max_multicell_err) << ',' << r.fit_status << "\n";
}

struct SlopeFit {
  double slope = 0.0, intercept = 0.0;
  double ci_low = 0.0, ci_high = 0.0;  // 95% bootstrap percentile interval
  std::vector<std::pair<double, double>> medians;  // (n, median value)
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline std::pair<double, double> ols(const std::vector<std::pair<double, double>>& pts) {
  double mx = 0, my = 0;
  for (auto [x, y] : pts) {
    mx += x;
    my += y;
  }
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double sxy = 0, sxx = 0;
  for (auto [x, y] : pts) {
    sxy += (x - mx) * (y - my);
    sxx += (x - mx) * (x - mx);
  }
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

inline std::vector<std::pair<double, double>> log_medians(const std::map<double, std::vector<double>>& groups) {
  std::vector<std::pair<double, double>> out;
  for (const auto& [n, vals] : groups) out.push_back({std::log(n), std::log(median(vals))});
  return out;
}

}  // namespace detail

/// Least-squares slope of log(median value) against log(n). Replicates
/// sharing an n are resampled for the bootstrap interval.
inline SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& points, std::size_t bootstrap = 200,
                                 std::uint64_t seed = 7) {
  std::map<double, std::vector<double>> groups;
  for (auto [n, v] : points) {
    if (!(n > 0.0)) throw DomainError("fit_loglog_slope: n must be positive");
    if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("fit_loglog_slope: values must be positive and finite");
    groups[n].push_back(v);
  }
  if (points.size() < 3 || groups.size() < 2) throw DomainError("fit_loglog_slope: need >= 3 points over >= 2 distinct n");
  SlopeFit fit;
  const auto logs = detail::log_medians(groups);
  std::tie(fit.slope, fit.intercept) = detail::ols(logs);
  for (auto [ln, lv] : logs) fit.medians.push_back({std::exp(ln), std::exp(lv)});

  if (bootstrap == 0) {
    fit.ci_low = fit.ci_high = fit.slope;
    return fit;
  }
  Rng rng = make_rng(seed, 0xB007);
  std::vector<double> slopes;
  for (std::size_t b = 0; b < bootstrap; ++b) {
    std::map<double, std::vector<double>> resampled;
    for (const auto& [n, vals] : groups) {
      auto& r = resampled[n];
      for (std::size_t i = 0; i < vals.size(); ++i) r.push_back(vals[uniform_index(rng, vals.size())]);
    }
    slopes.push_back(detail::ols(detail::log_medians(resampled)).first);
  }
  std::sort(slopes.begin(), slopes.end());
  auto pick = [&](double q) { return slopes[std::min(slopes.size() - 1, static_cast<std::size_t>(q * static_cast<double>(slopes.size())))]; };
  fit.ci_low = pick(0.025);
  fit.ci_high = pick(0.975);
  return fit;
}

}  // namespace csmoe::stat
