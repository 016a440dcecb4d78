#pragma once

#include "csmoe/stat/mixture.hpp"
#include "csmoe/stat/mle.hpp"
#include "csmoe/stat/rates.hpp"
#include "csmoe/stat/tv.hpp"
#include "csmoe/stat/voronoi.hpp"

#include "csmoe/config.hpp"

namespace csmoe::stat {

/// One rate experiment per (expert kind, fitted atom count) in the config.
/// workers == 0 takes the config value.
inline std::vector<RateSpec> rate_specs(const RunConfig& cfg, std::size_t workers = 0) {
  const auto& s = cfg.statlab;
  std::vector<RateSpec> specs;
  for (auto kind : s.expert_kinds) {
    for (auto n_fit : s.n_fit) {
      RateSpec r;
      r.kind = kind;
      r.n_true = s.n_true;
      r.n_fit = n_fit;
      r.n_grid = kind == ExpertKind::ffn ? s.ffn_n_grid : s.n_grid;
      r.reps = s.reps;
      r.seed = s.seed;
      r.workers = workers ? workers : s.workers;
      r.fit.restarts = s.restarts;
      r.tv.x_samples = s.tv_x_samples;
      r.tv.y_points = s.tv_y_points;
      specs.push_back(r);
    }
  }
  return specs;
}

}  // namespace csmoe::stat
