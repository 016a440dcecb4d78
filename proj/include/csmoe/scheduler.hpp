#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "csmoe/errors.hpp"
#include "csmoe/random.hpp"

namespace csmoe {

/// Offline competition schedule: lambda[l][t] == 1 means layer l runs the
/// competition at step t. Column sums never exceed a_max.
struct Schedule {
  std::vector<std::vector<std::uint8_t>> lambda;
  double omega = 0.0;
  std::size_t a_max = 0;
  double warmup_frac = 0.0;
  std::uint64_t seed = 0;
  std::size_t dropped = 0;
  std::vector<std::size_t> dropped_per_layer;

  std::size_t layers() const { return lambda.size(); }
  std::size_t steps() const { return lambda.empty() ? 0 : lambda.front().size(); }
  bool active(std::size_t layer, std::size_t t) const { return lambda[layer][t] != 0; }

  std::size_t active_at(std::size_t t) const {
    std::size_t s = 0;
    for (const auto& row : lambda) s += row[t];
    return s;
  }

  std::size_t layer_total(std::size_t layer) const {
    std::size_t s = 0;
    for (auto v : lambda[layer]) s += v;
    return s;
  }

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

/// i.i.d. Bernoulli(omega) draws for one layer.
inline std::vector<std::uint8_t> sample_layer_schedule(double omega, std::size_t steps, std::uint64_t seed) {
  if (!(omega >= 0.0 && omega <= 1.0)) throw ConfigError("omega must lie in [0, 1], got " + std::to_string(omega));
  Rng rng = make_rng(seed, 0x5C4ED);
  std::vector<std::uint8_t> out(steps);
  for (auto& v : out) v = uniform01(rng) < omega ? 1 : 0;
  return out;
}

/// Applies the global cap layer by layer. An activation that would push the
/// number of earlier layers active at t past a_max moves to the first later
/// step with room (wrapping around to first_step); with no room anywhere it is
/// dropped and counted.
inline Schedule enforce_global_cap(std::vector<std::vector<std::uint8_t>> raw, std::size_t a_max, std::size_t first_step = 0) {
  if (a_max < 1) throw ConfigError("a_max must be at least 1");
  Schedule s;
  s.a_max = a_max;
  s.dropped_per_layer.assign(raw.size(), 0);
  const std::size_t steps = raw.empty() ? 0 : raw.front().size();
  for (const auto& row : raw)
    if (row.size() != steps) throw DimensionError("schedule rows differ in length");
  std::vector<std::size_t> q_prev(steps, 0);

  for (std::size_t l = 0; l < raw.size(); ++l) {
    auto& row = raw[l];
    for (std::size_t t = 0; t < steps; ++t) {
      if (!row[t] || q_prev[t] + 1 <= a_max) continue;
      row[t] = 0;
      bool placed = false;
      const std::size_t span = steps - first_step;
      for (std::size_t off = 1; off < span && !placed; ++off) {
        const std::size_t cand = first_step + ((t - first_step + off) % span);
        if (cand < first_step || row[cand] || q_prev[cand] + 1 > a_max) continue;
        row[cand] = 1;
        placed = true;
      }
      if (!placed) {
        ++s.dropped;
        ++s.dropped_per_layer[l];
      }
    }
    for (std::size_t t = 0; t < steps; ++t) q_prev[t] += row[t];
  }
  s.lambda = std::move(raw);
  return s;
}

inline std::size_t warmup_steps(std::size_t steps, double warmup_frac) {
  return static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(steps)));
}

/// Whole-run schedule: no competition during warm-up, Bernoulli draws after,
/// then the global cap. Deferred activations never land inside warm-up.
inline Schedule generate_schedule(std::size_t layers, std::size_t steps, double omega, std::size_t a_max, double warmup_frac,
                                  std::uint64_t seed) {
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must lie in [0, 1)");
  const std::size_t warm = std::min(steps, warmup_steps(steps, warmup_frac));
  std::vector<std::vector<std::uint8_t>> raw;
  for (std::size_t l = 0; l < layers; ++l) {
    auto row = sample_layer_schedule(omega, steps, splitmix64(seed) + l);
    for (std::size_t t = 0; t < warm; ++t) row[t] = 0;
    raw.push_back(std::move(row));
  }
  Schedule s = steps > 0 ? enforce_global_cap(std::move(raw), a_max, std::min(warm, steps - 1)) : enforce_global_cap(std::move(raw), a_max);
  s.omega = omega;
  s.warmup_frac = warmup_frac;
  s.seed = seed;
  return s;
}

// ---------------------------------------------------------------------------
// Audit file: metadata lines followed by one 0/1 string per layer.

inline void write_schedule(std::ostream& os, const Schedule& s) {
  os << "# csmoe-schedule v1\n";
  os << "layers " << s.layers() << "\n";
  os << "steps " << s.steps() << "\n";
  os.precision(17);
  os << "omega " << s.omega << "\n";
  os << "a_max " << s.a_max << "\n";
  os << "warmup_frac " << s.warmup_frac << "\n";
  os << "seed " << s.seed << "\n";
  os << "dropped " << s.dropped << "\n";
  os << "lambda\n";
  for (const auto& row : s.lambda) {
    for (auto v : row) os << (v ? '1' : '0');
    os << '\n';
  }
}

inline void save_schedule(const std::string& path, const Schedule& s) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write schedule file " + path);
  write_schedule(os, s);
}

inline Schedule read_schedule(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "# csmoe-schedule v1") throw DataError("not a schedule file");
  Schedule s;
  std::size_t layers = 0, steps = 0;
  while (std::getline(is, line) && line != "lambda") {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "layers") ls >> layers;
    else if (key == "steps") ls >> steps;
    else if (key == "omega") ls >> s.omega;
    else if (key == "a_max") ls >> s.a_max;
    else if (key == "warmup_frac") ls >> s.warmup_frac;
    else if (key == "seed") ls >> s.seed;
    else if (key == "dropped") ls >> s.dropped;
    else throw DataError("schedule file: unknown key " + key);
  }
  for (std::size_t l = 0; l < layers; ++l) {
    if (!std::getline(is, line) || line.size() != steps) throw DataError("schedule file: bad lambda row");
    std::vector<std::uint8_t> row(steps);
    for (std::size_t t = 0; t < steps; ++t) row[t] = line[t] == '1';
    s.lambda.push_back(std::move(row));
  }
  s.dropped_per_layer.assign(layers, 0);
  return s;
}

}  // namespace csmoe
