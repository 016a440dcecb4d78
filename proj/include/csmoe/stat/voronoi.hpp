#pragma once

#include <cmath>
#include <vector>

#include "csmoe/stat/mixture.hpp"

namespace csmoe::stat {

struct VoronoiAssignment {
  std::vector<std::vector<std::size_t>> cells;  // cells[j] = fitted atoms nearest truth atom j
};

/// Euclidean distance between atoms over (expert params, nu).
inline double atom_distance(const Atom& a, const Atom& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.expert.size(); ++k) s += (a.expert[k] - b.expert[k]) * (a.expert[k] - b.expert[k]);
  s += (a.nu - b.nu) * (a.nu - b.nu);
  return std::sqrt(s);
}

inline void check_comparable(const MixingMeasure& g, const MixingMeasure& truth) {
  g.validate();
  truth.validate();
  if (g.kind != truth.kind || g.dim != truth.dim) throw DomainError("mixing measures have different expert kinds or dimensions");
}

inline VoronoiAssignment voronoi_assign(const MixingMeasure& g, const MixingMeasure& truth) {
  check_comparable(g, truth);
  VoronoiAssignment v;
  v.cells.resize(truth.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::size_t best = 0;
    double best_d = atom_distance(g.atoms[i], truth.atoms[0]);
    for (std::size_t j = 1; j < truth.size(); ++j) {
      const double d = atom_distance(g.atoms[i], truth.atoms[j]);
      if (d < best_d) {
        best = j;
        best_d = d;
      }
    }
    v.cells[best].push_back(i);
  }
  return v;
}

namespace detail {

// Sum over cells of the weight mismatch plus first-power parameter terms on
// singleton cells and squared terms on cells holding several atoms. `split`
// returns the per-atom parameter differences whose norms enter the loss.
template <class Split>
double voronoi_loss(const MixingMeasure& g, const MixingMeasure& truth, Split split) {
  const auto v = voronoi_assign(g, truth);
  double loss = 0.0;
  for (std::size_t j = 0; j < truth.size(); ++j) {
    const auto& cell = v.cells[j];
    double w = 0.0;
    for (auto i : cell) w += std::exp(g.atoms[i].c);
    loss += std::abs(w - std::exp(truth.atoms[j].c));
    for (auto i : cell) {
      const double e = std::exp(g.atoms[i].c);
      for (double d : split(g.atoms[i], truth.atoms[j])) loss += e * (cell.size() == 1 ? d : d * d);
    }
  }
  return loss;
}

inline double norm_diff(const std::vector<double>& a, const std::vector<double>& b, std::size_t lo, std::size_t hi) {
  double s = 0.0;
  for (std::size_t k = lo; k < hi; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

}  // namespace detail

/// Voronoi loss for FFN experts: terms ||dW||, |dnu|.
inline double loss_L1(const MixingMeasure& g, const MixingMeasure& truth) {
  check_comparable(g, truth);
  if (g.kind != ExpertKind::ffn) throw DomainError("loss_L1 needs FFN experts");
  return detail::voronoi_loss(g, truth, [](const Atom& a, const Atom& t) {
    return std::vector<double>{detail::norm_diff(a.expert, t.expert, 0, a.expert.size()), std::abs(a.nu - t.nu)};
  });
}

/// Voronoi loss for linear experts: terms ||da||, |db|, |dnu|.
inline double loss_L2(const MixingMeasure& g, const MixingMeasure& truth) {
  check_comparable(g, truth);
  if (g.kind != ExpertKind::linear) throw DomainError("loss_L2 needs linear experts");
  const std::size_t d = g.dim;
  return detail::voronoi_loss(g, truth, [d](const Atom& a, const Atom& t) {
    return std::vector<double>{detail::norm_diff(a.expert, t.expert, 0, d), std::abs(a.expert[d] - t.expert[d]), std::abs(a.nu - t.nu)};
  });
}

inline double voronoi_loss(const MixingMeasure& g, const MixingMeasure& truth) {
  return g.kind == ExpertKind::ffn ? loss_L1(g, truth) : loss_L2(g, truth);
}

struct CellErrors {
  double max_singleton = std::nan("");  // max atom distance over singleton cells
  double max_multicell = std::nan("");  // max over multi-atom cells of the weight-averaged atom distance
  std::size_t empty_cells = 0;
};

// In a cell with several atoms the loss controls sum_i exp(c_i) |d_i|^2, so an
// atom whose weight vanishes may sit anywhere; the weighted RMS distance is
// the quantity with a rate.
inline CellErrors cell_errors(const MixingMeasure& g, const MixingMeasure& truth) {
  const auto v = voronoi_assign(g, truth);
  CellErrors out;
  double single = -1.0, multi = -1.0;
  for (std::size_t j = 0; j < truth.size(); ++j) {
    const auto& cell = v.cells[j];
    if (cell.empty()) {
      ++out.empty_cells;
    } else if (cell.size() == 1) {
      single = std::max(single, atom_distance(g.atoms[cell[0]], truth.atoms[j]));
    } else {
      double w = 0.0, s = 0.0;
      for (auto i : cell) {
        const double e = std::exp(g.atoms[i].c), d = atom_distance(g.atoms[i], truth.atoms[j]);
        w += e;
        s += e * d * d;
      }
      multi = std::max(multi, std::sqrt(s / w));
    }
  }
  if (single >= 0.0) out.max_singleton = single;
  if (multi >= 0.0) out.max_multicell = multi;
  return out;
}

}  // namespace csmoe::stat
