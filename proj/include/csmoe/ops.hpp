#pragma once

// Differentiable primitives recorded on an ad::Tape. Everything the MoE layers,
// the language model and the losses need; nothing more.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "csmoe/activation.hpp"
#include "csmoe/tape.hpp"

namespace csmoe::ad {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_mat(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
inline MutMap as_mat(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("operation on an unbound variable");
  return *a.tape();
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor out({av.rows(), bv.cols()});
  detail::as_mat(out).noalias() = detail::as_mat(av) * detail::as_mat(bv);
  return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    auto gm = detail::as_mat(g);
    if (t.requires_grad(a)) {
      Tensor ga(a.shape());
      detail::as_mat(ga).noalias() = gm * detail::as_mat(b.value()).transpose();
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb(b.shape());
      detail::as_mat(gb).noalias() = detail::as_mat(a.value()).transpose() * gm;
      t.accumulate(b, gb);
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  detail::require_matrix(av, "transpose");
  Tensor out({av.cols(), av.rows()});
  detail::as_mat(out) = detail::as_mat(av).transpose();
  return detail::tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor ga(a.shape());
    detail::as_mat(ga) = detail::as_mat(g).transpose();
    t.accumulate(a, ga);
  });
}

inline Var add(Var a, Var b) {
  detail::require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    Tensor gb = g;
    for (auto& v : gb.values()) v = -v;
    t.accumulate(b, gb);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor ga = g;
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb = g;
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      t.accumulate(b, gb);
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return detail::tape_of(a).record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    Tensor ga = g;
    for (auto& v : ga.values()) v *= s;
    t.accumulate(a, ga);
  });
}

inline Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  return detail::tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

/// X[m×n] + b[n] broadcast over rows.
inline Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  detail::require_matrix(xv, "add_bias");
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " vs input " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  return detail::tape_of(x).record(std::move(out), {x, b}, [x, b](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.requires_grad(b)) {
      Tensor gb(b.shape(), 0.0);
      const std::size_t n = g.cols();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
      t.accumulate(b, gb);
    }
  });
}

/// Row-wise softmax. With a mask, masked-out entries are exactly 0 and the
/// remaining ones renormalize among themselves (softmax of TopK_{-inf} input).
inline Var softmax_rows(Var x, const std::vector<std::uint8_t>* keep = nullptr) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "softmax");
  if (keep && keep->size() != xv.size()) throw DimensionError("softmax: mask size mismatch");
  Tensor out(xv.shape(), 0.0);
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (!keep || (*keep)[r * n + c]) mx = std::max(mx, xv[r * n + c]);
    if (!std::isfinite(mx)) throw NumericError("softmax: row " + std::to_string(r) + " has no finite kept entry");
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (keep && !(*keep)[r * n + c]) continue;
      double e = std::exp(xv[r * n + c] - mx);
      out[r * n + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  Tensor y = out;
  return detail::tape_of(x).record(std::move(out), {x}, [x, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor gx(x.shape(), 0.0);
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += y[r * n + c] * g[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
    }
    t.accumulate(x, gx);
  });
}

/// Elementwise activation; softmax dispatches to the row-wise op.
inline Var activation(Var x, Activation kind) {
  if (kind == Activation::softmax) return softmax_rows(x);
  Tensor out = x.value();
  for (auto& v : out.values()) v = scalar::apply(kind, v);
  return detail::tape_of(x).record(std::move(out), {x}, [x, kind](Tape& t, const Tensor& g) {
    Tensor gx = g;
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= scalar::derivative(kind, xv[i]);
    t.accumulate(x, gx);
  });
}

/// log(sum(exp(row))) per row -> [m×1].
inline Var logsumexp_rows(Var x) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "logsumexp_rows");
  const std::size_t n = xv.cols();
  Tensor out({xv.rows(), 1});
  Tensor soft(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double mx = *std::max_element(xv.data().begin() + r * n, xv.data().begin() + (r + 1) * n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(xv[r * n + c] - mx);
    out[r] = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) soft[r * n + c] = std::exp(xv[r * n + c] - out[r]);
  }
  return detail::tape_of(x).record(std::move(out), {x}, [x, soft = std::move(soft)](Tape& t, const Tensor& g) {
    Tensor gx = soft;
    const std::size_t n = soft.cols();
    for (std::size_t r = 0; r < soft.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] *= g[r];
    t.accumulate(x, gx);
  });
}

inline Var row_sum(Var x) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "row_sum");
  const std::size_t n = xv.cols();
  Tensor out({xv.rows(), 1}, 0.0);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r] += xv[r * n + c];
  return detail::tape_of(x).record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor gx(x.shape());
    const std::size_t n = gx.cols();
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] = g[r];
    t.accumulate(x, gx);
  });
}

inline Var row_mean(Var x) { return scale(row_sum(x), 1.0 / static_cast<double>(x.cols())); }

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return detail::tape_of(x).record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x, Tensor(x.shape(), g[0]));
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Euclidean norm of each row -> [m×1]. Zero rows have norm 0 and gradient 0.
inline Var row_l2_norm(Var x) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "row_l2_norm");
  const std::size_t n = xv.cols();
  Tensor out({xv.rows(), 1}, 0.0);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += xv[r * n + c] * xv[r * n + c];
    out[r] = std::sqrt(s);
  }
  Tensor norms = out;
  return detail::tape_of(x).record(std::move(out), {x}, [x, norms = std::move(norms)](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor gx(xv.shape(), 0.0);
    const std::size_t n = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      if (norms[r] == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] = g[r] * xv[r * n + c] / norms[r];
    }
    t.accumulate(x, gx);
  });
}

/// Scales every row to unit Euclidean norm; all-zero rows stay zero.
inline Var row_normalize(Var x) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "row_normalize");
  const std::size_t n = xv.cols();
  Tensor out(xv.shape(), 0.0);
  Tensor norms({xv.rows(), 1}, 0.0);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += xv[r * n + c] * xv[r * n + c];
    norms[r] = std::sqrt(s);
    if (norms[r] == 0.0) continue;
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] / norms[r];
  }
  Tensor u = out;
  return detail::tape_of(x).record(
      std::move(out), {x}, [x, u = std::move(u), norms = std::move(norms)](Tape& t, const Tensor& g) {
        Tensor gx(u.shape(), 0.0);
        const std::size_t n = u.cols();
        for (std::size_t r = 0; r < u.rows(); ++r) {
          if (norms[r] == 0.0) continue;
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c) dot += u[r * n + c] * g[r * n + c];
          for (std::size_t c = 0; c < n; ++c) gx[r * n + c] = (g[r * n + c] - u[r * n + c] * dot) / norms[r];
        }
        t.accumulate(x, gx);
      });
}

/// x / sqrt(mean(x^2) + eps) per row.
inline Var rms_norm_rows(Var x, double eps = 1e-6) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "rms_norm_rows");
  const std::size_t n = xv.cols();
  Tensor out(xv.shape());
  Tensor inv({xv.rows(), 1});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += xv[r * n + c] * xv[r * n + c];
    inv[r] = 1.0 / std::sqrt(s / static_cast<double>(n) + eps);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] * inv[r];
  }
  Tensor y = out;
  return detail::tape_of(x).record(
      std::move(out), {x}, [x, y = std::move(y), inv = std::move(inv)](Tape& t, const Tensor& g) {
        Tensor gx(y.shape());
        const std::size_t n = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c) dot += y[r * n + c] * g[r * n + c];
          dot /= static_cast<double>(n);
          for (std::size_t c = 0; c < n; ++c) gx[r * n + c] = inv[r] * (g[r * n + c] - y[r * n + c] * dot);
        }
        t.accumulate(x, gx);
      });
}

/// X[m×n] * w[m×1], each row scaled by its weight.
inline Var scale_rows(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  detail::require_matrix(xv, "scale_rows");
  if (wv.size() != xv.rows()) throw DimensionError("scale_rows: weight count mismatch");
  const std::size_t n = xv.cols();
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= wv[r];
  return detail::tape_of(x).record(std::move(out), {x, w}, [x, w](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const std::size_t n = xv.cols();
    if (t.requires_grad(x)) {
      Tensor gx = g;
      for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] *= wv[r];
      t.accumulate(x, gx);
    }
    if (t.requires_grad(w)) {
      Tensor gw(w.shape(), 0.0);
      for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) gw[r] += g[r * n + c] * xv[r * n + c];
      t.accumulate(w, gw);
    }
  });
}

/// X[m×n] / s[m×1].
inline Var div_rows(Var x, Var s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  detail::require_matrix(xv, "div_rows");
  if (sv.size() != xv.rows()) throw DimensionError("div_rows: scale count mismatch");
  for (double v : sv.values())
    if (v == 0.0) throw NumericError("div_rows: division by zero row scale");
  const std::size_t n = xv.cols();
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= sv[r];
  return detail::tape_of(x).record(std::move(out), {x, s}, [x, s](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& sv = s.value();
    const std::size_t n = xv.cols();
    if (t.requires_grad(x)) {
      Tensor gx = g;
      for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] /= sv[r];
      t.accumulate(x, gx);
    }
    if (t.requires_grad(s)) {
      Tensor gs(s.shape(), 0.0);
      for (std::size_t r = 0; r < xv.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < n; ++c) acc += g[r * n + c] * xv[r * n + c];
        gs[r] = -acc / (sv[r] * sv[r]);
      }
      t.accumulate(s, gs);
    }
  });
}

/// Column j of X -> [m×1].
inline Var column(Var x, std::size_t j) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "column");
  if (j >= xv.cols()) throw DimensionError("column index out of range");
  Tensor out({xv.rows(), 1});
  for (std::size_t r = 0; r < xv.rows(); ++r) out[r] = xv.at(r, j);
  return detail::tape_of(x).record(std::move(out), {x}, [x, j](Tape& t, const Tensor& g) {
    Tensor gx(x.shape(), 0.0);
    for (std::size_t r = 0; r < gx.rows(); ++r) gx.at(r, j) = g[r];
    t.accumulate(x, gx);
  });
}

/// Horizontal concatenation of matrices with equal row count.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p.value(), "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
    total += p.cols();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out.at(r, off + c) = pv.at(r, c);
    off += pv.cols();
  }
  return detail::tape_of(parts[0]).record(std::move(out), parts, [parts](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t w = p.cols();
      if (t.requires_grad(p)) {
        Tensor gp(p.shape());
        for (std::size_t r = 0; r < gp.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gp.at(r, c) = g.at(r, off + c);
        t.accumulate(p, gp);
      }
      off += w;
    }
  });
}

/// Vertical concatenation of matrices with equal column count.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p.value(), "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: column count mismatch");
    total += p.rows();
  }
  Tensor out({total, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& src = p.value().values();
    std::copy(src.begin(), src.end(), out.values().begin() + off * n);
    off += p.rows();
  }
  return detail::tape_of(parts[0]).record(std::move(out), parts, [parts](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    const std::size_t n = g.cols();
    for (const auto& p : parts) {
      if (t.requires_grad(p)) {
        Tensor gp(p.shape());
        std::copy(g.values().begin() + off * n, g.values().begin() + (off + p.rows()) * n, gp.values().begin());
        t.accumulate(p, gp);
      }
      off += p.rows();
    }
  });
}

inline Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "slice_rows");
  if (count == 0 || start + count > xv.rows()) throw DimensionError("slice_rows: range out of bounds");
  const std::size_t n = xv.cols();
  Tensor out({count, n});
  std::copy(xv.values().begin() + start * n, xv.values().begin() + (start + count) * n, out.values().begin());
  return detail::tape_of(x).record(std::move(out), {x}, [x, start](Tape& t, const Tensor& g) {
    Tensor gx(x.shape(), 0.0);
    std::copy(g.values().begin(), g.values().end(), gx.values().begin() + start * g.cols());
    t.accumulate(x, gx);
  });
}

/// Rows of X picked by index (embedding lookup, per-expert token subsets).
inline Var gather_rows(Var x, std::vector<std::size_t> idx) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "gather_rows");
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t n = xv.cols();
  Tensor out({idx.size(), n});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= xv.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(xv.values().begin() + idx[i] * n, n, out.values().begin() + i * n);
  }
  return detail::tape_of(x).record(std::move(out), {x}, [x, idx = std::move(idx)](Tape& t, const Tensor& g) {
    Tensor gx(x.shape(), 0.0);
    const std::size_t n = g.cols();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < n; ++c) gx[idx[i] * n + c] += g[i * n + c];
    t.accumulate(x, gx);
  });
}

/// Inverse of gather: a [rows×n] zero matrix with Y's rows added at idx.
inline Var scatter_add_rows(Var y, std::vector<std::size_t> idx, std::size_t rows) {
  const Tensor& yv = y.value();
  detail::require_matrix(yv, "scatter_add_rows");
  if (idx.size() != yv.rows()) throw DimensionError("scatter_add_rows: index count mismatch");
  const std::size_t n = yv.cols();
  Tensor out({rows, n}, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) throw DimensionError("scatter_add_rows: index out of range");
    for (std::size_t c = 0; c < n; ++c) out[idx[i] * n + c] += yv[i * n + c];
  }
  return detail::tape_of(y).record(std::move(out), {y}, [y, idx = std::move(idx)](Tape& t, const Tensor& g) {
    Tensor gy(y.shape());
    const std::size_t n = g.cols();
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(g.values().begin() + idx[i] * n, n, gy.values().begin() + i * n);
    t.accumulate(y, gy);
  });
}

/// Mean cross-entropy of row-wise logits against integer targets, computed
/// through a stable log-softmax.
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& targets) {
  const Tensor& lv = logits.value();
  detail::require_matrix(lv, "cross_entropy");
  if (targets.size() != lv.rows()) throw DimensionError("cross_entropy: target count mismatch");
  const std::size_t n = lv.cols();
  Tensor soft(lv.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (targets[r] >= n) {
      throw DataError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary of " + std::to_string(n));
    }
    double mx = *std::max_element(lv.data().begin() + r * n, lv.data().begin() + (r + 1) * n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(lv[r * n + c] - mx);
    const double lse = mx + std::log(z);
    total += lse - lv[r * n + targets[r]];
    for (std::size_t c = 0; c < n; ++c) soft[r * n + c] = std::exp(lv[r * n + c] - lse);
  }
  const double inv_m = 1.0 / static_cast<double>(lv.rows());
  return detail::tape_of(logits).record(
      Tensor::scalar(total * inv_m), {logits}, [logits, soft = std::move(soft), targets, inv_m](Tape& t, const Tensor& g) {
        Tensor gl = soft;
        const std::size_t n = soft.cols();
        for (std::size_t r = 0; r < soft.rows(); ++r) gl[r * n + targets[r]] -= 1.0;
        for (auto& v : gl.values()) v *= g[0] * inv_m;
        t.accumulate(logits, gl);
      });
}

/// Same value, no gradient flows back through it.
inline Var detach(Var x) { return detail::tape_of(x).constant(x.value()); }

}  // namespace csmoe::ad
