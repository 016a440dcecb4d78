#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "csmoe/activation.hpp"
#include "csmoe/ops.hpp"
#include "csmoe/params.hpp"
#include "csmoe/random.hpp"

namespace csmoe {

enum class AffinityMode { mean_kappa, l2_norm };
enum class RoutingMode { router, competition, rank_shift };

inline AffinityMode parse_affinity_mode(std::string_view s) {
  if (s == "mean_kappa") return AffinityMode::mean_kappa;
  if (s == "l2_norm") return AffinityMode::l2_norm;
  throw ConfigError("unknown affinity mode '" + std::string(s) + "'");
}

inline const char* to_string(AffinityMode m) { return m == AffinityMode::mean_kappa ? "mean_kappa" : "l2_norm"; }

inline RoutingMode parse_routing_mode(std::string_view s) {
  if (s == "router") return RoutingMode::router;
  if (s == "competition") return RoutingMode::competition;
  if (s == "rank_shift" || s == "rank-shift") return RoutingMode::rank_shift;
  throw ConfigError("unknown routing mode '" + std::string(s) + "'");
}

inline const char* to_string(RoutingMode m) {
  switch (m) {
    case RoutingMode::router: return "router";
    case RoutingMode::competition: return "competition";
    case RoutingMode::rank_shift: return "rank_shift";
  }
  return "?";
}

struct MoEConfig {
  std::size_t n_experts = 4;
  std::size_t k = 2;
  Activation kappa = Activation::softplus;
  AffinityMode affinity = AffinityMode::mean_kappa;

  void validate() const {
    if (k < 1 || k >= n_experts) {
      throw ConfigError("MoE config requires 1 <= K < N, got K=" + std::to_string(k) + " N=" + std::to_string(n_experts));
    }
  }
};

/// Selected experts for one token. weights[i] belongs to indices[i];
/// full_scores holds the pre-selection N-vector (router logits or
/// competition affinities).
struct RoutingDecision {
  std::vector<std::size_t> indices;
  std::vector<double> weights;
  std::vector<double> full_scores;

  std::vector<double> dense_weights(std::size_t n) const {
    std::vector<double> w(n, 0.0);
    for (std::size_t i = 0; i < indices.size(); ++i) w[indices[i]] = weights[i];
    return w;
  }
};

// ---------------------------------------------------------------------------
// Token-level selection primitives.

inline void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k > n) throw ConfigError("TopK requires 1 <= K <= N, got K=" + std::to_string(k) + " N=" + std::to_string(n));
}

/// Indices of the K largest scores, best first. Ties go to the lower index.
inline std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
  check_k(k, scores.size());
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

inline std::vector<double> topk_neg_inf(std::span<const double> scores, std::size_t k) {
  auto keep = topk_indices(scores, k);
  std::vector<double> out(scores.size(), -std::numeric_limits<double>::infinity());
  for (auto i : keep) out[i] = scores[i];
  return out;
}

inline std::vector<double> topk_zero(std::span<const double> scores, std::size_t k) {
  auto keep = topk_indices(scores, k);
  std::vector<double> out(scores.size(), 0.0);
  for (auto i : keep) out[i] = scores[i];
  return out;
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(what) + ": non-finite value " + std::to_string(v[i]) + " at position " + std::to_string(i) +
                         " of " + std::to_string(v.size()));
    }
  }
}

inline std::vector<double> softmax_over(std::span<const double> logits, std::span<const std::size_t> subset) {
  double mx = -std::numeric_limits<double>::infinity();
  for (auto i : subset) mx = std::max(mx, logits[i]);
  std::vector<double> w(subset.size());
  double z = 0.0;
  for (std::size_t j = 0; j < subset.size(); ++j) z += (w[j] = std::exp(logits[subset[j]] - mx));
  for (auto& v : w) v /= z;
  return w;
}

/// softmax(TopK_{-inf}(logits)).
inline RoutingDecision route_softmax(std::span<const double> logits, std::size_t k) {
  require_finite(logits, "router logits");
  RoutingDecision d;
  d.indices = topk_indices(logits, k);
  d.weights = softmax_over(logits, d.indices);
  d.full_scores.assign(logits.begin(), logits.end());
  return d;
}

/// Winners by affinity, weights = TopK_0(s) / sum(TopK_0(s)).
inline RoutingDecision competition_decision(std::span<const double> affinities, std::size_t k) {
  require_finite(affinities, "competition affinities");
  RoutingDecision d;
  d.indices = topk_indices(affinities, k);
  double z = 0.0;
  for (auto i : d.indices) z += affinities[i];
  if (!(z > 0.0)) throw DegenerateAffinityError("competition: selected affinities sum to " + std::to_string(z) + " <= 0");
  for (auto i : d.indices) d.weights.push_back(affinities[i] / z);
  d.full_scores.assign(affinities.begin(), affinities.end());
  return d;
}

/// Selection with the rank-1 expert swapped for the rank-(K+1) one; weights are
/// the softmax of the substituted experts' original logits.
inline RoutingDecision rank_shift_route(std::span<const double> logits, std::size_t k) {
  if (k + 1 > logits.size()) {
    throw ConfigError("rank shift needs K+1 <= N, got K=" + std::to_string(k) + " N=" + std::to_string(logits.size()));
  }
  require_finite(logits, "router logits");
  auto ranked = topk_indices(logits, k + 1);
  RoutingDecision d;
  d.indices.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k));
  d.indices[0] = ranked[k];
  d.weights = softmax_over(logits, d.indices);
  d.full_scores.assign(logits.begin(), logits.end());
  return d;
}

// ---------------------------------------------------------------------------
// Layer.

struct EvalCounter {
  std::size_t expert_token_evals = 0;
};

/// Parameter layout of one MoE layer inside a ParamStore:
///   <prefix>.router.w            [d_model x N]
///   <prefix>.expert<i>.{w1,b1,w2,b2}
struct MoELayer {
  std::string prefix;
  std::size_t d_model = 0;
  std::size_t d_hidden = 0;
  Activation expert_act = Activation::gelu;
  MoEConfig cfg;

  std::string router_name() const { return prefix + ".router.w"; }
  std::string expert_name(std::size_t i, const char* part) const {
    return prefix + ".expert" + std::to_string(i) + "." + part;
  }

  void init(ParamStore& params, Rng& rng, double router_std = 0.02) const {
    cfg.validate();
    params.add(router_name(), normal_tensor({d_model, cfg.n_experts}, rng, router_std));
    const double s1 = 1.0 / std::sqrt(static_cast<double>(d_model));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(d_hidden));
    for (std::size_t i = 0; i < cfg.n_experts; ++i) {
      params.add(expert_name(i, "w1"), normal_tensor({d_model, d_hidden}, rng, s1));
      params.add(expert_name(i, "b1"), Tensor({d_hidden}, 0.0));
      params.add(expert_name(i, "w2"), normal_tensor({d_hidden, d_model}, rng, s2));
      params.add(expert_name(i, "b2"), Tensor({d_model}, 0.0));
    }
  }

  ad::Var expert_forward(ad::Var x, std::size_t i, const ParamStore::Bound& p, EvalCounter* counter) const {
    if (counter) counter->expert_token_evals += x.rows();
    ad::Var h = ad::add_bias(ad::matmul(x, p.at(expert_name(i, "w1"))), p.at(expert_name(i, "b1")));
    h = ad::activation(h, expert_act);
    return ad::add_bias(ad::matmul(h, p.at(expert_name(i, "w2"))), p.at(expert_name(i, "b2")));
  }

  ad::Var router_logits(ad::Var x, const ParamStore::Bound& p) const { return ad::matmul(x, p.at(router_name())); }

  /// Affinity of one expert's outputs [T x D] -> [T x 1].
  ad::Var affinity(ad::Var expert_out) const {
    if (cfg.affinity == AffinityMode::l2_norm) return ad::row_l2_norm(expert_out);
    return ad::row_mean(ad::activation(expert_out, cfg.kappa));
  }
};

struct MoEAux {
  ad::Var router_logits;        // T x N
  ad::Var router_probs;         // T x N, full softmax
  ad::Var competition_weights;  // T x N, s_C (competition mode only)
  std::vector<ad::Var> winner_outputs;  // K tensors T x D; slot r is the r-th winner's output
  std::vector<RoutingDecision> decisions;
};

struct MoEForward {
  ad::Var output;
  MoEAux aux;
};

namespace detail {

inline std::vector<std::uint8_t> selection_mask(const std::vector<RoutingDecision>& ds, std::size_t n) {
  std::vector<std::uint8_t> mask(ds.size() * n, 0);
  for (std::size_t t = 0; t < ds.size(); ++t)
    for (auto i : ds[t].indices) mask[t * n + i] = 1;
  return mask;
}

// Evaluates each expert on only the tokens that selected it and sums the
// weighted outputs back into a [T x D] matrix.
inline ad::Var sparse_combine(ad::Var x, ad::Var weights, const std::vector<RoutingDecision>& ds, const MoELayer& layer,
                              const ParamStore::Bound& p, EvalCounter* counter) {
  const std::size_t n = layer.cfg.n_experts;
  const std::size_t tokens = x.rows();
  std::vector<std::vector<std::size_t>> routed(n);
  for (std::size_t t = 0; t < tokens; ++t)
    for (auto i : ds[t].indices) routed[i].push_back(t);
  ad::Var out;
  for (std::size_t e = 0; e < n; ++e) {
    if (routed[e].empty()) continue;
    ad::Var xs = ad::gather_rows(x, routed[e]);
    ad::Var ys = layer.expert_forward(xs, e, p, counter);
    ad::Var ws = ad::gather_rows(ad::column(weights, e), routed[e]);
    ad::Var contrib = ad::scatter_add_rows(ad::scale_rows(ys, ws), routed[e], tokens);
    out = out.valid() ? ad::add(out, contrib) : contrib;
  }
  return out;
}

}  // namespace detail

/// One MoE layer over a batch of tokens x [T x d_model].
///   router:      softmax(TopK_{-inf}(x W_r)); only the K chosen experts run.
///   competition: every expert runs; winners by affinity; the router's full
///                softmax is still computed for the distillation target.
///   rank_shift:  router selection with the top expert replaced by rank K+1.
inline MoEForward moe_forward(ad::Var x, const MoELayer& layer, const ParamStore::Bound& p, RoutingMode mode,
                              EvalCounter* counter = nullptr) {
  layer.cfg.validate();
  const std::size_t n = layer.cfg.n_experts;
  const std::size_t k = layer.cfg.k;
  const std::size_t tokens = x.rows();
  ad::Tape& tape = *x.tape();

  MoEForward fwd;
  fwd.aux.router_logits = layer.router_logits(x, p);
  const Tensor& logits = fwd.aux.router_logits.value();
  fwd.aux.router_probs = ad::softmax_rows(fwd.aux.router_logits);

  if (mode == RoutingMode::router || mode == RoutingMode::rank_shift) {
    fwd.aux.decisions.reserve(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      fwd.aux.decisions.push_back(mode == RoutingMode::router ? route_softmax(logits.row_span(t), k)
                                                              : rank_shift_route(logits.row_span(t), k));
    }
    auto mask = detail::selection_mask(fwd.aux.decisions, n);
    ad::Var weights = ad::softmax_rows(fwd.aux.router_logits, &mask);
    fwd.output = detail::sparse_combine(x, weights, fwd.aux.decisions, layer, p, counter);
    return fwd;
  }

  std::vector<ad::Var> outs(n);
  std::vector<ad::Var> scores(n);
  for (std::size_t e = 0; e < n; ++e) {
    outs[e] = layer.expert_forward(x, e, p, counter);
    scores[e] = layer.affinity(outs[e]);
  }
  ad::Var s = ad::concat_cols(scores);
  const Tensor& sv = s.value();
  fwd.aux.decisions.reserve(tokens);
  for (std::size_t t = 0; t < tokens; ++t) fwd.aux.decisions.push_back(competition_decision(sv.row_span(t), k));

  auto mask = detail::selection_mask(fwd.aux.decisions, n);
  Tensor mask_t({tokens, n});
  for (std::size_t i = 0; i < mask.size(); ++i) mask_t[i] = mask[i];
  ad::Var s_hat = ad::mul(s, tape.constant(std::move(mask_t)));
  ad::Var s_c = ad::div_rows(s_hat, ad::row_sum(s_hat));
  fwd.aux.competition_weights = s_c;

  ad::Var out;
  for (std::size_t e = 0; e < n; ++e) {
    ad::Var contrib = ad::scale_rows(outs[e], ad::column(s_c, e));
    out = out.valid() ? ad::add(out, contrib) : contrib;
  }
  fwd.output = out;

  for (std::size_t r = 0; r < k; ++r) {
    ad::Var slot;
    for (std::size_t e = 0; e < n; ++e) {
      Tensor ind({tokens, 1}, 0.0);
      bool any = false;
      for (std::size_t t = 0; t < tokens; ++t) {
        if (fwd.aux.decisions[t].indices[r] == e) {
          ind[t] = 1.0;
          any = true;
        }
      }
      if (!any) continue;
      ad::Var part = ad::scale_rows(outs[e], tape.constant(std::move(ind)));
      slot = slot.valid() ? ad::add(slot, part) : part;
    }
    fwd.aux.winner_outputs.push_back(slot);
  }
  return fwd;
}

/// Token-level competition affinities and expert outputs, evaluated densely.
struct AffinityResult {
  std::vector<double> scores;
  std::vector<Tensor> outputs;
};

inline AffinityResult competition_affinity(const Tensor& token, const MoELayer& layer, const ParamStore& params) {
  if (token.size() != layer.d_model) throw DimensionError("competition_affinity: token has wrong width");
  ad::Tape tape;
  auto p = params.bind(tape);
  ad::Var x = tape.constant(Tensor({1, layer.d_model}, token.values()));
  AffinityResult r;
  for (std::size_t e = 0; e < layer.cfg.n_experts; ++e) {
    ad::Var y = layer.expert_forward(x, e, p, nullptr);
    r.scores.push_back(layer.affinity(y).value().item());
    r.outputs.push_back(y.value());
  }
  return r;
}

/// Token-level competition routing: decision and combined output.
inline std::pair<RoutingDecision, Tensor> competition_route(const Tensor& token, const MoELayer& layer,
                                                            const ParamStore& params) {
  auto aff = competition_affinity(token, layer, params);
  RoutingDecision d = competition_decision(aff.scores, layer.cfg.k);
  Tensor out({1, layer.d_model}, 0.0);
  for (std::size_t j = 0; j < d.indices.size(); ++j) {
    const Tensor& y = aff.outputs[d.indices[j]];
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += d.weights[j] * y[c];
  }
  return {std::move(d), std::move(out)};
}

}  // namespace csmoe
