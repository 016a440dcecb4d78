#pragma once

#include <memory>
#include <string>
#include <vector>

#include "csmoe/gradcheck.hpp"
#include "csmoe/losses.hpp"
#include "csmoe/moe_layer.hpp"
#include "csmoe/ops.hpp"
#include "csmoe/random.hpp"
#include "csmoe/trainer.hpp"

namespace csmoe {

/// Named scalar function with its parameters, ready for finite_diff_check.
struct GradCase {
  std::string op;
  ParamStore params;
  ScalarFn f;
};

enum class GradScope { layer, losses, full };

inline GradScope parse_grad_scope(std::string_view s) {
  if (s == "layer") return GradScope::layer;
  if (s == "losses") return GradScope::losses;
  if (s == "full") return GradScope::full;
  throw ConfigError("unknown gradcheck scope '" + std::string(s) + "'");
}

namespace detail {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

// Values bounded away from zero, for ops with a kink there.
inline Tensor off_zero_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.1, 1.5);
  return t;
}

// Contracts an arbitrary output with fixed random weights so every output
// coordinate reaches the gradient.
inline ad::Var probe(ad::Var y, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x9E0BE);
  return ad::sum(ad::mul(y, y.tape()->constant(uniform_tensor(y.shape(), rng, -1.0, 1.0))));
}

class CaseBuilder {
 public:
  explicit CaseBuilder(std::uint64_t seed) : rng_(make_rng(seed, 0x6CA5E)), seed_(seed) {}

  std::size_t dim() { return 2 + uniform_index(rng_, 5); }  // 2..6
  Rng& rng() { return rng_; }

  void unary(std::vector<GradCase>& out, const std::string& op, Shape shape, std::function<ad::Var(ad::Var)> fn,
             bool off_zero = false) {
    ParamStore p;
    p.add("x", off_zero ? off_zero_tensor(shape, rng_) : uniform_tensor(shape, rng_, -1.5, 1.5));
    const std::uint64_t s = seed_ + out.size();
    out.push_back({op, std::move(p), [fn, s](ad::Tape&, const ParamStore::Bound& b) { return probe(fn(b.at("x")), s); }});
  }

  void binary(std::vector<GradCase>& out, const std::string& op, Shape sa, Shape sb, std::function<ad::Var(ad::Var, ad::Var)> fn,
              double lo_b = -1.5, double hi_b = 1.5) {
    ParamStore p;
    p.add("a", uniform_tensor(sa, rng_, -1.5, 1.5));
    p.add("b", uniform_tensor(sb, rng_, lo_b, hi_b));
    const std::uint64_t s = seed_ + out.size();
    out.push_back({op, std::move(p), [fn, s](ad::Tape&, const ParamStore::Bound& b) { return probe(fn(b.at("a"), b.at("b")), s); }});
  }

 private:
  Rng rng_;
  std::uint64_t seed_;
};

}  // namespace detail

/// Every differentiable primitive on randomized small shapes.
inline std::vector<GradCase> op_cases(std::uint64_t seed = 1) {
  detail::CaseBuilder cb(seed);
  std::vector<GradCase> out;
  const std::size_t m = cb.dim(), k = cb.dim(), n = cb.dim();
  cb.binary(out, "matmul", {m, k}, {k, n}, ad::matmul);
  cb.unary(out, "transpose", {m, n}, ad::transpose);
  cb.binary(out, "add", {m, n}, {m, n}, ad::add);
  cb.binary(out, "sub", {m, n}, {m, n}, ad::sub);
  cb.binary(out, "mul", {m, n}, {m, n}, ad::mul);
  cb.unary(out, "scale", {m, n}, [](ad::Var x) { return ad::scale(x, -1.7); });
  cb.unary(out, "add_scalar", {m, n}, [](ad::Var x) { return ad::add_scalar(x, 0.3); });
  cb.binary(out, "add_bias", {m, n}, {n}, ad::add_bias);
  for (Activation a : {Activation::softplus, Activation::relu, Activation::sigmoid, Activation::silu, Activation::gelu,
                       Activation::softmax}) {
    cb.unary(out, std::string("activation.") + to_string(a), {m, n}, [a](ad::Var x) { return ad::activation(x, a); },
             a == Activation::relu);
  }
  {
    std::vector<std::uint8_t> keep(m * n, 0);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) keep[r * n + c] = (r + c) % 2 == 0 || c == 0;
    cb.unary(out, "softmax_masked", {m, n}, [keep](ad::Var x) { return ad::softmax_rows(x, &keep); });
  }
  cb.unary(out, "logsumexp_rows", {m, n}, ad::logsumexp_rows);
  cb.unary(out, "row_sum", {m, n}, ad::row_sum);
  cb.unary(out, "row_mean", {m, n}, ad::row_mean);
  cb.unary(out, "sum", {m, n}, ad::sum);
  cb.unary(out, "mean", {m, n}, ad::mean);
  cb.unary(out, "row_l2_norm", {m, n}, ad::row_l2_norm, true);
  cb.unary(out, "row_normalize", {m, n}, ad::row_normalize, true);
  cb.unary(out, "rms_norm_rows", {m, n}, [](ad::Var x) { return ad::rms_norm_rows(x); }, true);
  cb.binary(out, "scale_rows", {m, n}, {m, 1}, ad::scale_rows);
  cb.binary(out, "div_rows", {m, n}, {m, 1}, ad::div_rows, 0.5, 2.0);
  cb.unary(out, "column", {m, n}, [](ad::Var x) { return ad::column(x, 1); });
  cb.binary(out, "concat_cols", {m, k}, {m, n}, [](ad::Var a, ad::Var b) { return ad::concat_cols({a, b, a}); });
  cb.binary(out, "concat_rows", {k, n}, {m, n}, [](ad::Var a, ad::Var b) { return ad::concat_rows({b, a, b}); });
  cb.unary(out, "slice_rows", {m + 2, n}, [](ad::Var x) { return ad::slice_rows(x, 1, 2); });
  cb.unary(out, "gather_rows", {m, n}, [m](ad::Var x) { return ad::gather_rows(x, {m - 1, 0, m - 1, 1}); });
  cb.unary(out, "scatter_add_rows", {3, n}, [m](ad::Var x) { return ad::scatter_add_rows(x, {0, m - 1, 0}, m); });
  {
    ParamStore p;
    p.add("logits", detail::uniform_tensor({m, n}, cb.rng(), -2.0, 2.0));
    std::vector<std::size_t> targets(m);
    for (std::size_t r = 0; r < m; ++r) targets[r] = (r * 7 + 1) % n;
    out.push_back({"cross_entropy", std::move(p),
                   [targets](ad::Tape&, const ParamStore::Bound& b) { return ad::cross_entropy(b.at("logits"), targets); }});
  }
  return out;
}

namespace detail {

inline MoELayer small_layer(std::size_t d, std::size_t h, std::size_t n, std::size_t k, AffinityMode aff) {
  MoEConfig cfg;
  cfg.n_experts = n;
  cfg.k = k;
  cfg.affinity = aff;
  return MoELayer{"moe", d, h, Activation::gelu, cfg};
}

inline ParamStore layer_params(const MoELayer& layer, std::uint64_t seed, std::size_t tokens) {
  ParamStore p;
  Rng rng = make_rng(seed, 0x1A7E5);
  layer.init(p, rng, 0.5);
  for (std::size_t i = 0; i < layer.cfg.n_experts; ++i) {
    p.at(layer.expert_name(i, "b1")) = uniform_tensor({layer.d_hidden}, rng, -0.3, 0.3);
    p.at(layer.expert_name(i, "b2")) = uniform_tensor({layer.d_model}, rng, -0.3, 0.3);
  }
  p.add("x", uniform_tensor({tokens, layer.d_model}, rng, -1.5, 1.5));
  return p;
}

}  // namespace detail

/// MoE layer forward in every routing mode, as a function of all weights and
/// the input tokens.
inline std::vector<GradCase> layer_cases(std::uint64_t seed = 2) {
  std::vector<GradCase> out;
  struct Variant {
    const char* name;
    RoutingMode mode;
    AffinityMode aff;
  };
  for (Variant v : {Variant{"moe_layer.router", RoutingMode::router, AffinityMode::mean_kappa},
                    Variant{"moe_layer.rank_shift", RoutingMode::rank_shift, AffinityMode::mean_kappa},
                    Variant{"moe_layer.competition", RoutingMode::competition, AffinityMode::mean_kappa},
                    Variant{"moe_layer.competition_l2", RoutingMode::competition, AffinityMode::l2_norm}}) {
    MoELayer layer = detail::small_layer(4, 5, 4, 2, v.aff);
    ParamStore p = detail::layer_params(layer, seed + out.size(), 6);
    const std::uint64_t s = seed + 100 + out.size();
    out.push_back({v.name, std::move(p), [layer, mode = v.mode, s](ad::Tape&, const ParamStore::Bound& b) {
                     auto f = moe_forward(b.at("x"), layer, b, mode);
                     ad::Var y = detail::probe(f.output, s);
                     if (mode == RoutingMode::competition) y = ad::add(y, detail::probe(f.aux.competition_weights, s + 1));
                     return y;
                   }});
  }
  return out;
}

/// Loss terms as functions of their differentiable inputs.
inline std::vector<GradCase> loss_cases(std::uint64_t seed = 3) {
  detail::CaseBuilder cb(seed);
  std::vector<GradCase> out;
  const std::size_t t = 5, n = 4, d = 6;
  {
    ParamStore p;
    p.add("logits", detail::uniform_tensor({t, n}, cb.rng(), -2, 2));
    std::vector<std::size_t> y = {0, 3, 1, 1, 2};
    out.push_back({"loss.nll", std::move(p), [y](ad::Tape&, const ParamStore::Bound& b) { return loss::nll(b.at("logits"), y); }});
  }
  {
    ParamStore p;
    p.add("router_logits", detail::uniform_tensor({t, n}, cb.rng(), -2, 2));
    p.add("competition", detail::uniform_tensor({t, n}, cb.rng(), 0.1, 1.0));
    std::vector<std::vector<std::size_t>> winners = {{0, 1}, {2, 3}, {1, 3}, {0, 2}, {3, 0}};
    out.push_back({"loss.distill", std::move(p), [winners](ad::Tape&, const ParamStore::Bound& b) {
                     return loss::distill(ad::softmax_rows(b.at("router_logits")), b.at("competition"), winners, 0.1);
                   }});
  }
  {
    ParamStore p;
    p.add("o", detail::uniform_tensor({3, d}, cb.rng(), -1.5, 1.5));
    out.push_back({"loss.diversity", std::move(p), [](ad::Tape&, const ParamStore::Bound& b) { return loss::diversity(b.at("o")); }});
  }
  {
    ParamStore p;
    p.add("slot0", detail::uniform_tensor({t, d}, cb.rng(), -1.5, 1.5));
    p.add("slot1", detail::uniform_tensor({t, d}, cb.rng(), -1.5, 1.5));
    p.add("slot2", detail::uniform_tensor({t, d}, cb.rng(), -1.5, 1.5));
    out.push_back({"loss.diversity_batched", std::move(p), [](ad::Tape&, const ParamStore::Bound& b) {
                     return loss::diversity_batched({b.at("slot0"), b.at("slot1"), b.at("slot2")});
                   }});
  }
  {
    ParamStore p;
    p.add("router_logits", detail::uniform_tensor({t, n}, cb.rng(), -2, 2));
    std::vector<std::size_t> top1 = {0, 0, 2, 3, 1};
    out.push_back({"loss.balance", std::move(p), [top1](ad::Tape&, const ParamStore::Bound& b) {
                     return loss::balance(ad::softmax_rows(b.at("router_logits")), top1);
                   }});
  }
  {
    ParamStore p;
    p.add("router_logits", detail::uniform_tensor({t, n}, cb.rng(), -2, 2));
    out.push_back({"loss.z", std::move(p), [](ad::Tape&, const ParamStore::Bound& b) { return loss::z(b.at("router_logits")); }});
  }
  return out;
}

/// Composed competition-step objective of a tiny two-layer model: layer 0
/// competes, layer 1 routes.
inline GradCase full_step_case(std::uint64_t seed = 4) {
  RunConfig cfg;
  cfg.model.vocab = 8;
  cfg.model.d_model = 4;
  cfg.model.d_hidden = 4;
  cfg.model.layers = 2;
  cfg.model.context = 4;
  cfg.losses.gamma = 0.5;
  cfg.losses.beta = 0.3;
  cfg.losses.balance_coeff = 0.1;
  cfg.losses.z_coeff = 0.05;
  LanguageModel model(cfg.model, seed);
  Rng rng = make_rng(seed, 0xF0117);
  for (auto& [name, t] : model.params().all())
    if (name.find(".router.") != std::string::npos || name == "embed" || name == "pos") t = normal_tensor(t.shape(), rng, 0.5);
  Batch batch;
  batch.batch = 2;
  batch.context = 4;
  for (std::size_t i = 0; i < 8; ++i) {
    batch.inputs.push_back(uniform_index(rng, 8));
    batch.targets.push_back(uniform_index(rng, 8));
  }
  const std::vector<RoutingMode> modes = {RoutingMode::competition, RoutingMode::router};
  // The distillation target carries no gradient; the difference quotients
  // must hold it fixed too.
  std::map<std::size_t, Tensor> targets;
  {
    ad::Tape tape;
    targets = compose_loss(model, model.params().bind(tape), batch, modes, cfg.losses).targets;
  }
  ParamStore params = model.params();
  auto shared = std::make_shared<LanguageModel>(std::move(model));
  return {"full_competition_step", std::move(params),
          [shared, batch, modes, targets, w = cfg.losses](ad::Tape&, const ParamStore::Bound& b) {
            return compose_loss(*shared, b, batch, modes, w, nullptr, &targets).total;
          }};
}

inline std::vector<GradCase> grad_cases(GradScope scope) {
  std::vector<GradCase> out;
  auto append = [&](std::vector<GradCase> v) {
    for (auto& c : v) out.push_back(std::move(c));
  };
  if (scope == GradScope::layer || scope == GradScope::full) {
    append(op_cases());
    append(layer_cases());
  }
  if (scope == GradScope::losses || scope == GradScope::full) append(loss_cases());
  if (scope == GradScope::full) out.push_back(full_step_case());
  return out;
}

struct GradSuiteResult {
  std::vector<std::pair<std::string, GradCheckReport>> reports;
  double max_rel_error = 0.0;
  std::string worst_op;
  bool all_deterministic = true;
};

inline GradSuiteResult run_grad_suite(const std::vector<GradCase>& cases, const GradCheckOptions& opt = {}) {
  GradSuiteResult r;
  for (const auto& c : cases) {
    auto rep = finite_diff_check(c.f, c.params, opt);
    r.all_deterministic = r.all_deterministic && rep.deterministic;
    if (r.worst_op.empty() || rep.max_rel_error > r.max_rel_error) {
      r.max_rel_error = rep.max_rel_error;
      r.worst_op = c.op;
    }
    r.reports.push_back({c.op, rep});
  }
  return r;
}

}  // namespace csmoe
