#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "csmoe/checkpoint.hpp"
#include "csmoe/config.hpp"
#include "csmoe/losses.hpp"
#include "csmoe/metrics.hpp"
#include "csmoe/model.hpp"
#include "csmoe/scheduler.hpp"
#include "csmoe/synthdata.hpp"

namespace csmoe {

/// Raised when a training step produces a non-finite loss or parameter.
/// diagnostics names the offending layer and terms; dump_path is set once the
/// diagnostics were written to disk.
struct TrainingAbort : NumericError {
  TrainingAbort(const std::string& msg, std::string diag) : NumericError(msg), diagnostics(std::move(diag)) {}
  std::string diagnostics;
  std::string dump_path;
};

struct StepReport {
  std::size_t step = 0;
  double nll = 0.0;
  double l_d = 0.0;    // summed over competing layers
  double l_div = 0.0;  // summed over competing layers
  double balance = 0.0;
  double z = 0.0;
  double total = 0.0;
  double lr = 0.0;
  std::size_t active_layers = 0;
  std::size_t expert_evals = 0;
};

struct LayerLosses {
  double balance = 0.0;
  double z = 0.0;
  double l_d = 0.0;
  double l_div = 0.0;
  bool competing = false;
};

struct ComposedLoss {
  ad::Var total;
  double nll = 0.0;
  std::vector<LayerLosses> layers;
  std::map<std::size_t, Tensor> targets;  // s_C of each competing layer
};

/// Objective for one batch: NLL, balance and z terms on every layer's router,
/// plus gamma * L_D + beta * L_div on competing layers. The competition
/// policy is a fixed target for L_D; frozen_targets (layer -> s_C) replaces it
/// with given values, which lets finite differences see the same surrogate.
inline ComposedLoss compose_loss(const LanguageModel& model, const ParamStore::Bound& p, const Batch& batch,
                                 const std::vector<RoutingMode>& modes, const LossWeights& w, EvalCounter* counter = nullptr,
                                 const std::map<std::size_t, Tensor>* frozen_targets = nullptr) {
  auto fwd = model.forward(p, batch, modes, counter);
  ComposedLoss out;
  ad::Var nll = loss::nll(fwd.logits, batch.targets);
  out.nll = nll.value().item();
  ad::Var total = nll;
  auto add_term = [&](ad::Var term, double coeff) {
    if (coeff != 0.0) total = ad::add(total, ad::scale(term, coeff));
  };
  for (std::size_t l = 0; l < fwd.moe.size(); ++l) {
    const MoEAux& aux = fwd.moe[l].aux;
    LayerLosses ll;
    const Tensor& logits = aux.router_logits.value();
    std::vector<std::size_t> top1(logits.rows());
    for (std::size_t t = 0; t < logits.rows(); ++t) top1[t] = topk_indices(logits.row_span(t), 1)[0];
    ad::Var bal = loss::balance(aux.router_probs, top1);
    ad::Var zl = loss::z(aux.router_logits);
    ll.balance = bal.value().item();
    ll.z = zl.value().item();
    add_term(bal, w.balance_coeff);
    add_term(zl, w.z_coeff);
    if (modes[l] == RoutingMode::competition) {
      ll.competing = true;
      std::vector<std::vector<std::size_t>> winners;
      winners.reserve(aux.decisions.size());
      for (const auto& d : aux.decisions) winners.push_back(d.indices);
      ad::Var target = ad::detach(aux.competition_weights);
      if (frozen_targets && frozen_targets->count(l)) target = p.begin()->second.tape()->constant(frozen_targets->at(l));
      ad::Var ld = loss::distill(aux.router_probs, target, winners, w.alpha);
      out.targets[l] = aux.competition_weights.value();
      ll.l_d = ld.value().item();
      add_term(ld, w.gamma);
      if (aux.winner_outputs.size() >= 2) {
        ad::Var div = loss::diversity_batched(aux.winner_outputs);
        ll.l_div = div.value().item();
        add_term(div, w.beta);
      }
    }
    out.layers.push_back(ll);
  }
  out.total = total;
  return out;
}

struct StepOptions {
  LossWeights weights;
  double lr = 0.1;
  bool freeze_router_on_normal_steps = false;
};

namespace detail {

inline std::string describe_losses(const ComposedLoss& c, std::size_t step) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "step " << step << "\nnll " << c.nll << "\n";
  for (std::size_t l = 0; l < c.layers.size(); ++l) {
    const auto& ll = c.layers[l];
    const bool bad = !std::isfinite(ll.balance) || !std::isfinite(ll.z) || !std::isfinite(ll.l_d) || !std::isfinite(ll.l_div);
    os << "layer " << l << (ll.competing ? " competition" : " router") << " balance " << ll.balance << " z " << ll.z
       << " l_d " << ll.l_d << " l_div " << ll.l_div << (bad ? "  <-- non-finite" : "") << "\n";
  }
  return os.str();
}

}  // namespace detail

/// One optimizer step. active[l] != 0 puts layer l in competition mode.
inline StepReport train_step(TrainState& state, const Batch& batch, const std::vector<std::uint8_t>& active,
                             const StepOptions& opt) {
  const LanguageModel& model = state.model;
  const std::size_t layers = model.config().layers;
  if (active.size() != layers) throw ContractError("train_step: one schedule entry per layer required");
  std::vector<RoutingMode> modes(layers);
  for (std::size_t l = 0; l < layers; ++l) modes[l] = active[l] ? RoutingMode::competition : RoutingMode::router;

  EvalCounter counter;
  ad::Tape tape;
  auto bound = model.params().bind(tape);
  ComposedLoss c;
  try {
    c = compose_loss(model, bound, batch, modes, opt.weights, &counter);
  } catch (const TrainingAbort&) {
    throw;
  } catch (const NumericError& e) {
    throw TrainingAbort(std::string("non-finite forward pass at step ") + std::to_string(state.step) + ": " + e.what(),
                        std::string("step ") + std::to_string(state.step) + "\nforward error: " + e.what() + "\n");
  }
  const double total = c.total.value().item();
  if (!std::isfinite(total)) {
    throw TrainingAbort("non-finite loss at step " + std::to_string(state.step), detail::describe_losses(c, state.step));
  }
  auto grads = tape.backward(c.total);
  if (opt.freeze_router_on_normal_steps) {
    for (std::size_t l = 0; l < layers; ++l) {
      if (modes[l] != RoutingMode::router) continue;
      auto& g = grads.at(model.layers()[l].router_name());
      g = Tensor(g.shape(), 0.0);
    }
  }
  state.optimizer.step(state.model.params(), grads, opt.lr);
  if (!state.model.params().all_finite()) {
    throw TrainingAbort("non-finite parameters after step " + std::to_string(state.step), detail::describe_losses(c, state.step));
  }

  StepReport r;
  r.step = state.step;
  r.nll = c.nll;
  r.total = total;
  r.lr = opt.lr;
  r.expert_evals = counter.expert_token_evals;
  for (const auto& ll : c.layers) {
    r.balance += ll.balance;
    r.z += ll.z;
    r.l_d += ll.l_d;
    r.l_div += ll.l_div;
    r.active_layers += ll.competing;
  }
  ++state.step;
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalResult {
  double mean_nll = 0.0;
  double perplexity = 0.0;
  std::size_t tokens = 0;
  std::size_t expert_evals = 0;
  AssignmentTable table;
};

/// Inference pass over fixed batches with every layer in the given routing
/// mode. Records each (token, layer) decision.
inline EvalResult eval_model(const LanguageModel& model, const std::vector<Batch>& batches, RoutingMode routing,
                             const std::string& fingerprint = {}, std::size_t step = 0) {
  const auto& mc = model.config();
  if (routing == RoutingMode::rank_shift && mc.moe.k + 1 > mc.moe.n_experts) {
    throw ConfigError("rank shift needs K+1 <= N, got K=" + std::to_string(mc.moe.k) + " N=" + std::to_string(mc.moe.n_experts));
  }
  EvalResult r;
  r.table.fingerprint = fingerprint;
  r.table.step = step;
  r.table.routing = to_string(routing);
  r.table.layers = mc.layers;
  r.table.n_experts = mc.moe.n_experts;
  r.table.k = mc.moe.k;
  std::vector<RoutingMode> modes(mc.layers, routing);
  EvalCounter counter;
  double nll_sum = 0.0;
  for (const auto& batch : batches) {
    ad::Tape tape;
    auto bound = model.params().bind(tape, false);
    auto fwd = model.forward(bound, batch, modes, &counter);
    const std::size_t n = batch.targets.size();
    nll_sum += loss::nll(fwd.logits, batch.targets).value().item() * static_cast<double>(n);
    r.tokens += n;
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t l = 0; l < mc.layers; ++l) {
        const auto& d = fwd.moe[l].aux.decisions[t];
        r.table.push(d.indices, d.weights);
      }
  }
  if (r.tokens == 0) throw DataError("eval_model: no evaluation tokens");
  r.mean_nll = nll_sum / static_cast<double>(r.tokens);
  r.perplexity = std::exp(r.mean_nll);
  r.expert_evals = counter.expert_token_evals;
  return r;
}

// ---------------------------------------------------------------------------
// Whole runs.

struct Datasets {
  Corpus train;
  Corpus valid;
};

inline Datasets make_datasets(const DataSpec& spec) { return {generate_corpus(spec, 0), generate_corpus(spec, 1)}; }

inline std::vector<Batch> validation_batches(const RunConfig& cfg, const Corpus& valid) {
  auto all = eval_batches(valid, cfg.train.batch, cfg.model.context);
  if (cfg.train.eval_batches > 0 && all.size() > cfg.train.eval_batches) all.resize(cfg.train.eval_batches);
  return all;
}

/// Schedule for a run; the baseline never competes.
inline Schedule run_schedule(const RunConfig& cfg) {
  const double omega = cfg.train.baseline ? 0.0 : cfg.schedule.omega;
  return generate_schedule(cfg.model.layers, cfg.train.steps, omega, cfg.schedule.a_max, cfg.schedule.warmup_frac,
                           splitmix64(cfg.train.seed ^ 0x5C7ED01EULL));
}

struct EvalPoint {
  std::size_t step = 0;
  double perplexity = 0.0;
};

struct TrainResult {
  TrainState state;
  Schedule schedule;
  std::vector<StepReport> steps;
  std::vector<EvalPoint> evals;
  std::size_t expert_evals = 0;
  std::vector<std::string> checkpoints;
};

struct RunOptions {
  std::string out_dir;                       // empty: no files
  std::function<void(const StepReport&)> on_step;
  std::ostream* log = nullptr;               // progress lines
};

inline void write_metrics_header(std::ostream& os, const std::string& hash) {
  os << "# config_hash=" << hash << "\n";
  os << "step,nll,l_d,l_div,balance,z,ppl,active_layers\n";
}

/// Warm-up, then scheduled steps. Validation perplexity is logged every
/// eval_every steps and at the end.
inline TrainResult run_training(const RunConfig& cfg, const Datasets& data, const RunOptions& opt = {}) {
  cfg.validate();
  TrainResult res{init_state(cfg), run_schedule(cfg), {}, {}, 0, {}};
  const auto valid = validation_batches(cfg, data.valid);
  const std::string fp = data.valid.fingerprint();
  const std::string hash = config_hash(cfg);

  std::ofstream metrics;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    save_schedule(opt.out_dir + "/schedule.txt", res.schedule);
    metrics.open(opt.out_dir + "/metrics.csv");
    if (!metrics) throw DataError("cannot write " + opt.out_dir + "/metrics.csv");
    write_metrics_header(metrics, hash);
    metrics << std::setprecision(10);
  }

  auto evaluate = [&](std::size_t step) {
    double ppl = eval_model(res.state.model, valid, RoutingMode::router, fp, step).perplexity;
    res.evals.push_back({step, ppl});
    return ppl;
  };
  auto checkpoint = [&](const std::string& name) {
    if (opt.out_dir.empty()) return;
    std::string path = opt.out_dir + "/" + name;
    save_checkpoint(path, res.state, cfg);
    res.checkpoints.push_back(path);
  };

  if (cfg.train.steps == 0) {
    evaluate(0);
    checkpoint("final.ckpt");
    return res;
  }

  BatchIterator it(data.train, cfg.train.batch, cfg.model.context, cfg.train.seed);
  StepOptions so{cfg.losses, cfg.train.lr, cfg.train.freeze_router_on_normal_steps};
  const std::size_t warm = warmup_steps(cfg.train.steps, cfg.schedule.warmup_frac);
  std::vector<std::uint8_t> active(cfg.model.layers);
  for (std::size_t t = 0; t < cfg.train.steps; ++t) {
    for (std::size_t l = 0; l < cfg.model.layers; ++l) active[l] = res.schedule.lambda[l][t];
    so.lr = cosine_step_size(t, cfg.train.steps, cfg.train.lr, cfg.train.lr_min);
    so.freeze_router_on_normal_steps = cfg.train.freeze_router_on_normal_steps && t >= warm;
    StepReport r;
    try {
      r = train_step(res.state, it.next(), active, so);
    } catch (TrainingAbort& e) {
      if (!opt.out_dir.empty()) {
        e.dump_path = opt.out_dir + "/abort_diagnostics.txt";
        std::ofstream d(e.dump_path);
        d << e.what() << "\n" << e.diagnostics;
      }
      throw;
    }
    res.expert_evals += r.expert_evals;
    const bool last = t + 1 == cfg.train.steps;
    const bool do_eval = last || (cfg.train.eval_every > 0 && (t + 1) % cfg.train.eval_every == 0);
    double ppl = do_eval ? evaluate(t + 1) : std::nan("");
    if (metrics.is_open()) {
      metrics << r.step << ',' << r.nll << ',' << r.l_d << ',' << r.l_div << ',' << r.balance << ',' << r.z << ',';
      if (do_eval) metrics << ppl;
      metrics << ',' << r.active_layers << '\n';
    }
    if (opt.log && do_eval) *opt.log << "step " << t + 1 << " nll " << r.nll << " val_ppl " << ppl << "\n";
    if (opt.on_step) opt.on_step(r);
    res.steps.push_back(r);
    if (!last && cfg.train.checkpoint_every > 0 && (t + 1) % cfg.train.checkpoint_every == 0) {
      checkpoint("step" + std::to_string(t + 1) + ".ckpt");
    }
  }
  checkpoint("final.ckpt");
  return res;
}

}  // namespace csmoe
