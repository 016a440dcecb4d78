// csmoe: train, evaluate and measure competition-routed MoE models, and run
// the statistical rate experiments.
//
// Exit codes: 0 ok, 1 check failure, 2 user error, 3 numeric abort.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "csmoe/gradcheck_suite.hpp"
#include "csmoe/statlab.hpp"
#include "csmoe/trainer.hpp"

using namespace csmoe;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kCheckFailed = 1, kUserError = 2, kNumericAbort = 3;

std::string default_out_dir(const std::string& leaf) {
  const char* env = std::getenv("CSMOE_OUT_DIR");
  return (fs::path(env && *env ? env : "csmoe_out") / leaf).string();
}

void write_json(const std::string& path, const Json& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os << j.dump(2) << "\n";
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, out;
  bool baseline = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.baseline) cfg.train.baseline = true;
  const std::string hash = config_hash(cfg);
  const std::string out = a.out.empty() ? default_out_dir("train-" + hash.substr(0, 8)) : a.out;
  fs::create_directories(out);
  write_json(out + "/config.json", config_to_json(cfg));

  auto data = make_datasets(cfg.data);
  export_corpus(data.valid, out + "/valid");
  std::cout << "config_hash " << hash << "\n";
  std::cout << (cfg.train.baseline ? "baseline" : "competition") << " run, " << cfg.train.steps << " steps -> " << out << "\n";
  try {
    auto res = run_training(cfg, data, RunOptions{out, {}, &std::cout});
    std::cout << "final val_ppl " << std::setprecision(6) << res.evals.back().perplexity << "\n";
    std::cout << "expert_evals " << res.expert_evals << " dropped_activations " << res.schedule.dropped << "\n";
  } catch (const TrainingAbort& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    if (!e.dump_path.empty()) std::cerr << "diagnostics: " << e.dump_path << "\n";
    return kNumericAbort;
  }
  return kOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, routing = "router", out;
};

int cmd_eval(const EvalArgs& a) {
  const RoutingMode mode = parse_routing_mode(a.routing);
  auto ck = load_checkpoint(a.checkpoint);
  const RunConfig& cfg = ck.config;
  Corpus valid = a.data.empty() ? make_datasets(cfg.data).valid : import_corpus(a.data);
  if (valid.vocab != cfg.model.vocab) throw DataError("evaluation corpus vocabulary does not match the model");
  const auto batches = validation_batches(cfg, valid);
  auto r = eval_model(ck.state.model, batches, mode, valid.fingerprint(), ck.state.step);

  const std::string hash = config_hash(cfg);
  const std::string out = a.out.empty() ? default_out_dir("eval-" + hash.substr(0, 8)) : a.out;
  fs::create_directories(out);
  const std::string tag = to_string(mode);
  save_assignments(out + "/assignments_" + tag + ".csv", r.table);
  std::ofstream os(out + "/eval_" + tag + ".csv");
  if (!os) throw DataError("cannot write to " + out);
  write_metric_rows(os,
                    {{"perplexity", -1, ck.state.step, r.perplexity},
                     {"mean_nll", -1, ck.state.step, r.mean_nll},
                     {"tokens", -1, ck.state.step, static_cast<double>(r.tokens)},
                     {"expert_evals", -1, ck.state.step, static_cast<double>(r.expert_evals)}},
                    hash);
  std::cout << "routing " << tag << " step " << ck.state.step << " perplexity " << std::setprecision(8) << r.perplexity
            << " tokens " << r.tokens << "\n";
  std::cout << "wrote " << out << "/eval_" << tag << ".csv and assignments_" << tag << ".csv\n";
  return kOk;
}

// --- metrics ---------------------------------------------------------------

struct MetricsArgs {
  std::string kind, a, b, out;
  long layer = -1;
};

int cmd_metrics(const MetricsArgs& m) {
  const AssignmentTable ta = load_assignments(m.a);
  std::vector<MetricRow> rows;
  if (m.kind == "ecr" || m.kind == "level-learning") {
    if (m.b.empty()) throw ConfigError("--b is required for " + m.kind);
    const AssignmentTable tb = load_assignments(m.b);
    if (m.kind == "ecr") {
      rows.push_back({"ecr", -1, tb.step, expert_change_rate(ta, tb)});
    } else {
      auto ll = level_learning(ta, tb);
      rows.push_back({"level_learning_raw", -1, ta.step, static_cast<double>(ll.raw)});
      rows.push_back({"level_learning", -1, ta.step, ll.normalized});
    }
  } else if (m.kind == "selection-entropy" || m.kind == "weight-entropy") {
    if (m.layer >= static_cast<long>(ta.layers)) throw ConfigError("--layer out of range");
    const std::size_t first = m.layer < 0 ? 0 : static_cast<std::size_t>(m.layer);
    const std::size_t last = m.layer < 0 ? ta.layers : first + 1;
    for (std::size_t l = first; l < last; ++l) {
      const double v = m.kind == "selection-entropy" ? selection_entropy(ta, l) : weight_entropy(ta, l);
      rows.push_back({m.kind == "selection-entropy" ? "selection_entropy" : "weight_entropy", static_cast<long>(l), ta.step, v});
    }
  } else {
    throw ConfigError("unknown metric kind '" + m.kind + "'");
  }
  write_metric_rows(std::cout, rows, ta.fingerprint);
  if (!m.out.empty()) {
    std::ofstream os(m.out);
    if (!os) throw DataError("cannot write " + m.out);
    write_metric_rows(os, rows, ta.fingerprint);
  }
  return kOk;
}

// --- ratelab ---------------------------------------------------------------

struct RateArgs {
  std::string config, out;
  bool dry_run = false;
  std::size_t workers = 0;
};

int cmd_ratelab(const RateArgs& a) {
  const RunConfig cfg = load_config(a.config);
  const std::string hash = config_hash(cfg);
  const auto specs = stat::rate_specs(cfg, a.workers);
  for (const auto& s : specs) {
    s.validate();
    stat::ground_truth(s.kind, s.n_true);
  }
  std::cout << "config_hash " << hash << "\n";
  for (const auto& s : specs) {
    std::cout << "plan " << s.id() << " n_grid";
    for (auto n : s.n_grid) std::cout << ' ' << n;
    std::cout << " reps " << s.reps << " restarts " << s.fit.restarts << " jobs " << s.n_grid.size() * s.reps << "\n";
  }
  if (a.dry_run) return kOk;

  const std::string out = a.out.empty() ? default_out_dir("ratelab-" + hash.substr(0, 8)) : a.out;
  fs::create_directories(out);
  std::ofstream summary(out + "/summary.csv");
  if (!summary) throw DataError("cannot write to " + out);
  summary << "# config_hash=" << hash << "\n";
  summary << "experiment_id,quantity,slope,ci_low,ci_high,failures\n";
  summary << std::setprecision(6);
  for (const auto& spec : specs) {
    std::ofstream csv(out + "/rates_" + spec.id() + ".csv");
    stat::write_rate_header(csv, hash);
    std::mutex mu;
    auto res = stat::rate_experiment(spec, [&](const stat::RateRow& r) {
      std::lock_guard lock(mu);
      std::cout << spec.id() << " n " << r.n << " rep " << r.rep << " loss " << r.loss << " " << r.fit_status << "\n";
    });
    for (const auto& r : res.rows) stat::write_rate_row(csv, r);

    std::vector<std::pair<std::string, double stat::RateRow::*>> quantities = {
        {"loss", &stat::RateRow::loss}, {"tv", &stat::RateRow::tv}, {"max_singleton_err", &stat::RateRow::max_singleton_err}};
    if (spec.n_fit > spec.n_true) quantities.push_back({"max_multicell_err", &stat::RateRow::max_multicell_err});
    for (const auto& [name, col] : quantities) {
      const auto pts = res.points(col);
      try {
        auto f = stat::fit_loglog_slope(pts, cfg.statlab.bootstrap);
        summary << spec.id() << ',' << name << ',' << f.slope << ',' << f.ci_low << ',' << f.ci_high << ',' << res.failures << "\n";
        std::cout << "slope " << spec.id() << ' ' << name << ' ' << f.slope << " [" << f.ci_low << ", " << f.ci_high << "]\n";
      } catch (const DomainError& e) {
        summary << spec.id() << ',' << name << ",nan,nan,nan," << res.failures << "\n";
        std::cout << "slope " << spec.id() << ' ' << name << " unavailable: " << e.what() << "\n";
      }
    }
  }
  std::cout << "wrote " << out << "/summary.csv\n";
  return kOk;
}

// --- gradcheck -------------------------------------------------------------

struct GradArgs {
  std::string scope = "full";
  double corrupt = 0.0;
  double tol = 1e-5;
};

int cmd_gradcheck(const GradArgs& a) {
  GradCheckOptions opt;
  opt.corrupt_gradient = a.corrupt;
  auto res = run_grad_suite(grad_cases(parse_grad_scope(a.scope)), opt);
  std::cout << "op,max_rel_error,worst_param,coordinates\n" << std::setprecision(3) << std::scientific;
  for (const auto& [op, rep] : res.reports) {
    std::cout << op << ',' << rep.max_rel_error << ',' << rep.worst_param << ',' << rep.coordinates << "\n";
  }
  const bool ok = res.max_rel_error < a.tol && res.all_deterministic;
  std::cout << (ok ? "PASS" : "FAIL") << " max_rel_error " << res.max_rel_error << " worst " << res.worst_op << "\n";
  if (!res.all_deterministic) std::cout << "nondeterministic gradient detected\n";
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Competition-routed sparse mixture of experts: training, evaluation, metrics and rate experiments"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model (writes checkpoints, metrics.csv, schedule.txt)");
  train->add_option("--config", ta.config, "JSON run config")->required();
  train->add_option("--out", ta.out, "output directory (default $CSMOE_OUT_DIR/train-<hash>)");
  train->add_flag("--baseline", ta.baseline, "plain SMoE run, no competition steps");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint and record routing assignments");
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
  eval->add_option("--data", ea.data, "exported corpus base path (default: regenerate the validation corpus)");
  eval->add_option("--routing", ea.routing, "router | competition | rank-shift");
  eval->add_option("--out", ea.out, "output directory (default $CSMOE_OUT_DIR/eval-<hash>)");

  MetricsArgs ma;
  auto* metrics = app.add_subcommand("metrics", "routing metrics over assignment tables");
  metrics->add_option("--kind", ma.kind, "ecr | level-learning | selection-entropy | weight-entropy")->required();
  metrics->add_option("--a", ma.a, "assignment table (router table for level-learning)")->required();
  metrics->add_option("--b", ma.b, "second table (ecr, level-learning)");
  metrics->add_option("--layer", ma.layer, "layer for entropies (default: all)");
  metrics->add_option("--out", ma.out, "also write the rows to this CSV");

  RateArgs ra;
  auto* ratelab = app.add_subcommand("ratelab", "MLE convergence-rate experiments");
  ratelab->add_option("--config", ra.config, "JSON run config (statlab section)")->required();
  ratelab->add_flag("--dry-run", ra.dry_run, "validate and print the job plan");
  ratelab->add_option("--workers", ra.workers, "worker threads (default from config)");
  ratelab->add_option("--out", ra.out, "output directory (default $CSMOE_OUT_DIR/ratelab-<hash>)");

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--scope", ga.scope, "layer | losses | full");
  grad->add_option("--tol", ga.tol, "max relative error");
  grad->add_option("--corrupt-gradient", ga.corrupt, "test hook: offset added to every analytic gradient")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUserError;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*metrics) return cmd_metrics(ma);
    if (*ratelab) return cmd_ratelab(ra);
    if (*grad) return cmd_gradcheck(ga);
  } catch (const TrainingAbort& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUserError;
  }
  return kUserError;
}
