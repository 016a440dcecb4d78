#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csmoe/errors.hpp"
#include "csmoe/hash.hpp"
#include "csmoe/losses.hpp"
#include "csmoe/model.hpp"
#include "csmoe/params.hpp"
#include "csmoe/synthdata.hpp"

namespace csmoe {

using Json = nlohmann::json;

struct ScheduleConfig {
  double omega = 0.07;
  std::size_t a_max = 9;
  double warmup_frac = 0.05;
};

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 8;
  double lr = 0.1;
  double lr_min = 0.0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  std::uint64_t seed = 42;
  std::size_t eval_every = 0;        // 0: only at the end
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::size_t eval_batches = 16;     // validation windows = eval_batches * batch
  bool baseline = false;
  bool freeze_router_on_normal_steps = false;

  void validate() const {
    if (batch == 0) throw ConfigError("train.batch must be positive");
    if (!(lr > 0.0) || lr_min < 0.0 || lr_min > lr) throw ConfigError("train.lr must be > 0 and lr_min in [0, lr]");
  }
};

enum class ExpertKind { linear, ffn };

inline const char* to_string(ExpertKind k) { return k == ExpertKind::linear ? "linear" : "ffn"; }

inline ExpertKind parse_expert_kind(std::string_view s) {
  if (s == "linear") return ExpertKind::linear;
  if (s == "ffn") return ExpertKind::ffn;
  throw ConfigError("unknown expert kind '" + std::string(s) + "'");
}

struct StatlabConfig {
  std::vector<ExpertKind> expert_kinds = {ExpertKind::linear};
  std::size_t n_true = 2;
  std::vector<std::size_t> n_fit = {2, 3};  // one regime per entry
  std::vector<std::size_t> n_grid = {1000, 3000, 10000, 30000, 100000};
  std::vector<std::size_t> ffn_n_grid = {1000, 10000, 30000};
  std::size_t reps = 20;
  std::size_t restarts = 10;
  std::uint64_t seed = 2024;
  std::size_t workers = 1;
  std::size_t tv_x_samples = 200;
  std::size_t tv_y_points = 2001;
  std::size_t bootstrap = 200;
};

/// Whole-run configuration document. Every section and key is optional;
/// unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  LossWeights losses;
  ScheduleConfig schedule;
  DataSpec data;
  TrainConfig train;
  StatlabConfig statlab;

  void validate() const {
    model.validate();
    losses.validate();
    train.validate();
    if (!(schedule.omega >= 0 && schedule.omega <= 1)) throw ConfigError("schedule.omega must lie in [0, 1]");
    if (schedule.a_max < 1) throw ConfigError("schedule.a_max must be >= 1");
    if (!(schedule.warmup_frac >= 0 && schedule.warmup_frac < 1)) throw ConfigError("schedule.warmup_frac must lie in [0, 1)");
    if (data.vocab != model.vocab) throw ConfigError("data.vocab must equal model.vocab");
    if (data.sources < 1 || data.sources > 255) throw ConfigError("data.sources must lie in [1, 255]");
    if (model.context >= data.seq_len) throw ConfigError("model.context must be shorter than data.seq_len");
    if (statlab.reps < 1 || statlab.n_true < 1) throw ConfigError("statlab.reps and statlab.n_true must be positive");
    for (auto n : statlab.n_fit)
      if (n < statlab.n_true) throw ConfigError("statlab.n_fit entries must be >= n_true");
  }
};

namespace detail {

class Reader {
 public:
  Reader(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key " + section_ + "." + key + ": " + e.what());
    }
  }

  template <class Parse, class T>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    bool present = j_.contains(key);
    get(key, s);
    if (present) out = parse(s);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + section_ + "." + it.key() + "'");
    }
  }

 private:
  const Json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

}  // namespace detail

inline RunConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config document must be an object");
  static const std::set<std::string> sections = {"model", "moe", "losses", "schedule", "data", "train", "statlab"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!sections.count(it.key())) throw ConfigError("unknown config section '" + it.key() + "'");
  }
  RunConfig c;
  auto section = [&](const char* name) -> const Json& {
    static const Json empty = Json::object();
    return j.contains(name) ? j.at(name) : empty;
  };
  {
    detail::Reader r(section("model"), "model");
    r.get("vocab", c.model.vocab);
    r.get("d_model", c.model.d_model);
    r.get("d_hidden", c.model.d_hidden);
    r.get("layers", c.model.layers);
    r.get("context", c.model.context);
    r.get("attention", c.model.attention);
    r.get_enum("expert_act", c.model.expert_act, parse_activation);
    r.finish();
  }
  {
    detail::Reader r(section("moe"), "moe");
    r.get("n_experts", c.model.moe.n_experts);
    r.get("k", c.model.moe.k);
    r.get_enum("kappa", c.model.moe.kappa, parse_activation);
    r.get_enum("affinity", c.model.moe.affinity, parse_affinity_mode);
    r.finish();
  }
  {
    detail::Reader r(section("losses"), "losses");
    r.get("alpha", c.losses.alpha);
    r.get("gamma", c.losses.gamma);
    r.get("beta", c.losses.beta);
    r.get("balance_coeff", c.losses.balance_coeff);
    r.get("z_coeff", c.losses.z_coeff);
    r.finish();
  }
  {
    detail::Reader r(section("schedule"), "schedule");
    r.get("omega", c.schedule.omega);
    r.get("a_max", c.schedule.a_max);
    r.get("warmup_frac", c.schedule.warmup_frac);
    r.finish();
  }
  {
    detail::Reader r(section("data"), "data");
    c.data.vocab = c.model.vocab;
    r.get("vocab", c.data.vocab);
    r.get("sources", c.data.sources);
    r.get("successors", c.data.successors);
    r.get("mean_segment", c.data.mean_segment);
    r.get("seq_len", c.data.seq_len);
    r.get("sequences", c.data.sequences);
    r.get("seed", c.data.seed);
    r.finish();
  }
  {
    detail::Reader r(section("train"), "train");
    r.get("steps", c.train.steps);
    r.get("batch", c.train.batch);
    r.get("lr", c.train.lr);
    r.get("lr_min", c.train.lr_min);
    r.get_enum("optimizer", c.train.optimizer, detail::parse_optimizer);
    r.get("seed", c.train.seed);
    r.get("eval_every", c.train.eval_every);
    r.get("checkpoint_every", c.train.checkpoint_every);
    r.get("eval_batches", c.train.eval_batches);
    r.get("baseline", c.train.baseline);
    r.get("freeze_router_on_normal_steps", c.train.freeze_router_on_normal_steps);
    r.finish();
  }
  {
    detail::Reader r(section("statlab"), "statlab");
    std::vector<std::string> kinds;
    bool has_kinds = section("statlab").contains("expert_kinds");
    r.get("expert_kinds", kinds);
    if (has_kinds) {
      c.statlab.expert_kinds.clear();
      for (const auto& k : kinds) c.statlab.expert_kinds.push_back(parse_expert_kind(k));
    }
    r.get("n_true", c.statlab.n_true);
    r.get("n_fit", c.statlab.n_fit);
    r.get("n_grid", c.statlab.n_grid);
    r.get("ffn_n_grid", c.statlab.ffn_n_grid);
    r.get("reps", c.statlab.reps);
    r.get("restarts", c.statlab.restarts);
    r.get("seed", c.statlab.seed);
    r.get("workers", c.statlab.workers);
    r.get("tv_x_samples", c.statlab.tv_x_samples);
    r.get("tv_y_points", c.statlab.tv_y_points);
    r.get("bootstrap", c.statlab.bootstrap);
    r.finish();
  }
  c.validate();
  return c;
}

inline Json config_to_json(const RunConfig& c) {
  Json j;
  j["model"] = {{"vocab", c.model.vocab},     {"d_model", c.model.d_model}, {"d_hidden", c.model.d_hidden},
                {"layers", c.model.layers},   {"context", c.model.context}, {"attention", c.model.attention},
                {"expert_act", to_string(c.model.expert_act)}};
  j["moe"] = {{"n_experts", c.model.moe.n_experts},
              {"k", c.model.moe.k},
              {"kappa", to_string(c.model.moe.kappa)},
              {"affinity", to_string(c.model.moe.affinity)}};
  j["losses"] = {{"alpha", c.losses.alpha},
                 {"gamma", c.losses.gamma},
                 {"beta", c.losses.beta},
                 {"balance_coeff", c.losses.balance_coeff},
                 {"z_coeff", c.losses.z_coeff}};
  j["schedule"] = {{"omega", c.schedule.omega}, {"a_max", c.schedule.a_max}, {"warmup_frac", c.schedule.warmup_frac}};
  j["data"] = {{"vocab", c.data.vocab},       {"sources", c.data.sources},   {"successors", c.data.successors},
               {"mean_segment", c.data.mean_segment}, {"seq_len", c.data.seq_len}, {"sequences", c.data.sequences},
               {"seed", c.data.seed}};
  j["train"] = {{"steps", c.train.steps},
                {"batch", c.train.batch},
                {"lr", c.train.lr},
                {"lr_min", c.train.lr_min},
                {"optimizer", c.train.optimizer == OptimizerKind::sgd ? "sgd" : "adam"},
                {"seed", c.train.seed},
                {"eval_every", c.train.eval_every},
                {"checkpoint_every", c.train.checkpoint_every},
                {"eval_batches", c.train.eval_batches},
                {"baseline", c.train.baseline},
                {"freeze_router_on_normal_steps", c.train.freeze_router_on_normal_steps}};
  std::vector<std::string> kinds;
  for (auto k : c.statlab.expert_kinds) kinds.push_back(to_string(k));
  j["statlab"] = {{"expert_kinds", kinds},
                  {"n_true", c.statlab.n_true},
                  {"n_fit", c.statlab.n_fit},
                  {"n_grid", c.statlab.n_grid},
                  {"ffn_n_grid", c.statlab.ffn_n_grid},
                  {"reps", c.statlab.reps},
                  {"restarts", c.statlab.restarts},
                  {"seed", c.statlab.seed},
                  {"workers", c.statlab.workers},
                  {"tv_x_samples", c.statlab.tv_x_samples},
                  {"tv_y_points", c.statlab.tv_y_points},
                  {"bootstrap", c.statlab.bootstrap}};
  return j;
}

/// Hash of the canonical (fully defaulted, key-sorted) document.
inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(config_to_json(c).dump())); }

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  Json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace csmoe
