#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "csmoe/trainer.hpp"

using namespace csmoe;

namespace {

RunConfig tiny_config(std::size_t steps = 30) {
  RunConfig c;
  c.model.vocab = 16;
  c.model.d_model = 16;
  c.model.d_hidden = 16;
  c.model.layers = 2;
  c.model.context = 8;
  c.model.moe.n_experts = 4;
  c.model.moe.k = 2;
  c.data.vocab = 16;
  c.data.seq_len = 64;
  c.data.sequences = 16;
  c.train.steps = steps;
  c.train.batch = 4;
  c.train.eval_batches = 2;
  c.schedule.omega = 0.3;
  c.schedule.a_max = 2;
  c.validate();
  return c;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("csmoe_trainer_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

bool same_params(const ParamStore& a, const ParamStore& b) {
  if (a.all().size() != b.all().size()) return false;
  for (const auto& [n, t] : a.all()) {
    if (!b.contains(n) || b.at(n).values() != t.values()) return false;
  }
  return true;
}

}  // namespace

TEST(RunTraining, ZeroStepsReturnsInitialState) {
  auto cfg = tiny_config(0);
  auto data = make_datasets(cfg.data);
  auto res = run_training(cfg, data);
  EXPECT_EQ(res.state.step, 0u);
  EXPECT_TRUE(same_params(res.state.model.params(), init_state(cfg).model.params()));
  ASSERT_EQ(res.evals.size(), 1u);
  EXPECT_TRUE(std::isfinite(res.evals[0].perplexity));
}

TEST(RunTraining, BitReproducible) {
  auto cfg = tiny_config();
  auto data = make_datasets(cfg.data);
  auto a = run_training(cfg, data), b = run_training(cfg, data);
  EXPECT_TRUE(same_params(a.state.model.params(), b.state.model.params()));
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(a.steps[i].total, b.steps[i].total);
  EXPECT_EQ(a.evals.back().perplexity, b.evals.back().perplexity);
}

TEST(RunTraining, OmegaZeroMatchesBaselineStepForStep) {
  auto cfg = tiny_config();
  cfg.schedule.omega = 0.0;
  auto base = cfg;
  base.schedule.omega = 0.5;
  base.train.baseline = true;
  auto data = make_datasets(cfg.data);
  auto a = run_training(cfg, data), b = run_training(base, data);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    EXPECT_EQ(a.steps[i].total, b.steps[i].total) << "step " << i;
    EXPECT_EQ(b.steps[i].active_layers, 0u);
  }
  EXPECT_TRUE(same_params(a.state.model.params(), b.state.model.params()));
}

TEST(RunTraining, BaselineNeverCompetes) {
  auto cfg = tiny_config();
  cfg.schedule.omega = 1.0;
  cfg.train.baseline = true;
  auto res = run_training(cfg, make_datasets(cfg.data));
  for (const auto& s : res.steps) EXPECT_EQ(s.active_layers, 0u);
  for (const auto& row : res.schedule.lambda)
    for (auto v : row) EXPECT_EQ(v, 0);
}

TEST(RunTraining, ExpertEvaluationsMatchSchedule) {
  auto cfg = tiny_config(40);
  cfg.schedule.omega = 0.4;
  auto res = run_training(cfg, make_datasets(cfg.data));
  const std::size_t tokens = cfg.train.batch * cfg.model.context;
  std::size_t competing = 0;
  for (const auto& row : res.schedule.lambda)
    for (auto v : row) competing += v;
  ASSERT_GT(competing, 0u);
  const std::size_t n = cfg.model.moe.n_experts, k = cfg.model.moe.k;
  EXPECT_EQ(res.expert_evals, k * tokens * cfg.train.steps * cfg.model.layers + (n - k) * tokens * competing);
}

TEST(RunTraining, LossFiniteEveryStep) {
  auto cfg = tiny_config(60);
  cfg.schedule.omega = 0.5;
  auto res = run_training(cfg, make_datasets(cfg.data));
  for (const auto& s : res.steps) {
    EXPECT_TRUE(std::isfinite(s.total));
    EXPECT_TRUE(std::isfinite(s.l_d));
  }
  EXPECT_TRUE(res.state.model.params().all_finite());
}

TEST(RunTraining, WritesMetricsAndCheckpoints) {
  auto dir = scratch_dir("files");
  auto cfg = tiny_config(20);
  cfg.train.checkpoint_every = 10;
  cfg.train.eval_every = 10;
  auto res = run_training(cfg, make_datasets(cfg.data), RunOptions{dir.string(), {}, nullptr});
  EXPECT_TRUE(std::filesystem::exists(dir / "step10.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "final.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "schedule.txt"));
  std::ifstream m(dir / "metrics.csv");
  std::string first, header;
  std::getline(m, first);
  std::getline(m, header);
  EXPECT_EQ(first, "# config_hash=" + config_hash(cfg));
  EXPECT_EQ(header, "step,nll,l_d,l_div,balance,z,ppl,active_layers");
  std::size_t rows = 0;
  for (std::string line; std::getline(m, line);) ++rows;
  EXPECT_EQ(rows, 20u);
  EXPECT_EQ(res.evals.size(), 2u);
  std::filesystem::remove_all(dir);
}

TEST(RunTraining, HugeStepSizeAbortsWithDump) {
  auto dir = scratch_dir("abort");
  auto cfg = tiny_config(20);
  cfg.train.lr = 1e300;
  cfg.schedule.omega = 0.0;
  try {
    run_training(cfg, make_datasets(cfg.data), RunOptions{dir.string(), {}, nullptr});
    FAIL() << "expected TrainingAbort";
  } catch (const TrainingAbort& e) {
    EXPECT_FALSE(e.diagnostics.empty());
    EXPECT_TRUE(std::filesystem::exists(e.dump_path));
  }
  std::filesystem::remove_all(dir);
}

TEST(TrainStep, NonFiniteParameterAborts) {
  auto cfg = tiny_config();
  auto state = init_state(cfg);
  state.model.params().at("embed").values()[0] = std::nan("");
  BatchIterator it(generate_corpus(cfg.data), cfg.train.batch, cfg.model.context, 1);
  std::vector<std::uint8_t> active{1, 0};
  EXPECT_THROW(train_step(state, it.next(), active, StepOptions{}), TrainingAbort);
}

TEST(TrainStep, ScheduleWidthMustMatchLayers) {
  auto cfg = tiny_config();
  auto state = init_state(cfg);
  auto corpus = generate_corpus(cfg.data);
  BatchIterator it(corpus, cfg.train.batch, cfg.model.context, 1);
  EXPECT_THROW(train_step(state, it.next(), {1}, StepOptions{}), ContractError);
}

TEST(TrainStep, CompetitionStepReducesDistillation) {
  auto cfg = tiny_config();
  auto corpus = generate_corpus(cfg.data);
  BatchIterator it(corpus, cfg.train.batch, cfg.model.context, 3);
  const Batch batch = it.next();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    cfg.train.seed = seed;
    auto state = init_state(cfg);
    const std::vector<RoutingMode> modes{RoutingMode::competition, RoutingMode::competition};
    auto distill = [&](const LanguageModel& m) {
      ad::Tape tape;
      auto c = compose_loss(m, m.params().bind(tape), batch, modes, LossWeights{});
      return c.layers[0].l_d + c.layers[1].l_d;
    };
    const double before = distill(state.model);
    StepOptions so;
    so.weights.gamma = 50.0;
    so.lr = 0.01;
    train_step(state, batch, {1, 1}, so);
    EXPECT_LT(distill(state.model), before) << "seed " << seed;
  }
}

TEST(TrainStep, FrozenRouterKeepsRouterOnNormalSteps) {
  auto cfg = tiny_config();
  auto state = init_state(cfg);
  auto corpus = generate_corpus(cfg.data);
  BatchIterator it(corpus, cfg.train.batch, cfg.model.context, 1);
  const auto& layers = state.model.layers();
  const Tensor r0 = state.model.params().at(layers[0].router_name());
  const Tensor r1 = state.model.params().at(layers[1].router_name());
  StepOptions so;
  so.freeze_router_on_normal_steps = true;
  train_step(state, it.next(), {0, 1}, so);
  EXPECT_EQ(state.model.params().at(layers[0].router_name()).values(), r0.values());
  EXPECT_NE(state.model.params().at(layers[1].router_name()).values(), r1.values());
}

TEST(EvalModel, UntrainedOnUniformTokensHasVocabPerplexity) {
  auto cfg = tiny_config();
  auto state = init_state(cfg);
  Rng rng = make_rng(5);
  std::vector<Batch> batches(20);
  for (auto& b : batches) {
    b.batch = 4;
    b.context = cfg.model.context;
    for (std::size_t i = 0; i < 4 * cfg.model.context; ++i) {
      b.inputs.push_back(uniform_index(rng, cfg.model.vocab));
      b.targets.push_back(uniform_index(rng, cfg.model.vocab));
    }
  }
  auto r = eval_model(state.model, batches, RoutingMode::router);
  EXPECT_NEAR(r.perplexity / static_cast<double>(cfg.model.vocab), 1.0, 0.1);
}

TEST(EvalModel, ExpertEvaluationsPerMode) {
  auto cfg = tiny_config();
  auto state = init_state(cfg);
  auto batches = eval_batches(generate_corpus(cfg.data), 4, cfg.model.context);
  batches.resize(3);
  const std::size_t tokens = 3 * 4 * cfg.model.context;
  auto router = eval_model(state.model, batches, RoutingMode::router);
  auto comp = eval_model(state.model, batches, RoutingMode::competition);
  EXPECT_EQ(router.tokens, tokens);
  EXPECT_EQ(router.expert_evals, cfg.model.moe.k * tokens * cfg.model.layers);
  EXPECT_EQ(comp.expert_evals, cfg.model.moe.n_experts * tokens * cfg.model.layers);
  EXPECT_EQ(router.table.tokens(), tokens);
}

TEST(EvalModel, RankShiftMovesTopSlot) {
  auto cfg = tiny_config();
  auto state = init_state(cfg);
  auto batches = eval_batches(generate_corpus(cfg.data), 4, cfg.model.context);
  batches.resize(2);
  auto router = eval_model(state.model, batches, RoutingMode::router);
  auto shifted = eval_model(state.model, batches, RoutingMode::rank_shift);
  ASSERT_EQ(router.table.experts.size(), shifted.table.experts.size());
  // Deeper layers see different inputs once layer 0 is shifted; compare layer 0 only.
  for (std::size_t i = 0; i < router.table.experts.size(); i += cfg.model.layers) {
    const auto& r = router.table.experts[i];
    const auto& s = shifted.table.experts[i];
    EXPECT_EQ(std::count(s.begin(), s.end(), r[0]), 0) << "record " << i;
  }
}

TEST(EvalModel, RankShiftWithOneSpareExpert) {
  auto cfg = tiny_config();
  cfg.model.moe.n_experts = 3;
  cfg.model.moe.k = 2;
  auto state = init_state(cfg);
  auto batches = eval_batches(generate_corpus(cfg.data), 4, cfg.model.context);
  EXPECT_NO_THROW(eval_model(state.model, {batches[0]}, RoutingMode::rank_shift));
  cfg.model.moe.n_experts = 2;
  cfg.model.moe.k = 1;
  auto small = init_state(cfg);
  EXPECT_NO_THROW(eval_model(small.model, {batches[0]}, RoutingMode::rank_shift));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto cfg = tiny_config(12);
  cfg.train.optimizer = OptimizerKind::adam;
  cfg.train.lr = 1e-3;
  auto res = run_training(cfg, make_datasets(cfg.data));
  const std::string bytes = serialize_checkpoint(res.state, cfg);
  auto loaded = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(loaded.state, loaded.config), bytes);
  EXPECT_EQ(loaded.state.step, res.state.step);
  EXPECT_EQ(config_hash(loaded.config), config_hash(cfg));
  EXPECT_TRUE(same_params(loaded.state.model.params(), res.state.model.params()));
}

TEST(Checkpoint, FileRoundTripPreservesEvaluation) {
  auto dir = scratch_dir("ckpt");
  auto cfg = tiny_config(10);
  auto data = make_datasets(cfg.data);
  auto res = run_training(cfg, data);
  const std::string path = (dir / "a.ckpt").string();
  save_checkpoint(path, res.state, cfg);
  auto loaded = load_checkpoint(path);
  auto batches = validation_batches(cfg, data.valid);
  EXPECT_EQ(eval_model(loaded.state.model, batches, RoutingMode::router).mean_nll,
            eval_model(res.state.model, batches, RoutingMode::router).mean_nll);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, TruncatedIsCorruption) {
  auto cfg = tiny_config(0);
  const std::string bytes = serialize_checkpoint(init_state(cfg), cfg);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 9)), CheckpointCorruptionError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 40)), CheckpointCorruptionError);
}

TEST(Checkpoint, FlippedPayloadByteIsCorruption) {
  auto cfg = tiny_config(0);
  std::string bytes = serialize_checkpoint(init_state(cfg), cfg);
  bytes[bytes.size() - 3] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(bytes), CheckpointCorruptionError);
}

TEST(Checkpoint, WrongSchemaVersionIsVersionError) {
  auto cfg = tiny_config(0);
  std::string bytes = serialize_checkpoint(init_state(cfg), cfg);
  const auto at = bytes.find("schema_version 1");
  ASSERT_NE(at, std::string::npos);
  bytes.replace(at, 16, "schema_version 7");
  EXPECT_THROW(deserialize_checkpoint(bytes), CheckpointVersionError);
}

TEST(Checkpoint, MissingFileIsCheckpointError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), CheckpointError);
}
