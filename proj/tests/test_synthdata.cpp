#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "csmoe/synthdata.hpp"
#include "oracles.hpp"

using namespace csmoe;

namespace {

// Stationary bigram distribution of the joint (source, token) chain.
std::vector<std::vector<double>> bigram_oracle(const DataSpec& spec) {
  const auto trans = resolved_transitions(spec);
  const std::size_t m = spec.sources, v = spec.vocab;
  const double p = spec.switch_prob();
  auto keep = [&](std::size_t from, std::size_t to) { return (from == to ? 1.0 - p : 0.0) + p / static_cast<double>(m); };
  std::vector<std::vector<double>> joint(m * v, std::vector<double>(m * v, 0.0));
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t a = 0; a < v; ++a)
      for (std::size_t s2 = 0; s2 < m; ++s2)
        for (std::size_t b = 0; b < v; ++b) joint[s * v + a][s2 * v + b] = keep(s, s2) * trans[s2][a][b];
  const auto pi = oracle::stationary(joint, 3000);
  std::vector<std::vector<double>> big(v, std::vector<double>(v, 0.0));
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t a = 0; a < v; ++a)
      for (std::size_t s2 = 0; s2 < m; ++s2)
        for (std::size_t b = 0; b < v; ++b) big[a][b] += pi[s * v + a] * joint[s * v + a][s2 * v + b];
  return big;
}

TransitionMatrix permutation(std::size_t v, std::size_t shift) {
  TransitionMatrix t(v, std::vector<double>(v, 0.0));
  for (std::size_t a = 0; a < v; ++a) t[a][(a + shift) % v] = 1.0;
  return t;
}

}  // namespace

TEST(Transitions, RowsAreStochastic) {
  DataSpec spec;
  for (const auto& t : make_transitions(spec)) EXPECT_NO_THROW(validate_stochastic(t, spec.vocab));
}

TEST(Transitions, BadMatrixIsDataError) {
  DataSpec spec;
  spec.vocab = 2;
  spec.sources = 1;
  spec.transitions = {{{0.5, 0.4}, {0.0, 1.0}}};
  EXPECT_THROW(generate_corpus(spec), DataError);
  spec.transitions = {{{1.5, -0.5}, {0.0, 1.0}}};
  EXPECT_THROW(generate_corpus(spec), DataError);
}

TEST(Corpus, SingleSourceIsPlainMarkovChain) {
  DataSpec spec;
  spec.sources = 1;
  spec.sequences = 4;
  auto c = generate_corpus(spec);
  const auto trans = make_transitions(spec);
  for (std::size_t s = 0; s < c.tokens.size(); ++s) {
    for (std::size_t t = 1; t < c.tokens[s].size(); ++t) {
      EXPECT_EQ(c.labels[s][t], 0);
      EXPECT_GT(trans[0][c.tokens[s][t - 1]][c.tokens[s][t]], 0.0);
    }
  }
}

TEST(Corpus, PermutationSourcesArePredictable) {
  DataSpec spec;
  spec.vocab = 8;
  spec.sources = 2;
  spec.transitions = {permutation(8, 1), permutation(8, 3)};
  auto c = generate_corpus(spec);
  for (std::size_t s = 0; s < c.tokens.size(); ++s) {
    for (std::size_t t = 1; t < c.tokens[s].size(); ++t) {
      const std::size_t shift = c.labels[s][t] == 0 ? 1 : 3;
      EXPECT_EQ(c.tokens[s][t], (c.tokens[s][t - 1] + shift) % 8);
    }
  }
}

TEST(Corpus, ReproducibleAndAligned) {
  DataSpec spec;
  auto a = generate_corpus(spec), b = generate_corpus(spec);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  for (std::size_t s = 0; s < a.tokens.size(); ++s) EXPECT_EQ(a.tokens[s].size(), a.labels[s].size());
  EXPECT_NE(generate_corpus(spec, 1).fingerprint(), a.fingerprint());
}

TEST(Corpus, SegmentSwitchRate) {
  DataSpec spec;
  spec.sequences = 40;
  spec.seq_len = 5000;
  auto c = generate_corpus(spec);
  std::size_t changes = 0, pairs = 0;
  for (const auto& l : c.labels) {
    for (std::size_t t = 1; t < l.size(); ++t) changes += l[t] != l[t - 1];
    pairs += l.size() - 1;
  }
  const double expect = spec.switch_prob() * (1.0 - 1.0 / static_cast<double>(spec.sources));
  const double sd = std::sqrt(expect * (1 - expect) / static_cast<double>(pairs));
  EXPECT_NEAR(static_cast<double>(changes) / static_cast<double>(pairs), expect, 4 * sd);
}

TEST(Corpus, BigramsMatchStationaryStatistics) {
  DataSpec spec;
  spec.vocab = 16;
  spec.sources = 3;
  spec.sequences = 10;
  spec.seq_len = 100000;
  auto c = generate_corpus(spec);
  const auto expect = bigram_oracle(spec);
  std::vector<std::vector<double>> got(spec.vocab, std::vector<double>(spec.vocab, 0.0));
  double pairs = 0;
  for (const auto& seq : c.tokens) {
    for (std::size_t t = 1; t < seq.size(); ++t) got[seq[t - 1]][seq[t]] += 1.0;
    pairs += static_cast<double>(seq.size() - 1);
  }
  double tv = 0.0;
  for (std::size_t a = 0; a < spec.vocab; ++a)
    for (std::size_t b = 0; b < spec.vocab; ++b) tv += std::abs(got[a][b] / pairs - expect[a][b]);
  EXPECT_LT(tv / 2.0, 0.01);
}

TEST(Batches, TargetsAreShiftedInputs) {
  DataSpec spec;
  auto c = generate_corpus(spec);
  BatchIterator it(c, 4, 16, 1);
  for (int i = 0; i < 20; ++i) {
    auto b = it.next();
    ASSERT_EQ(b.inputs.size(), 64u);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t j = 0; j + 1 < 16; ++j) EXPECT_EQ(b.targets[r * 16 + j], b.inputs[r * 16 + j + 1]);
  }
}

TEST(Batches, SameSeedSameStream) {
  DataSpec spec;
  auto c = generate_corpus(spec);
  BatchIterator a(c, 3, 8, 5), b(c, 3, 8, 5), other(c, 3, 8, 6);
  bool differs = false;
  for (int i = 0; i < 50; ++i) {
    auto x = a.next(), y = b.next(), z = other.next();
    EXPECT_EQ(x.inputs, y.inputs);
    differs = differs || x.inputs != z.inputs;
  }
  EXPECT_TRUE(differs);
}

TEST(Batches, EveryPositionCoveredEachEpoch) {
  DataSpec spec;
  spec.sequences = 5;
  spec.seq_len = 53;
  auto c = generate_corpus(spec);
  BatchIterator it(c, 1, 8, 2);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& [s, start] : it.windows())
    for (std::size_t j = 0; j < 8; ++j) seen.insert({s, start + j});
  // Each window is emitted once per epoch, and windows cover every input position.
  EXPECT_EQ(seen.size(), 5u * 52u);
  std::multiset<std::vector<std::size_t>> emitted;
  for (std::size_t i = 0; i < it.windows_per_epoch(); ++i) emitted.insert(it.next().inputs);
  EXPECT_EQ(it.epoch(), 0u);
  std::multiset<std::vector<std::size_t>> expect;
  for (const auto& [s, start] : it.windows())
    expect.insert(std::vector<std::size_t>(c.tokens[s].begin() + start, c.tokens[s].begin() + start + 8));
  EXPECT_EQ(emitted, expect);
}

TEST(Batches, ContextMustFit) {
  DataSpec spec;
  spec.seq_len = 10;
  auto c = generate_corpus(spec);
  EXPECT_THROW(BatchIterator(c, 2, 10, 1), ContractError);
}

TEST(Export, RoundTrip) {
  DataSpec spec;
  spec.sequences = 3;
  auto c = generate_corpus(spec);
  const auto dir = std::filesystem::temp_directory_path() / "csmoe_synth_test";
  std::filesystem::create_directories(dir);
  const std::string base = (dir / "corpus").string();
  export_corpus(c, base);
  auto back = import_corpus(base);
  EXPECT_EQ(back.tokens, c.tokens);
  EXPECT_EQ(back.fingerprint(), c.fingerprint());
  std::filesystem::remove_all(dir);
}
