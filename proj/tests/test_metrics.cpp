#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "csmoe/metrics.hpp"
#include "csmoe/random.hpp"

using namespace csmoe;

namespace {

AssignmentTable table(std::size_t layers, std::size_t n, std::size_t k, const std::string& fp = "data") {
  AssignmentTable t;
  t.fingerprint = fp;
  t.layers = layers;
  t.n_experts = n;
  t.k = k;
  return t;
}

std::vector<double> uniform_weights(std::size_t k) { return std::vector<double>(k, 1.0 / static_cast<double>(k)); }

AssignmentTable random_table(std::size_t tokens, std::size_t layers, std::size_t n, std::size_t k, Rng& rng) {
  auto t = table(layers, n, k);
  for (std::size_t i = 0; i < tokens * layers; ++i) {
    std::vector<std::size_t> all(n);
    for (std::size_t e = 0; e < n; ++e) all[e] = e;
    for (std::size_t j = n; j > 1; --j) std::swap(all[j - 1], all[uniform_index(rng, j)]);
    all.resize(k);
    t.push(all, uniform_weights(k));
  }
  return t;
}

// Mismatch count from first principles: for each slot, count b's experts not in a.
double ecr_oracle(const AssignmentTable& a, const AssignmentTable& b) {
  double miss = 0;
  for (std::size_t i = 0; i < a.experts.size(); ++i)
    for (auto e : b.experts[i]) miss += std::find(a.experts[i].begin(), a.experts[i].end(), e) == a.experts[i].end();
  return miss / static_cast<double>(a.k * a.experts.size());
}

}  // namespace

TEST(ExpertChangeRate, IdenticalIsZero) {
  Rng rng = make_rng(1);
  auto a = random_table(50, 2, 4, 2, rng);
  EXPECT_EQ(expert_change_rate(a, a), 0.0);
}

TEST(ExpertChangeRate, DisjointIsOne) {
  auto a = table(1, 4, 2), b = table(1, 4, 2);
  for (int i = 0; i < 10; ++i) {
    a.push({0, 1}, {0.5, 0.5});
    b.push({2, 3}, {0.5, 0.5});
  }
  EXPECT_EQ(expert_change_rate(a, b), 1.0);
}

TEST(ExpertChangeRate, HalfSharingOneIsQuarter) {
  auto a = table(1, 4, 2), b = table(1, 4, 2);
  for (int i = 0; i < 10; ++i) {
    a.push({0, 1}, {0.5, 0.5});
    b.push(i % 2 == 0 ? std::vector<std::size_t>{1, 3} : std::vector<std::size_t>{1, 0}, {0.5, 0.5});
  }
  EXPECT_DOUBLE_EQ(expert_change_rate(a, b), 0.25);
}

TEST(ExpertChangeRate, SetSemanticsIgnoreOrderUnlessRankSensitive) {
  auto a = table(1, 4, 2), b = table(1, 4, 2);
  a.push({0, 1}, {0.6, 0.4});
  b.push({1, 0}, {0.6, 0.4});
  EXPECT_EQ(expert_change_rate(a, b), 0.0);
  EXPECT_EQ(expert_change_rate(a, b, true), 1.0);
}

TEST(ExpertChangeRate, SymmetricAndMatchesOracle) {
  Rng rng = make_rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_table(30, 3, 6, 2, rng), b = random_table(30, 3, 6, 2, rng);
    const double ab = expert_change_rate(a, b);
    EXPECT_EQ(ab, expert_change_rate(b, a));
    EXPECT_DOUBLE_EQ(ab, ecr_oracle(a, b));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
  }
}

TEST(ExpertChangeRate, FingerprintMismatchIsComparisonError) {
  auto a = table(1, 4, 2, "x"), b = table(1, 4, 2, "y");
  a.push({0, 1}, {0.5, 0.5});
  b.push({0, 1}, {0.5, 0.5});
  EXPECT_THROW(expert_change_rate(a, b), ComparisonError);
}

TEST(ExpertChangeRate, ShapeMismatchIsComparisonError) {
  auto a = table(1, 4, 2), b = table(2, 4, 2);
  a.push({0, 1}, {0.5, 0.5});
  a.push({0, 1}, {0.5, 0.5});
  b.push({0, 1}, {0.5, 0.5});
  b.push({0, 1}, {0.5, 0.5});
  EXPECT_THROW(expert_change_rate(a, b), ComparisonError);
  EXPECT_THROW(expert_change_rate(table(1, 4, 2), table(1, 4, 2)), ComparisonError);
}

TEST(LevelLearning, IdenticalIsOne) {
  Rng rng = make_rng(3);
  auto a = random_table(40, 2, 4, 2, rng);
  auto ll = level_learning(a, a);
  EXPECT_EQ(ll.normalized, 1.0);
  EXPECT_EQ(ll.raw, 40u * 2u * 2u);
}

TEST(LevelLearning, DisjointIsZero) {
  auto a = table(1, 4, 2), b = table(1, 4, 2);
  a.push({0, 1}, {0.5, 0.5});
  b.push({2, 3}, {0.5, 0.5});
  EXPECT_EQ(level_learning(a, b).normalized, 0.0);
  EXPECT_EQ(level_learning(a, b).raw, 0u);
}

TEST(LevelLearning, SinglePairOneShared) {
  auto a = table(1, 4, 2), b = table(1, 4, 2);
  a.push({0, 1}, {0.5, 0.5});
  b.push({1, 2}, {0.5, 0.5});
  auto ll = level_learning(a, b);
  EXPECT_EQ(ll.raw, 1u);
  EXPECT_EQ(ll.normalized, 0.5);
}

TEST(LevelLearning, ComplementsChangeRate) {
  Rng rng = make_rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_table(25, 2, 5, 3, rng), b = random_table(25, 2, 5, 3, rng);
    EXPECT_EQ(level_learning(a, b).normalized + expert_change_rate(a, b), 1.0);
  }
}

TEST(SelectionEntropy, UniformOverFourIsTwoBits) {
  auto t = table(1, 4, 1);
  for (std::size_t i = 0; i < 40; ++i) t.push({i % 4}, {1.0});
  EXPECT_DOUBLE_EQ(selection_entropy(t, 0), 2.0);
}

TEST(SelectionEntropy, SingleExpertIsZero) {
  auto t = table(1, 4, 1);
  for (int i = 0; i < 10; ++i) t.push({3}, {1.0});
  EXPECT_EQ(selection_entropy(t, 0), 0.0);
}

TEST(SelectionEntropy, TwoOfFourIsOneBit) {
  auto t = table(1, 4, 1);
  for (std::size_t i = 0; i < 10; ++i) t.push({i % 2}, {1.0});
  EXPECT_DOUBLE_EQ(selection_entropy(t, 0), 1.0);
}

TEST(SelectionEntropy, PerLayerAndBounded) {
  Rng rng = make_rng(5);
  auto t = random_table(200, 3, 6, 2, rng);
  for (std::size_t l = 0; l < 3; ++l) {
    const double h = selection_entropy(t, l);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log2(6.0) + 1e-12);
  }
  EXPECT_THROW(selection_entropy(t, 3), DataError);
}

TEST(WeightEntropy, Examples) {
  auto half = table(1, 4, 2), one = table(1, 4, 2), skew = table(1, 4, 2);
  for (int i = 0; i < 5; ++i) {
    half.push({0, 1}, {0.5, 0.5});
    one.push({0, 1}, {1.0, 0.0});
    skew.push({0, 1}, {0.75, 0.25});
  }
  EXPECT_DOUBLE_EQ(weight_entropy(half, 0), 1.0);
  EXPECT_EQ(weight_entropy(one, 0), 0.0);
  const double direct = -(0.75 * std::log2(0.75) + 0.25 * std::log2(0.25));
  EXPECT_NEAR(weight_entropy(skew, 0), direct, 1e-15);
  EXPECT_NEAR(weight_entropy(skew, 0), 0.811278, 1e-6);
}

TEST(WeightEntropy, BoundedByLogK) {
  Rng rng = make_rng(6);
  auto t = table(2, 8, 3);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> w(3);
    double z = 0;
    for (auto& v : w) z += (v = uniform01(rng));
    for (auto& v : w) v /= z;
    t.push({0, 1, 2}, w);
  }
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_GE(weight_entropy(t, l), 0.0);
    EXPECT_LE(weight_entropy(t, l), std::log2(3.0) + 1e-12);
  }
}

TEST(AssignmentFile, RoundTrip) {
  Rng rng = make_rng(7);
  auto t = random_table(20, 2, 5, 2, rng);
  t.step = 400;
  t.routing = "competition";
  t.weights[3] = {0.1234567890123456, 0.8765432109876544};
  std::stringstream ss;
  write_assignments(ss, t);
  auto back = read_assignments(ss);
  EXPECT_EQ(back.experts, t.experts);
  EXPECT_EQ(back.weights, t.weights);
  EXPECT_EQ(back.fingerprint, t.fingerprint);
  EXPECT_EQ(back.step, 400u);
  EXPECT_EQ(back.routing, "competition");
  EXPECT_EQ(back.layers, 2u);
  EXPECT_EQ(back.k, 2u);
}

TEST(AssignmentFile, RejectsOutOfRangeExpert) {
  auto t = table(1, 4, 2);
  t.push({0, 1}, {0.5, 0.5});
  std::stringstream ss;
  write_assignments(ss, t);
  std::string text = ss.str();
  text.replace(text.rfind("0;1"), 3, "0;9");
  std::stringstream bad(text);
  EXPECT_THROW(read_assignments(bad), DataError);
}

TEST(AssignmentFile, RejectsForeignFile) {
  std::stringstream ss("token,layer\n");
  EXPECT_THROW(read_assignments(ss), DataError);
}

TEST(MetricRows, CsvLayout) {
  std::stringstream ss;
  write_metric_rows(ss, {{"ecr", 1, 200, 0.25}, {"ppl", -1, 200, 12.5}}, "abc");
  std::string l0, l1, l2, l3;
  std::getline(ss, l0);
  std::getline(ss, l1);
  std::getline(ss, l2);
  std::getline(ss, l3);
  EXPECT_EQ(l0, "# config_hash=abc");
  EXPECT_EQ(l1, "metric,layer,checkpoint_step,value");
  EXPECT_EQ(l2, "ecr,1,200,0.25");
  EXPECT_EQ(l3, "ppl,-1,200,12.5");
}
