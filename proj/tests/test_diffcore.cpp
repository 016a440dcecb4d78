#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "csmoe/gradcheck_suite.hpp"
#include "csmoe/ops.hpp"
#include "csmoe/params.hpp"
#include "csmoe/tape.hpp"

using namespace csmoe;

namespace {

Tensor random_matrix(std::size_t m, std::size_t n, Rng& rng) {
  Tensor t({m, n});
  for (auto& v : t.values()) v = uniform(rng, -1, 1);
  return t;
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Matmul, Identity) {
  ad::Tape tape;
  auto a = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  auto b = tape.constant(Tensor::matrix({{2, 3}, {4, 5}}));
  EXPECT_EQ(ad::matmul(a, b).value(), Tensor::matrix({{2, 3}, {4, 5}}));
}

TEST(Matmul, Arithmetic) {
  ad::Tape tape;
  auto c = ad::matmul(tape.constant(Tensor::matrix({{1, 2}})), tape.constant(Tensor::matrix({{3}, {4}})));
  EXPECT_EQ(c.value().item(), 11.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  ad::Tape tape;
  EXPECT_THROW(ad::matmul(tape.constant(Tensor({2, 3}, 0.0)), tape.constant(Tensor({2, 3}, 0.0))), DimensionError);
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng = make_rng(11);
  Tensor a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
  ad::Tape tape;
  auto va = tape.variable(a, "a");
  auto vb = tape.constant(b);
  auto g = tape.backward(ad::sum(ad::matmul(va, vb))).at("a");
  // ones(3x2) * b^T: every row equals the row sums of b.
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(g.at(r, c), b.at(c, 0) + b.at(c, 1), 1e-15);

  ParamStore p;
  p.add("a", a);
  auto rep = finite_diff_check([&](ad::Tape& t, const ParamStore::Bound& bd) { return ad::sum(ad::matmul(bd.at("a"), t.constant(b))); }, p);
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(Activation, SoftplusClosedForms) {
  EXPECT_NEAR(scalar::softplus(0.0), std::numbers::ln2, 1e-15);
  EXPECT_NEAR(scalar::softplus(1000.0), 1000.0, 1e-12 * 1000.0);
  EXPECT_TRUE(std::isfinite(scalar::softplus(-1000.0)));
  EXPECT_GE(scalar::softplus(-1000.0), 0.0);
}

TEST(Activation, SoftmaxOfEqualEntriesIsUniform) {
  ad::Tape tape;
  auto y = ad::activation(tape.constant(Tensor::row({0, 0, 0})), Activation::softmax);
  for (double v : y.value().values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Activation, UnknownKindIsConfigError) { EXPECT_THROW(parse_activation("tanh2"), ConfigError); }

TEST(Activation, ExpSoftplusIdentity) {
  for (int i = -3000; i <= 3000; ++i) {
    const double x = i / 100.0;
    const double lhs = std::exp(scalar::softplus(x));
    const double rhs = 1.0 + std::exp(x);
    EXPECT_LE(std::abs(lhs - rhs) / rhs, 1e-12) << x;
  }
}

TEST(Softmax, RowsArePositiveAndSumToOne) {
  Rng rng = make_rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + uniform_index(rng, 8), n = 1 + uniform_index(rng, 8);
    Tensor x({m, n});
    for (auto& v : x.values()) v = uniform(rng, -30, 30);
    ad::Tape tape;
    auto y = ad::softmax_rows(tape.constant(x)).value();
    for (std::size_t r = 0; r < m; ++r) {
      double s = 0.0;
      for (double v : y.row_span(r)) {
        EXPECT_GT(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, MaskedEntriesAreExactlyZero) {
  ad::Tape tape;
  std::vector<std::uint8_t> keep = {1, 0, 1, 0};
  auto y = ad::softmax_rows(tape.constant(Tensor::row({1, 5, 1, 9})), &keep).value();
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[3], 0.0);
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[2], 0.5);
}

TEST(Backward, SquareAtThree) {
  ad::Tape tape;
  auto w = tape.variable(Tensor::scalar(3.0), "w");
  EXPECT_EQ(tape.backward(ad::mul(w, w)).at("w").item(), 6.0);
}

TEST(Backward, ConstantFunctionHasZeroGradient) {
  ad::Tape tape;
  auto w = tape.variable(Tensor::scalar(3.0), "w");
  (void)w;
  auto c = tape.constant(Tensor::scalar(2.0));
  EXPECT_EQ(tape.backward(ad::scale(c, 4.0)).at("w").item(), 0.0);
}

TEST(Backward, NonScalarOutputIsContractError) {
  ad::Tape tape;
  auto w = tape.variable(Tensor({2, 2}, 1.0), "w");
  EXPECT_THROW(tape.backward(w), ContractError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  ad::Tape tape;
  auto w = tape.variable(Tensor::scalar(2.0), "w");
  auto y = ad::mul(w, w);
  auto z = ad::add(y, ad::mul(y, w));  // w^2 + w^3 -> 2w + 3w^2 = 16
  EXPECT_EQ(tape.backward(z).at("w").item(), 16.0);
}

TEST(Backward, DuplicateVariableNameRejected) {
  ad::Tape tape;
  tape.variable(Tensor::scalar(1.0), "w");
  EXPECT_THROW(tape.variable(Tensor::scalar(1.0), "w"), ContractError);
}

TEST(Backward, ReplayIsBitIdentical) {
  auto run = [] {
    Rng rng = make_rng(99);
    ad::Tape tape;
    auto a = tape.variable(random_matrix(4, 5, rng), "a");
    auto b = tape.variable(random_matrix(5, 3, rng), "b");
    auto y = ad::logsumexp_rows(ad::activation(ad::matmul(a, b), Activation::gelu));
    return tape.backward(ad::sum(y));
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, LinearFunctionIsExact) {
  ParamStore p;
  p.add("w", Tensor::row({0.3, -1.2, 2.5}));
  auto rep = finite_diff_check([](ad::Tape& t, const ParamStore::Bound& b) {
    return ad::sum(ad::mul(b.at("w"), t.constant(Tensor::row({2, -3, 0.5}))));
  }, p);
  EXPECT_LT(rep.max_rel_error, 1e-9);
  EXPECT_EQ(rep.coordinates, 3u);
}

TEST(FiniteDiff, SoftplusChain) {
  ParamStore p;
  p.add("w", Tensor::row({0.3, -1.2, 2.5, 0.01}));
  auto rep = finite_diff_check([](ad::Tape&, const ParamStore::Bound& b) {
    auto x = ad::activation(ad::activation(ad::scale(b.at("w"), 1.3), Activation::softplus), Activation::softplus);
    return ad::sum(ad::mul(x, x));
  }, p);
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

TEST(FiniteDiff, DeadParameterHasZeroError) {
  ParamStore p;
  p.add("used", Tensor::row({1.0, 2.0}));
  p.add("dead", Tensor::row({3.0}));
  auto rep = finite_diff_check([](ad::Tape&, const ParamStore::Bound& b) { return ad::sum(b.at("used")); }, p);
  EXPECT_EQ(rep.per_param.at("dead"), 0.0);
  EXPECT_LT(rep.per_param.at("used"), 1e-9);
}

TEST(FiniteDiff, NondeterministicFunctionFlagged) {
  ParamStore p;
  p.add("w", Tensor::scalar(1.0));
  int calls = 0;
  auto rep = finite_diff_check([&](ad::Tape& t, const ParamStore::Bound& b) {
    return ad::add(b.at("w"), t.constant(Tensor::scalar(++calls)));
  }, p);
  EXPECT_FALSE(rep.deterministic);
}

TEST(FiniteDiff, EpsOutsideRangeRejected) {
  ParamStore p;
  p.add("w", Tensor::scalar(1.0));
  auto f = [](ad::Tape&, const ParamStore::Bound& b) { return b.at("w"); };
  EXPECT_THROW(finite_diff_check(f, p, GradCheckOptions{0.0}), ContractError);
  EXPECT_THROW(finite_diff_check(f, p, GradCheckOptions{1e-2}), ContractError);
}

TEST(FiniteDiff, CorruptedGradientIsCaught) {
  ParamStore p;
  p.add("w", Tensor::row({0.5, 1.5}));
  GradCheckOptions opt;
  opt.corrupt_gradient = 1e-3;
  auto rep = finite_diff_check([](ad::Tape&, const ParamStore::Bound& b) { return ad::sum(ad::mul(b.at("w"), b.at("w"))); }, p, opt);
  EXPECT_GT(rep.max_rel_error, 1e-5);
}

class OpGradient : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradient, EveryOpMatchesCentralDifferences) {
  for (const auto& c : op_cases(GetParam())) {
    auto rep = finite_diff_check(c.f, c.params);
    EXPECT_TRUE(rep.deterministic) << c.op;
    EXPECT_LT(rep.max_rel_error, 1e-5) << c.op << " worst " << rep.worst_param << "[" << rep.worst_index << "] analytic "
                                       << rep.worst_analytic << " numeric " << rep.worst_numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, OpGradient, ::testing::Values(1, 2, 3, 4, 5, 6, 7, 8));

TEST(Ops, DivRowsRejectsZeroDivisor) {
  ad::Tape tape;
  EXPECT_THROW(ad::div_rows(tape.constant(Tensor({2, 2}, 1.0)), tape.constant(Tensor({2, 1}, 0.0))), NumericError);
}

TEST(Ops, RowNormalizeOfZeroRowIsZero) {
  ad::Tape tape;
  auto x = tape.variable(Tensor::matrix({{0, 0}, {3, 4}}), "x");
  auto y = ad::row_normalize(x);
  EXPECT_EQ(y.value().at(0, 0), 0.0);
  EXPECT_NEAR(y.value().at(1, 0), 0.6, 1e-15);
  auto g = tape.backward(ad::sum(y)).at("x");
  EXPECT_EQ(g.at(0, 0), 0.0);
}

TEST(Ops, CrossEntropyRejectsBadTarget) {
  ad::Tape tape;
  EXPECT_THROW(ad::cross_entropy(tape.constant(Tensor({2, 3}, 0.0)), {0, 3}), DataError);
}

TEST(Params, CosineStepSizeEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_step_size(0, 100, 0.1, 0.0), 0.1);
  EXPECT_NEAR(cosine_step_size(50, 100, 0.1, 0.0), 0.05, 1e-15);
  EXPECT_NEAR(cosine_step_size(100, 100, 0.1, 0.01), 0.01, 1e-15);
}

TEST(Params, DuplicateNameRejected) {
  ParamStore p;
  p.add("w", Tensor::scalar(1));
  EXPECT_THROW(p.add("w", Tensor::scalar(2)), ContractError);
}
