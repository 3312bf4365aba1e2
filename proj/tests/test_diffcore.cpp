#include <gtest/gtest.h>

#include <cmath>

#include "mixvi/adam.hpp"
#include "mixvi/autodiff.hpp"
#include "mixvi/errors.hpp"
#include "mixvi/parameters.hpp"
#include "mixvi/rng.hpp"
#include "test_support.hpp"

using namespace mixvi;
using mixvi::testutil::check_gradients;
using mixvi::testutil::random_tensor;

TEST(ForwardOps, ExpOfZeroIsOne) {
  Tape t;
  EXPECT_EQ(exp(t.constant(Tensor::scalar(0.0))).item(), 1.0);
}

TEST(ForwardOps, IdentityMatmul) {
  Tape t;
  const Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
  const Var r = matmul(t.constant(Tensor::identity(2)), t.constant(m));
  EXPECT_EQ(r.value(), m);
}

TEST(ForwardOps, SigmoidOfZeroIsHalf) {
  Tape t;
  EXPECT_EQ(sigmoid(t.constant(Tensor::scalar(0.0))).item(), 0.5);
}

TEST(ForwardOps, ShapeMismatchIsDimensionError) {
  Tape t;
  const Var a = t.constant(Tensor::matrix(2, 3));
  const Var b = t.constant(Tensor::matrix(3, 2));
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(matmul(a, a), DimensionError);
}

TEST(ForwardOps, LogOfNonPositiveIsDomainError) {
  Tape t;
  EXPECT_THROW(log(t.constant(Tensor::vector({1.0, 0.0}))), DomainError);
  EXPECT_THROW(log(t.constant(Tensor::scalar(-3.0))), DomainError);
}

TEST(ForwardOps, OverflowIsReportedNotPropagated) {
  Tape t;
  EXPECT_THROW(exp(t.constant(Tensor::scalar(1000.0))), NumericalError);
}

TEST(ForwardOps, TrailingRowAndScalarBroadcast) {
  Tape t;
  const Var m = t.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
  const Var row = t.constant(Tensor::vector({10, 20}));
  EXPECT_EQ(add(m, row).value(), Tensor::from_rows({{11, 22}, {13, 24}}));
  EXPECT_EQ(mul(m, t.constant(Tensor::scalar(2))).value(), Tensor::from_rows({{2, 4}, {6, 8}}));
  // A column is not a trailing-dimension broadcast.
  EXPECT_THROW(add(m, t.constant(Tensor::matrix(2, 1))), DimensionError);
}

TEST(ForwardOps, LogSumExpIsStable) {
  Tape t;
  const Var v = t.constant(Tensor::from_rows({{-1000, -1000}}));
  EXPECT_DOUBLE_EQ(logsumexp(v, 1).item(), -1000.0 + std::log(2.0));
}

TEST(Backward, SquareAtThree) {
  Tape t;
  const Var x = t.leaf(Tensor::scalar(3.0));
  t.backward(mul(x, x));
  EXPECT_EQ(t.grad(x).item(), 6.0);
}

TEST(Backward, IndependentParameterHasExactlyZeroGradient) {
  Tape t;
  const Var x = t.leaf(Tensor::scalar(1.5));
  const Var p = t.leaf(Tensor::vector({0.3, -0.2}));
  t.backward(exp(x));
  const Tensor g = t.grad(p);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape t;
  const Var x = t.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(t.backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, SumTanhMatmulMatchesFiniteDifferences) {
  Rng rng(11);
  const Tensor w = random_tensor(Shape{3, 4}, rng, -0.5, 0.5);
  const Tensor x = random_tensor(Shape{2, 3}, rng, -0.5, 0.5);
  const auto check = check_gradients(
      [](Tape&, const std::vector<Var>& v) { return sum(tanh(matmul(v[1], v[0]))); }, {w, x});
  EXPECT_TRUE(check.ok()) << check.worst_rel;
}

TEST(Backward, EachNodeVisitedAtMostOnce) {
  Tape t;
  const Var x = t.leaf(Tensor::vector({0.1, 0.2, 0.3}));
  const Var y = mul(x, x);
  const Var loss = sum(add(y, exp(y)));
  t.backward(loss);
  EXPECT_LE(t.backward_visits(), t.size());
  EXPECT_EQ(t.backward_visits(), 5u);  // x, y, exp(y), add, sum
  EXPECT_THROW(t.backward(loss), ContractError);
}

// Every primitive against central differences on random inputs in [-2, 2].
struct PrimitiveCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Var(Tape&, const std::vector<Var>&)> fn;
  double lo = -2.0;
  double hi = 2.0;
};

void PrintTo(const PrimitiveCase& c, std::ostream* os) { *os << c.name; }

class PrimitiveGradient : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const PrimitiveCase& c = GetParam();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed * 97);
    std::vector<Tensor> inputs;
    for (const Shape& s : c.shapes) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
    const auto check = check_gradients(c.fn, inputs);
    EXPECT_TRUE(check.ok()) << c.name << " worst rel " << check.worst_rel << " abs " << check.worst_abs;
  }
}

// Weighted sum so that each output entry carries a distinct adjoint.
Var weighted(Var v) {
  Tensor w(v.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * static_cast<double>(i % 7);
  return sum(mul(v, v.tape().constant(w)));
}

INSTANTIATE_TEST_SUITE_P(
    AllPrimitives, PrimitiveGradient,
    ::testing::Values(
        PrimitiveCase{"add", {{3, 2}, {3, 2}}, [](Tape&, const auto& v) { return weighted(add(v[0], v[1])); }},
        PrimitiveCase{"add_row", {{3, 2}, {2}}, [](Tape&, const auto& v) { return weighted(add(v[0], v[1])); }},
        PrimitiveCase{"sub_scalar", {{3, 2}, {}}, [](Tape&, const auto& v) { return weighted(sub(v[0], v[1])); }},
        PrimitiveCase{"mul_row", {{2}, {3, 2}}, [](Tape&, const auto& v) { return weighted(mul(v[0], v[1])); }},
        PrimitiveCase{"div", {{3, 2}, {3, 2}}, [](Tape&, const auto& v) { return weighted(div(v[0], v[1])); }, 0.5,
                      2.0},
        PrimitiveCase{"exp", {{2, 3}}, [](Tape&, const auto& v) { return weighted(exp(v[0])); }},
        PrimitiveCase{"log", {{2, 3}}, [](Tape&, const auto& v) { return weighted(log(v[0])); }, 0.2, 2.0},
        PrimitiveCase{"tanh", {{2, 3}}, [](Tape&, const auto& v) { return weighted(tanh(v[0])); }},
        PrimitiveCase{"sigmoid", {{2, 3}}, [](Tape&, const auto& v) { return weighted(sigmoid(v[0])); }},
        PrimitiveCase{"softplus", {{2, 3}}, [](Tape&, const auto& v) { return weighted(softplus(v[0])); }},
        PrimitiveCase{"log_sigmoid", {{2, 3}}, [](Tape&, const auto& v) { return weighted(log_sigmoid(v[0])); }},
        PrimitiveCase{"square", {{2, 3}}, [](Tape&, const auto& v) { return weighted(square(v[0])); }},
        PrimitiveCase{"sqrt", {{2, 3}}, [](Tape&, const auto& v) { return weighted(sqrt(v[0])); }, 0.2, 2.0},
        PrimitiveCase{"clamp", {{2, 3}}, [](Tape&, const auto& v) { return weighted(clamp(v[0], -5.0, 5.0)); }},
        PrimitiveCase{"matmul", {{2, 3}, {3, 4}}, [](Tape&, const auto& v) { return weighted(matmul(v[0], v[1])); }},
        PrimitiveCase{"mean", {{2, 3}}, [](Tape&, const auto& v) { return mean(square(v[0])); }},
        PrimitiveCase{"sum_axis0", {{3, 4}}, [](Tape&, const auto& v) { return weighted(sum_axis(v[0], 0)); }},
        PrimitiveCase{"sum_axis1", {{3, 4}}, [](Tape&, const auto& v) { return weighted(sum_axis(v[0], 1)); }},
        PrimitiveCase{"logsumexp0", {{3, 4}}, [](Tape&, const auto& v) { return weighted(logsumexp(v[0], 0)); }},
        PrimitiveCase{"logsumexp1", {{3, 4}}, [](Tape&, const auto& v) { return weighted(logsumexp(v[0], 1)); }},
        PrimitiveCase{"reshape", {{2, 3}}, [](Tape&, const auto& v) { return weighted(reshape(v[0], {3, 2})); }},
        PrimitiveCase{"concat_cols", {{2, 3}, {2, 1}},
                      [](Tape&, const auto& v) { return weighted(concat_cols(std::vector<Var>{v[0], v[1]})); }},
        PrimitiveCase{"concat_rows", {{2, 3}, {1, 3}},
                      [](Tape&, const auto& v) { return weighted(concat_rows(std::vector<Var>{v[0], v[1]})); }},
        PrimitiveCase{"slice_cols", {{3, 4}}, [](Tape&, const auto& v) { return weighted(slice_cols(v[0], 1, 3)); }},
        PrimitiveCase{"slice_rows", {{4, 2}}, [](Tape&, const auto& v) { return weighted(slice_rows(v[0], 1, 3)); }},
        PrimitiveCase{"tile_rows", {{2, 3}}, [](Tape&, const auto& v) { return weighted(tile_rows(v[0], 3)); }},
        PrimitiveCase{"gaussian_rows", {{3, 2}, {3, 2}, {3, 2}},
                      [](Tape&, const auto& v) { return weighted(gaussian_log_prob_rows(v[0], v[1], v[2])); }},
        PrimitiveCase{"gaussian_rows_bcast", {{3, 2}, {1, 2}, {2}},
                      [](Tape&, const auto& v) { return weighted(gaussian_log_prob_rows(v[0], v[1], v[2])); }},
        PrimitiveCase{"pairwise_gaussian", {{3, 2}, {4, 2}, {4, 2}},
                      [](Tape&, const auto& v) { return weighted(pairwise_gaussian_log_prob(v[0], v[1], v[2])); }},
        PrimitiveCase{"bernoulli_rows", {{2, 3}},
                      [](Tape&, const auto& v) {
                        return weighted(bernoulli_log_prob_rows(v[0], Tensor::from_rows({{1, 0, 1}, {0, 0, 1}})));
                      }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Backward, SumOfIndependentLossesIsSumOfBackwards) {
  Rng rng(5);
  const Tensor a = random_tensor(Shape{2, 2}, rng);
  auto loss1 = [](Var x) { return sum(tanh(x)); };
  auto loss2 = [](Var x) { return sum(exp(scale(x, 0.5))); };
  Tape t1, t2, t3;
  const Var x1 = t1.leaf(a), x2 = t2.leaf(a), x3 = t3.leaf(a);
  t1.backward(loss1(x1));
  t2.backward(loss2(x2));
  t3.backward(add(loss1(x3), loss2(x3)));
  const Tensor g1 = t1.grad(x1), g2 = t2.grad(x2), g3 = t3.grad(x3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(g3[i], g1[i] + g2[i], 1e-15);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(42);
    Tape t;
    const Var w = t.leaf(rng.normal_matrix(4, 3));
    const Var x = t.constant(rng.normal_matrix(5, 4));
    t.backward(sum(logsumexp(tanh(matmul(x, w)), 1)));
    return t.grad(w);
  };
  EXPECT_EQ(run(), run());
}

TEST(AdamStep, ZeroGradientLeavesParametersUnchanged) {
  ParameterStore store;
  store.add("p", Tensor::vector({1.0, -2.0}));
  Adam adam(AdamConfig{0.1});
  adam.step(store, {Tensor::vector({0.0, 0.0})});
  EXPECT_EQ(store.value(0), Tensor::vector({1.0, -2.0}));
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(AdamStep, FirstStepMovesByLearningRate) {
  // m = 0.1, v = 0.001 -> bias-corrected 1 and 1 -> step lr / (1 + eps).
  ParameterStore store;
  store.add("p", Tensor::scalar(0.5));
  Adam adam(AdamConfig{0.1});
  adam.step(store, {Tensor::scalar(1.0)});
  EXPECT_DOUBLE_EQ(store.value(0).item(), 0.5 - 0.1 / (1.0 + 1e-8));
}

TEST(AdamStep, Deterministic) {
  auto run = [] {
    ParameterStore store;
    store.add("p", Tensor::vector({0.2, 0.4}));
    Adam adam(AdamConfig{0.1});
    for (int i = 0; i < 5; ++i) adam.step(store, {Tensor::vector({0.3 * i, -0.1})});
    return store.value(0);
  };
  EXPECT_EQ(run(), run());
}

TEST(AdamStep, NonFiniteGradientNamesParameter) {
  ParameterStore store;
  store.add("enc.0.w", Tensor::scalar(0.0));
  Adam adam;
  try {
    adam.step(store, {Tensor::scalar(std::nan(""))});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.where(), "enc.0.w");
  }
  EXPECT_EQ(store.value(0).item(), 0.0);
}
