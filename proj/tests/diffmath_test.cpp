#include <cmath>
#include <numeric>

#include "enprompt/errors.hpp"
#include "enprompt/grad_check.hpp"
#include "enprompt/matrix.hpp"
#include "enprompt/optimizer.hpp"
#include "enprompt/random.hpp"
#include "enprompt/tape.hpp"
#include "gtest/gtest.h"

namespace enprompt {
namespace {

// Reference product written as the textbook triple loop.
Matrix triple_loop_product(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  return out;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix a{{1.5, -2.0}, {0.25, 4.0}};
  EXPECT_EQ(matmul(Matrix::identity(2), a), a);
}

TEST(Matmul, OneByOne) {
  const Matrix out = matmul(Matrix{{1, 2}}, Matrix{{3}, {4}});
  ASSERT_EQ(out.rows(), 1u);
  ASSERT_EQ(out.cols(), 1u);
  EXPECT_EQ(out(0, 0), 11.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(17);
  const Matrix a = rng.normal_matrix(3, 4, 1.0);
  const Matrix b = rng.normal_matrix(4, 2, 1.0);
  const Matrix got = matmul(a, b);
  const Matrix want = triple_loop_product(a, b);
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_NEAR(got.values()[i], want.values()[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3 by 2x3"), std::string::npos) << msg;
  }
}

TEST(Normalize, ThreeFourFive) {
  const Matrix out = l2_normalize_rows(Matrix{{3, 4}});
  EXPECT_NEAR(out(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(out(0, 1), 0.8, 1e-15);
}

TEST(Normalize, UnitRowUnchangedAndZeroRowGuarded) {
  const Matrix out = l2_normalize_rows(Matrix{{1, 0, 0}, {0, 0, 0}}, 1e-12);
  EXPECT_EQ(out(0, 0), 1.0);
  EXPECT_EQ(out(1, 0), 0.0);
  EXPECT_EQ(out(1, 2), 0.0);
}

TEST(Normalize, RandomRowsHaveUnitNorm) {
  Rng rng(3);
  const Matrix out = l2_normalize_rows(rng.normal_matrix(20, 7, 5.0));
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double sq = 0.0;
    for (double v : out.row(i)) sq += v * v;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-9);
  }
}

TEST(Cosine, SelfOrthogonalAntipodal) {
  const Matrix a{{1, 2, 3}};
  const Matrix b{{1, 2, 3}, {-2, 1, 0}, {-1, -2, -3}};
  const Matrix s = cosine_similarity_matrix(a, b);
  EXPECT_NEAR(s(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(s(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(s(0, 2), -1.0, 1e-12);
  EXPECT_THROW(cosine_similarity_matrix(Matrix(1, 2), Matrix(1, 3)), DimensionError);
}

TEST(Cosine, EntriesStayInRange) {
  Rng rng(9);
  const Matrix s = cosine_similarity_matrix(rng.normal_matrix(10, 4, 3.0),
                                            rng.normal_matrix(12, 4, 0.1));
  for (double v : s.values()) {
    EXPECT_LE(v, 1.0 + 1e-9);
    EXPECT_GE(v, -1.0 - 1e-9);
  }
}

TEST(Softmax, EqualLogitsAreUniform) {
  const auto p = softmax_with_temperature(std::vector<double>{0.3, 0.3}, 1.0);
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.5, 1e-15);
}

TEST(Softmax, HandComputedPair) {
  // 1 / (1 + e^{-0.2}) = 0.549834
  const auto p = softmax_with_temperature(std::vector<double>{0.8, 0.6}, 1.0);
  EXPECT_NEAR(p[0], 0.5498, 1e-4);
  EXPECT_NEAR(p[1], 0.4502, 1e-4);
}

TEST(Softmax, StableForLargeLogitsAndOrderPreserving) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(6);
    for (double& v : logits) v = rng.uniform(-1e3, 1e3);
    const auto p = softmax_with_temperature(logits, rng.uniform(0.01, 2.0));
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
    for (double v : p) EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(argmax(p), argmax(logits));
  }
}

TEST(Softmax, RejectsNonPositiveTemperature) {
  EXPECT_THROW(softmax_with_temperature(std::vector<double>{1, 2}, 0.0), ParameterError);
  EXPECT_THROW(softmax_with_temperature(std::vector<double>{1, 2}, -1.0), ParameterError);
}

TEST(GradientCheck, QuadraticLoss) {
  ParameterRegistry params;
  Rng rng(1);
  params.add("x", rng.normal_matrix(3, 4, 1.0));
  const TapedLoss half_norm = [](Tape& t, const ParameterRegistry& p) {
    const Var x = t.parameter(p, "x");
    return t.scale(t.sum(t.hadamard(x, x)), 0.5);
  };
  const auto result = gradient_check(half_norm, params, 1e-5);
  EXPECT_LT(result.max_relative_error, 1e-7);
  EXPECT_EQ(result.entries_checked, 12u);
  // d/dx of 1/2 |x|^2 is x.
  EXPECT_EQ(result.analytic.at("x"), params.at("x").value);
}

TEST(GradientCheck, FrozenParameterGetsExactZero) {
  ParameterRegistry params;
  params.add("w", Matrix{{1.0, 2.0}});
  params.add("frozen", Matrix{{3.0, -1.0}}, /*frozen=*/true);
  const TapedLoss loss = [](Tape& t, const ParameterRegistry& p) {
    return t.sum(t.hadamard(t.parameter(p, "w"), t.parameter(p, "frozen")));
  };
  const auto result = gradient_check(loss, params, 1e-6);
  EXPECT_LT(result.max_relative_error, 1e-7);
  for (double v : result.analytic.at("frozen").values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(result.entries_checked, 2u);
}

TEST(GradientCheck, RejectsBadStepAndNonFiniteLoss) {
  ParameterRegistry params;
  params.add("x", Matrix{{1.0}});
  const TapedLoss identity = [](Tape& t, const ParameterRegistry& p) {
    return t.parameter(p, "x");
  };
  EXPECT_THROW(gradient_check(identity, params, 0.0), ParameterError);
  EXPECT_THROW(gradient_check(identity, params, 0.1), ParameterError);
  params.at("x").value(0, 0) = std::nan("");
  EXPECT_THROW(gradient_check(identity, params, 1e-5), NumericError);
}

// Each op of the vocabulary, composed into a scalar, checked against finite
// differences on seeded inputs.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const int which = GetParam();
  Rng rng(100 + static_cast<std::uint64_t>(which));
  ParameterRegistry params;
  params.add("a", rng.normal_matrix(3, 4, 1.0));
  params.add("b", rng.normal_matrix(4, 4, 1.0));
  params.add("r", rng.normal_matrix(1, 4, 1.0));
  params.add("w", rng.normal_matrix(3, 4, 1.0));
  params.add("p", rng.uniform_matrix(3, 4, 0.5, 2.0));

  const TapedLoss loss = [which](Tape& t, const ParameterRegistry& p) {
    const Var a = t.parameter(p, "a");
    const Var b = t.parameter(p, "b");
    Var y;
    switch (which) {
      case 0: y = t.matmul(a, b); break;
      case 1: y = t.matmul_transposed(a, t.slice_rows(b, 0, 2)); break;
      case 2: y = t.transpose(t.add(a, t.parameter(p, "w"))); break;
      case 3: y = t.add_row(t.sub(a, t.parameter(p, "w")), t.parameter(p, "r")); break;
      case 4: y = t.affine(t.hadamard(a, a), -0.7, 0.3); break;
      case 5: y = t.tanh(t.matmul(a, b)); break;
      case 6: y = t.log(t.parameter(p, "p")); break;
      case 7: y = t.l2_normalize_rows(a); break;
      case 8: y = t.cosine_similarity(a, b); break;
      case 9: y = t.softmax_rows(a, 0.5); break;
      case 10: y = t.column_sums(t.tanh(a)); break;
      case 11: y = t.row_sums(t.hadamard(a, a)); break;
      case 12: y = t.mean_rows(t.tanh(a)); break;
      case 13: {
        const Var parts[] = {a, t.slice_rows(b, 1, 2), t.parameter(p, "r")};
        y = t.tanh(t.concat_rows(parts));
        break;
      }
      case 14: {
        const std::size_t labels[] = {0, 3, 1};
        return t.cross_entropy(t.scale(a, 2.0), labels);
      }
      case 15: y = t.relu(t.affine(a, 1.0, 0.1)); break;
      case 16: y = t.tanh(t.gather_rows(a, {2, 0, 2, 1, 2})); break;
      case 17: y = t.tanh(t.group_sum_rows(b, 2)); break;
      default: y = a;
    }
    const Matrix& v = t.value(y);
    Rng weights_rng(7);
    const Var mix = t.constant(weights_rng.normal_matrix(v.rows(), v.cols(), 1.0));
    return t.sum(t.hadamard(y, mix));
  };
  const auto result = gradient_check(loss, params, 1e-6);
  EXPECT_LT(result.max_relative_error, 1e-5)
      << "op " << which << " worst " << result.worst_parameter << "["
      << result.worst_index << "] analytic " << result.worst_analytic
      << " numeric " << result.worst_numeric;
}

INSTANTIATE_TEST_SUITE_P(Vocabulary, OpGradient, ::testing::Range(0, 18));

TEST(Tape, GatherAndGroupSumShapes) {
  Tape t;
  const Var a = t.constant(Matrix{{1, 2}, {3, 4}, {5, 6}, {7, 8}});
  EXPECT_EQ(t.value(t.group_sum_rows(a, 2)), (Matrix{{4, 6}, {12, 14}}));
  EXPECT_EQ(t.value(t.gather_rows(a, {3, 3, 0})), (Matrix{{7, 8}, {7, 8}, {1, 2}}));
  EXPECT_THROW(t.group_sum_rows(a, 3), DimensionError);
  EXPECT_THROW(t.gather_rows(a, {4}), DimensionError);
}

TEST(Freezing, FrozenLeavesAreBitIdenticalAfterSteps) {
  Rng rng(11);
  ParameterRegistry params;
  params.add("w", rng.normal_matrix(4, 4, 1.0));
  params.add("frozen", rng.normal_matrix(4, 4, 1.0), true);
  const Matrix frozen_before = params.at("frozen").value;
  const Matrix w_before = params.at("w").value;
  SgdMomentum sgd(0.1, 0.9);
  Adam adam(0.01);
  for (int step = 0; step < 25; ++step) {
    Tape t;
    const Var loss = t.sum(t.tanh(t.matmul(t.parameter(params, "w"),
                                           t.parameter(params, "frozen"))));
    t.backward(loss);
    const auto grads = t.parameter_gradients(params);
    if (step % 2 == 0) sgd.step(params, grads); else adam.step(params, grads);
  }
  EXPECT_EQ(params.at("frozen").value, frozen_before);
  EXPECT_FALSE(params.at("w").value == w_before);
}

TEST(Optimizer, ZeroLearningRateIsNoOp) {
  ParameterRegistry params;
  params.add("w", Matrix{{1.0, 2.0}});
  GradientMap g;
  g.emplace("w", Matrix{{5.0, -5.0}});
  SgdMomentum sgd(0.0, 0.9);
  sgd.step(params, g);
  EXPECT_EQ(params.at("w").value, (Matrix{{1.0, 2.0}}));
}

TEST(Random, SubstreamsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(1, "world"), derive_seed(1, "world"));
  EXPECT_NE(derive_seed(1, "world"), derive_seed(1, "init"));
  EXPECT_NE(derive_seed(1, "world", 3), derive_seed(1, "world", 4));
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.normal(), b.normal());
}

}  // namespace
}  // namespace enprompt
