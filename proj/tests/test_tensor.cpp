// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "libkd/ops.hpp"
#include "grad_cases.hpp"
#include "test_util.hpp"

using namespace libkd;
using libkd::testing::Case;
using libkd::testing::grad_check;
using libkd::testing::primitive_cases;
using libkd::testing::random_shape;
using libkd::testing::randn64;
using libkd::testing::randn64_nonzero;
using libkd::testing::random_probs;
using libkd::testing::weighted_sum;

namespace {

constexpr double kPrimitiveTol = 1e-4;

}  // namespace

// ---- construction ---------------------------------------------------------

TEST(Tensor, ZeroDimensionRejected) { EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError); }

TEST(Tensor, FromChecksCount) { EXPECT_THROW(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), DimensionError); }

TEST(Tensor, CopiesAliasClonesDoNot) {
  Tensor a = Tensor::zeros({3});
  Tensor b = a;
  Tensor c = a.clone();
  a.set(1, 5.0);
  EXPECT_EQ(b.at(1), 5.0);
  EXPECT_EQ(c.at(1), 0.0);
}

TEST(Tensor, DtypeConversionRoundTrip) {
  Tensor a = Tensor::from({2}, {0.1, -3.5}, DType::f32);
  Tensor b = a.to(DType::f64).to(DType::f32);
  EXPECT_TRUE(bit_equal(a, b));
}

// ---- matmul ---------------------------------------------------------------

TEST(Matmul, IdentityLeavesMatrix) {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m).to_vector(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Tensor r = Tensor::from({1, 2}, {1, 2});
  Tensor c = Tensor::from({2, 1}, {3, 4});
  EXPECT_EQ(matmul(r, c).to_vector(), (std::vector<double>{11}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(1);
  const double err = grad_check([](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); },
                                {randn64({4, 5}, rng), randn64({5, 3}, rng)});
  EXPECT_LT(err, kPrimitiveTol);
}

TEST(Matmul, MatchesNestedLoopsBitExactAcrossRoutes) {
  // Shapes chosen to hit the direct, edge and transposed GEMM routes.
  Rng rng(2);
  const std::size_t shapes[][3] = {{3, 5, 7}, {40, 4, 9}, {7, 33, 2}, {64, 20, 17}, {1, 1, 1}};
  for (auto [m, k, n] : shapes) {
    for (DType dt : {DType::f32, DType::f64}) {
      Tensor a = Tensor::randn({m, k}, rng, 1.0, dt);
      Tensor b = Tensor::randn({k, n}, rng, 1.0, dt);
      Tensor c = matmul(a, b);
      detail::dispatch(dt, [&]<class T>(T) {
        auto av = a.data<T>();
        auto bv = b.data<T>();
        auto cv = c.data<T>();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            T s = 0;
            for (std::size_t p = 0; p < k; ++p) s += av[i * k + p] * bv[p * n + j];
            ASSERT_EQ(cv[i * n + j], s) << m << "x" << k << "x" << n;
          }
        }
      });
    }
  }
}

TEST(Matmul, BatchedGradient) {
  Rng rng(3);
  const double err =
      grad_check([](const std::vector<Tensor>& in) { return weighted_sum(matmul(in[0], in[1])); },
                 {randn64({2, 3, 4}, rng), randn64({2, 4, 5}, rng)});
  EXPECT_LT(err, kPrimitiveTol);
}

// ---- softmax --------------------------------------------------------------

TEST(Softmax, SymmetricPair) {
  Tensor p = softmax(Tensor::from({1, 2}, {0, 0}, DType::f64), 1);
  EXPECT_EQ(p.to_vector(), (std::vector<double>{0.5, 0.5}));
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tensor p = softmax(Tensor::from({1, 2}, {1000, 0}, DType::f64), 1);
  EXPECT_NEAR(p.at(0), 1.0, 1e-15);
  EXPECT_NEAR(p.at(1), 0.0, 1e-15);
  EXPECT_TRUE(std::isfinite(p.at(0)) && std::isfinite(p.at(1)));
}

TEST(Softmax, MatchesDirectFormula) {
  Tensor p = softmax(Tensor::from({3}, {1, 2, 3}, DType::f64), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.at(i), std::exp(i + 1.0) / z, 1e-15);
}

TEST(Softmax, SlicesSumToOneAlongAnyAxis) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn(random_shape(rng, 3), rng, 5.0);
    const std::size_t axis = rng.uniform_index(3);
    Tensor s = sum(softmax(x, axis), axis);
    for (double v : s.to_vector()) EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(LogSoftmax, ExpEqualsSoftmax) {
  Rng rng(5);
  Tensor x = randn64({3, 4}, rng);
  Tensor a = softmax(x, 1);
  Tensor b = log_softmax(x, 1);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(std::exp(b.at(i)), a.at(i), 1e-15);
}

// ---- cross entropy --------------------------------------------------------

TEST(CrossEntropy, PerfectPredictionIsZero) {
  Tensor z = Tensor::from({1, 3}, {200, 0, 0}, DType::f64);
  const std::size_t y[] = {0};
  EXPECT_NEAR(cross_entropy(z, y).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Tensor z = Tensor::zeros({2, 7}, DType::f64);
  const std::size_t y[] = {3, 6};
  EXPECT_NEAR(cross_entropy(z, y).item(), std::log(7.0), 1e-14);
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
  Rng rng(6);
  Tensor z = randn64({2, 3}, rng, 2.0);
  const std::size_t y[] = {2, 0};
  const double s = 0.1;
  double expect = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    double m = -1e300;
    for (std::size_t c = 0; c < 3; ++c) m = std::max(m, z.at(b * 3 + c));
    double se = 0.0;
    for (std::size_t c = 0; c < 3; ++c) se += std::exp(z.at(b * 3 + c) - m);
    const double lse = m + std::log(se);
    for (std::size_t c = 0; c < 3; ++c) {
      const double q = (c == y[b] ? 1.0 - s : 0.0) + s / 3.0;
      expect -= q * (z.at(b * 3 + c) - lse);
    }
  }
  expect /= 2.0;
  EXPECT_NEAR(cross_entropy(z, y, s).item(), expect, 1e-10);
}

TEST(CrossEntropy, SoftTargetsEqualIndexTargetsForOneHot) {
  Rng rng(7);
  Tensor z = randn64({3, 4}, rng);
  const std::size_t y[] = {1, 3, 0};
  Tensor q = Tensor::zeros({3, 4}, DType::f64);
  for (std::size_t b = 0; b < 3; ++b) q.set(b * 4 + y[b], 1.0);
  EXPECT_NEAR(cross_entropy(z, y, 0.1).item(), cross_entropy(z, q, 0.1).item(), 1e-14);
}

TEST(CrossEntropy, InvalidClassIndexIsRangeError) {
  const std::size_t y[] = {3};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), y), RangeError);
}

TEST(CrossEntropy, NonDistributionTargetsRejected) {
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 2}, DType::f64), Tensor::from({1, 2}, {0.7, 0.7}, DType::f64)),
               ContractError);
}

TEST(CrossEntropy, IsNonNegative) {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    Tensor z = randn64({4, 5}, rng, 3.0);
    const std::size_t y[] = {0, 1, 2, 4};
    EXPECT_GE(cross_entropy(z, y, 0.1).item(), 0.0);
    EXPECT_GE(cross_entropy(z, random_probs(4, 5, rng)).item(), 0.0);
  }
}

// ---- KL divergence --------------------------------------------------------

TEST(KlDivergence, SelfIsZero) {
  Rng rng(9);
  Tensor p = random_probs(3, 5, rng);
  EXPECT_EQ(kl_divergence(p, p).item(), 0.0);
}

TEST(KlDivergence, PointMassAgainstUniform) {
  Tensor p = Tensor::from({1, 2}, {1, 0}, DType::f64);
  Tensor q = Tensor::from({1, 2}, {0.5, 0.5}, DType::f64);
  EXPECT_NEAR(kl_divergence(p, q).item(), std::log(2.0), 1e-15);
}

TEST(KlDivergence, MatchesElementwiseSum) {
  Rng rng(10);
  Tensor p = random_probs(1, 4, rng);
  Tensor q = random_probs(1, 4, rng);
  double expect = 0.0;
  for (std::size_t c = 0; c < 4; ++c) expect += p.at(c) * std::log(p.at(c) / q.at(c));
  EXPECT_NEAR(kl_divergence(p, q).item(), expect, 1e-10);
}

TEST(KlDivergence, ZeroInQWherePPositiveIsDivergence) {
  Tensor p = Tensor::from({1, 2}, {0.5, 0.5}, DType::f64);
  Tensor q = Tensor::from({1, 2}, {1.0, 0.0}, DType::f64);
  EXPECT_THROW(kl_divergence(p, q), DivergenceError);
}

TEST(KlDivergence, PositiveUnderPerturbation) {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    Tensor p = random_probs(2, 3, rng);
    Tensor q = p.clone();
    const double eps = 1e-3 * (1 + t);
    q.set(0, q.at(0) + eps);
    q.set(1, q.at(1) - eps);
    EXPECT_GT(kl_divergence(p, q).item(), 0.0);
  }
}

TEST(KlDivergence, LogitFormAgreesWithProbabilityForm) {
  Rng rng(12);
  Tensor p = random_probs(3, 4, rng);
  Tensor z = randn64({3, 4}, rng);
  EXPECT_NEAR(kl_divergence_logits(p, z).item(), kl_divergence(p, softmax(z, 1)).item(), 1e-14);
}

// ---- backward -------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::zeros({2, 3}, DType::f64).set_requires_grad();
  Tape tape;
  Tape::Recording rec(tape);
  backward(sum(x));
  EXPECT_EQ(x.grad().to_vector(), std::vector<double>(6, 1.0));
}

TEST(Backward, SquareGivesTwoX) {
  Rng rng(13);
  Tensor x = randn64({4}, rng).set_requires_grad();
  Tape tape;
  Tape::Recording rec(tape);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.grad().at(i), 2.0 * x.at(i));
}

TEST(Backward, NonScalarIsContractError) {
  Tensor x = Tensor::zeros({2}).set_requires_grad();
  Tape tape;
  Tape::Recording rec(tape);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, WithoutActiveTapeIsContractError) {
  EXPECT_THROW(backward(Tensor::zeros({1})), ContractError);
}

TEST(Backward, UnreachableLeafUntouched) {
  Tensor x = Tensor::ones({2}, DType::f64).set_requires_grad();
  Tensor y = Tensor::ones({2}, DType::f64).set_requires_grad();
  Tape tape;
  Tape::Recording rec(tape);
  Tensor unused = mul(y, y);
  backward(sum(x));
  EXPECT_FALSE(y.grad().defined());
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  Tensor x = Tensor::ones({2}, DType::f64).set_requires_grad();
  Tape tape;
  Tape::Recording rec(tape);
  backward(sum(x));
  tape.clear();
  backward(sum(scale(x, 3.0)));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{4.0, 4.0}));
}

TEST(Backward, ClearedTapeTreatsOldOutputsAsConstants) {
  Tensor x = Tensor::ones({2}, DType::f64).set_requires_grad();
  Tape tape;
  Tape::Recording rec(tape);
  Tensor y = scale(x, 2.0);
  tape.clear();
  // y was produced in an earlier epoch; it still requires grad, so it acts as a leaf.
  backward(sum(mul(y, x)));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{2.0, 2.0}));
}

TEST(Backward, NoRecordingWithoutGradInputs) {
  Tape tape;
  Tape::Recording rec(tape);
  Tensor a = Tensor::ones({3});
  Tensor b = add(a, a);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(b.requires_grad());
}

TEST(GradCheck, EveryPrimitiveAgreesWithFiniteDifferences) {
  Rng rng(2024);
  for (const Case& c : primitive_cases()) {
    for (int trial = 0; trial < 5; ++trial) {
      const double err = grad_check(c.f, c.make(rng));
      EXPECT_LT(err, kPrimitiveTol) << c.name << " trial " << trial;
    }
  }
}

// ---- determinism ----------------------------------------------------------

TEST(Determinism, SameSeedSameOpsBitIdentical) {
  auto run = [] {
    Rng rng(77);
    Tensor a = Tensor::randn({5, 6}, rng);
    Tensor b = Tensor::randn({6, 4}, rng);
    Tensor g = Tensor::ones({4});
    Tensor be = Tensor::zeros({4});
    return softmax(layer_norm(gelu(matmul(a, b)), g, be), 1);
  };
  EXPECT_TRUE(bit_equal(run(), run()));
}
