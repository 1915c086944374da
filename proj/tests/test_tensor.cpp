#include "iclstreams/tensor.hpp"

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "iclstreams/rng.hpp"
#include "support/gradcheck.hpp"

using icls::CounterRng;
using icls::Tape;
using icls::TapeT;
using icls::Tensor;
using icls::TensorT;

namespace {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

// Independent matmul oracle: plain triple loop, no Eigen, loop order i-j-k.
template <typename Real>
TensorT<Real> matmul_oracle(const TensorT<Real>& a, const TensorT<Real>& b) {
  auto out = TensorT<Real>::zeros({a.rows(), b.cols()});
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j) {
      Real acc = 0;
      for (int k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
      out.at(i, j) = acc;
    }
  return out;
}

template <typename Real>
TensorT<Real> random_tensor(std::vector<int> shape, CounterRng& rng,
                            bool requires_grad = false) {
  auto t = TensorT<Real>::zeros(std::move(shape), requires_grad);
  icls::fill_normal(t, rng, 1.0);
  return t;
}

// Weighted scalar projection sum(U * X * V) so gradients are asymmetric in
// both indices; relies on matmul/sum, which get their own checks first.
template <typename Real>
TensorT<Real> project_to_scalar(TapeT<Real>& tape, const TensorT<Real>& x,
                                const TensorT<Real>& u, const TensorT<Real>& v) {
  return icls::sum(&tape, icls::matmul(&tape, icls::matmul(&tape, u, x), v));
}

TEST(Matmul, IdentityCase) {
  auto a = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2, 2}, {3, 4, 5, 6});
  auto c = icls::matmul<float>(nullptr, a, b);
  EXPECT_EQ(c.values()[0], 3);
  EXPECT_EQ(c.values()[1], 4);
  EXPECT_EQ(c.values()[2], 5);
  EXPECT_EQ(c.values()[3], 6);
}

TEST(Matmul, HandComputed1x2x1) {
  auto a = Tensor::from({1, 2}, {1, 2});
  auto b = Tensor::from({2, 1}, {3, 4});
  auto c = icls::matmul<float>(nullptr, a, b);
  ASSERT_EQ(c.size(), 1);
  EXPECT_FLOAT_EQ(c.at(0), 11.0f);
}

TEST(Matmul, MatchesTripleLoopOracle5x7x3) {
  CounterRng rng(42);
  auto a = random_tensor<float>({5, 7}, rng);
  auto b = random_tensor<float>({7, 3}, rng);
  auto c = icls::matmul<float>(nullptr, a, b);
  auto ref = matmul_oracle(a, b);
  for (int i = 0; i < c.size(); ++i) {
    const float tol = 1e-6f * std::max(1.0f, std::abs(ref.values()[i]));
    EXPECT_NEAR(c.values()[i], ref.values()[i], tol);
  }
}

TEST(Matmul, OracleAgreementRandomShapesUpTo16) {
  CounterRng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + static_cast<int>(rng.uniform_int(16));
    const int k = 1 + static_cast<int>(rng.uniform_int(16));
    const int n = 1 + static_cast<int>(rng.uniform_int(16));
    auto a = random_tensor<float>({m, k}, rng);
    auto b = random_tensor<float>({k, n}, rng);
    auto c = icls::matmul<float>(nullptr, a, b);
    auto ref = matmul_oracle(a, b);
    for (int i = 0; i < c.size(); ++i) {
      const float tol = 1e-6f * std::max(1.0f, std::abs(ref.values()[i]));
      ASSERT_NEAR(c.values()[i], ref.values()[i], tol)
          << "shapes " << m << "x" << k << "x" << n;
    }
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    icls::matmul<float>(nullptr, a, b);
    FAIL() << "expected ShapeError";
  } catch (const icls::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, DeterministicAcrossRuns) {
  CounterRng rng(3);
  auto a = random_tensor<float>({9, 11}, rng);
  auto b = random_tensor<float>({11, 5}, rng);
  auto c1 = icls::matmul<float>(nullptr, a, b);
  auto c2 = icls::matmul<float>(nullptr, a, b);
  for (int i = 0; i < c1.size(); ++i)
    ASSERT_EQ(c1.values()[i], c2.values()[i]);
}

TEST(SoftmaxColumns, SymmetricColumn) {
  auto m = Tensor::from({2, 1}, {0, 0});
  auto s = icls::softmax_columns<float>(nullptr, m);
  EXPECT_FLOAT_EQ(s.at(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(s.at(1, 0), 0.5f);
}

TEST(SoftmaxColumns, AnalyticColumn) {
  auto m = Tensor::from({2, 1}, {std::log(1.0f), std::log(3.0f)});
  auto s = icls::softmax_columns<float>(nullptr, m);
  EXPECT_NEAR(s.at(0, 0), 0.25f, 1e-6);
  EXPECT_NEAR(s.at(1, 0), 0.75f, 1e-6);
}

TEST(SoftmaxColumns, StabilizedAgainstOverflow) {
  auto m = Tensor::from({2, 1}, {1000.0f, 1000.0f});
  auto s = icls::softmax_columns<float>(nullptr, m);
  EXPECT_FLOAT_EQ(s.at(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(s.at(1, 0), 0.5f);
}

TEST(SoftmaxColumns, ColumnsSumToOneForAnyFiniteInput) {
  CounterRng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int r = 1 + static_cast<int>(rng.uniform_int(12));
    const int c = 1 + static_cast<int>(rng.uniform_int(12));
    auto m = random_tensor<float>({r, c}, rng);
    icls::scale<float>(nullptr, m, 50.0f);
    auto s = icls::softmax_columns<float>(nullptr, m);
    for (int j = 0; j < c; ++j) {
      float acc = 0;
      for (int i = 0; i < r; ++i) {
        acc += s.at(i, j);
        EXPECT_GT(s.at(i, j), 0.0f);
        EXPECT_LT(s.at(i, j), 1.0f + 1e-6f);
      }
      ASSERT_NEAR(acc, 1.0f, 1e-6f);
    }
  }
}

TEST(SoftmaxColumns, NanInputRaisesNumericError) {
  auto m = Tensor::from({2, 1}, {0.0f, std::nanf("")});
  EXPECT_THROW(icls::softmax_columns<float>(nullptr, m), icls::NumericError);
}

TEST(Elementwise, ReluAddTranspose) {
  auto x = Tensor::from({2}, {-1, 2});
  auto r = icls::relu<float>(nullptr, x);
  EXPECT_FLOAT_EQ(r.at(0), 0.0f);
  EXPECT_FLOAT_EQ(r.at(1), 2.0f);

  CounterRng rng(5);
  auto a = random_tensor<float>({3, 4}, rng);
  auto zero = Tensor::zeros({3, 4});
  auto same = icls::add<float>(nullptr, a, zero);
  for (int i = 0; i < a.size(); ++i) ASSERT_EQ(same.values()[i], a.values()[i]);

  auto tt = icls::transpose<float>(nullptr, icls::transpose<float>(nullptr, a));
  for (int i = 0; i < a.size(); ++i) ASSERT_EQ(tt.values()[i], a.values()[i]);
}

TEST(CrossEntropy, UniformLogits128) {
  auto logits = Tensor::zeros({128});
  auto loss = icls::cross_entropy_logits<float>(nullptr, logits, 17);
  EXPECT_NEAR(loss.at(0), std::log(128.0f), 1e-5);
  EXPECT_NEAR(loss.at(0), 4.852f, 1e-3);
}

TEST(CrossEntropy, LossVanishesWithGrowingMargin) {
  float prev = 1e9f;
  for (float margin : {2.0f, 10.0f, 40.0f}) {
    auto logits = Tensor::zeros({8});
    logits.at(3) = margin;
    auto loss = icls::cross_entropy_logits<float>(nullptr, logits, 3);
    EXPECT_LT(loss.at(0), prev);
    prev = loss.at(0);
  }
  EXPECT_LT(prev, 1e-6f);
}

TEST(CrossEntropy, TargetOutOfRange) {
  auto logits = Tensor::zeros({8});
  EXPECT_THROW(icls::cross_entropy_logits<float>(nullptr, logits, 8),
               icls::IndexError);
  EXPECT_THROW(icls::cross_entropy_logits<float>(nullptr, logits, -1),
               icls::IndexError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  CounterRng rng(13);
  auto logits = random_tensor<double>({10}, rng, true);
  auto res = icls::test::gradcheck<double>(
      [&](DTape& tape) {
        return icls::cross_entropy_logits<double>(&tape, logits, 4);
      },
      {&logits}, 1e-3, 1e-4, 1e-9);
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::zeros({3, 2}, true);
  Tape tape;
  auto loss = icls::sum(&tape, x);
  icls::backward(tape, loss);
  for (int i = 0; i < x.size(); ++i) ASSERT_FLOAT_EQ(x.grad()[i], 1.0f);
}

TEST(Backward, SumOfProductMatchesFiniteDifferences) {
  CounterRng rng(17);
  auto x = random_tensor<double>({4, 3}, rng, true);
  auto w = random_tensor<double>({3, 5}, rng, true);
  auto res = icls::test::gradcheck<double>(
      [&](DTape& tape) {
        return icls::sum(&tape, icls::matmul(&tape, x, w));
      },
      {&x, &w}, 1e-3, 1e-4, 1e-9);
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(Backward, DetachedTensorHasNoGrad) {
  auto x = Tensor::zeros({2, 2}, true);
  auto d = Tensor::zeros({2, 2}, false);  // detached
  Tape tape;
  auto loss = icls::sum(&tape, icls::add(&tape, x, d));
  icls::backward(tape, loss);
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(d.has_grad());
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto x = Tensor::zeros({2}, true);
  Tape tape;
  auto loss = icls::sum(&tape, x);
  icls::backward(tape, loss);
  icls::backward(tape, loss);
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 2.0f);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::zeros({2, 2}, true);
  Tape tape;
  auto y = icls::relu(&tape, x);
  EXPECT_THROW(icls::backward(tape, y), icls::ContractError);
}

// Chain rule: gradient of a composition equals the finite-difference
// Jacobian product on a nontrivial three-stage pipeline.
TEST(Backward, ChainRuleNumericCheck) {
  CounterRng rng(23);
  auto x = random_tensor<double>({4, 2}, rng, true);
  auto w1 = random_tensor<double>({5, 4}, rng, true);
  auto w2 = random_tensor<double>({1, 5}, rng, true);
  auto res = icls::test::gradcheck<double>(
      [&](DTape& tape) {
        auto h = icls::relu(&tape, icls::matmul(&tape, w1, x));
        auto s = icls::softmax_columns(&tape, h);
        return icls::sum(&tape, icls::matmul(&tape, w2, s));
      },
      {&x, &w1, &w2}, 1e-3, 1e-3, 1e-9);
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(SgdStep, BasicUpdateAndZeroing) {
  auto p = Tensor::from({1}, {1.0f}, true);
  p.grad()[0] = 2.0f;
  std::vector<Tensor*> params{&p};
  icls::sgd_step(params, 0.01f);
  EXPECT_FLOAT_EQ(p.at(0), 0.98f);
  EXPECT_FLOAT_EQ(p.grad()[0], 0.0f);
}

TEST(SgdStep, ZeroLearningRateLeavesParamsUnchanged) {
  auto p = Tensor::from({3}, {1, 2, 3}, true);
  p.grad();
  p.grad()[0] = 5;
  std::vector<Tensor*> params{&p};
  icls::sgd_step(params, 0.0f);
  EXPECT_FLOAT_EQ(p.at(0), 1);
  EXPECT_FLOAT_EQ(p.at(1), 2);
  EXPECT_FLOAT_EQ(p.at(2), 3);
}

TEST(SgdStep, OneStepOnQuadratic) {
  // loss = p^2/2 built as 0.5 * p^T p, so grad = p; from p=1 with lr=0.1 one
  // step lands on 0.9.
  auto p = Tensor::from({1, 1}, {1.0f}, true);
  Tape tape;
  auto sq = icls::matmul(&tape, icls::transpose(&tape, p), p);
  auto loss = icls::scale(&tape, icls::sum(&tape, sq), 0.5f);
  icls::backward(tape, loss);
  EXPECT_FLOAT_EQ(p.grad()[0], 1.0f);
  std::vector<Tensor*> params{&p};
  icls::sgd_step(params, 0.1f);
  EXPECT_FLOAT_EQ(p.at(0), 0.9f);
}

TEST(SgdStep, MissingGradIsContractError) {
  auto p = Tensor::from({1}, {1.0f}, true);
  std::vector<Tensor*> params{&p};
  EXPECT_THROW(icls::sgd_step(params, 0.1f), icls::ContractError);
}

// Per-op finite-difference sweep at h=1e-3, dims <= 8.
TEST(GradCheck, AllDifferentiableOps) {
  CounterRng rng(31);
  auto u = random_tensor<double>({2, 6}, rng);
  auto v6 = random_tensor<double>({6, 2}, rng);
  auto v4 = random_tensor<double>({4, 2}, rng);
  auto v8 = random_tensor<double>({8, 2}, rng);
  auto v3 = random_tensor<double>({3, 2}, rng);

  {  // matmul
    auto a = random_tensor<double>({6, 5}, rng, true);
    auto b = random_tensor<double>({5, 4}, rng, true);
    auto u6 = random_tensor<double>({2, 6}, rng);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return project_to_scalar(t, icls::matmul(&t, a, b), u6, v4);
        },
        {&a, &b});
    EXPECT_TRUE(res.ok) << "matmul: " << res.detail;
  }
  {  // add + scale
    auto a = random_tensor<double>({6, 4}, rng, true);
    auto b = random_tensor<double>({6, 4}, rng, true);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return project_to_scalar(t, icls::scale(&t, icls::add(&t, a, b), 1.7),
                                   u, v4);
        },
        {&a, &b});
    EXPECT_TRUE(res.ok) << "add/scale: " << res.detail;
  }
  {  // add_colvec
    auto m = random_tensor<double>({6, 4}, rng, true);
    auto b = random_tensor<double>({6}, rng, true);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return project_to_scalar(t, icls::add_colvec(&t, m, b), u, v4);
        },
        {&m, &b});
    EXPECT_TRUE(res.ok) << "add_colvec: " << res.detail;
  }
  {  // add_tiled
    auto m = random_tensor<double>({6, 8}, rng, true);
    auto p = random_tensor<double>({6, 4}, rng, true);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return project_to_scalar(t, icls::add_tiled(&t, m, p), u, v8);
        },
        {&m, &p});
    EXPECT_TRUE(res.ok) << "add_tiled: " << res.detail;
  }
  {  // relu (shift away from the kink)
    auto a = random_tensor<double>({6, 4}, rng, true);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) { return project_to_scalar(t, icls::relu(&t, a), u, v4); },
        {&a});
    EXPECT_TRUE(res.ok) << "relu: " << res.detail;
  }
  {  // transpose
    auto a = random_tensor<double>({4, 6}, rng, true);
    auto u4 = random_tensor<double>({2, 6}, rng);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return project_to_scalar(t, icls::transpose(&t, a), u4, v4);
        },
        {&a});
    EXPECT_TRUE(res.ok) << "transpose: " << res.detail;
  }
  {  // row/col select, row_range, col_range
    auto a = random_tensor<double>({6, 5}, rng, true);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          auto r = icls::sum(&t, icls::row_select(&t, a, 2));
          auto c = icls::sum(&t, icls::col_select(&t, a, 3));
          auto rr = icls::sum(&t, icls::row_range(&t, a, 1, 4));
          auto cr = icls::sum(&t, icls::col_range(&t, a, 2, 4));
          return icls::add(&t, icls::add(&t, r, c), icls::add(&t, rr, cr));
        },
        {&a});
    EXPECT_TRUE(res.ok) << "select: " << res.detail;
  }
  {  // concat_rows
    auto a = random_tensor<double>({3, 4}, rng, true);
    auto b = random_tensor<double>({3, 4}, rng, true);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return project_to_scalar(
              t, icls::concat_rows(&t, {a, b}), u, v4);
        },
        {&a, &b});
    EXPECT_TRUE(res.ok) << "concat_rows: " << res.detail;
  }
  {  // softmax_columns
    auto a = random_tensor<double>({6, 4}, rng, true);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return project_to_scalar(t, icls::softmax_columns(&t, a), u, v4);
        },
        {&a});
    EXPECT_TRUE(res.ok) << "softmax_columns: " << res.detail;
  }
  {  // block scores + masked softmax + attend (two blocks of 4)
    auto k = random_tensor<double>({6, 8}, rng, true);
    auto q = random_tensor<double>({6, 8}, rng, true);
    auto w = random_tensor<double>({6, 8}, rng, true);
    auto v2 = random_tensor<double>({2, 2}, rng);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          auto s = icls::block_scores(&t, k, q, 4, 0.5);
          auto a = icls::block_softmax_columns(&t, s, 4, true);
          auto o = icls::block_attend(&t, w, a, 4);
          auto picked = icls::select_block_columns(&t, o, 4, 3);
          return project_to_scalar(t, picked, u, v2);
        },
        {&k, &q, &w});
    EXPECT_TRUE(res.ok) << "block attention: " << res.detail;
  }
  {  // embed_columns
    auto table = random_tensor<double>({5, 4}, rng, true);
    std::vector<int> ids{3, 0, 3, 2};
    auto ue = random_tensor<double>({2, 4}, rng);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return project_to_scalar(t, icls::embed_columns(&t, table, ids), ue,
                                   v4);
        },
        {&table});
    EXPECT_TRUE(res.ok) << "embed_columns: " << res.detail;
  }
  {  // layernorm_columns
    auto x = random_tensor<double>({6, 4}, rng, true);
    auto g = random_tensor<double>({6}, rng, true);
    auto b = random_tensor<double>({6}, rng, true);
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return project_to_scalar(t, icls::layernorm_columns(&t, x, g, b), u,
                                   v4);
        },
        {&x, &g, &b});
    EXPECT_TRUE(res.ok) << "layernorm: " << res.detail;
  }
  {  // cross_entropy_columns
    auto logits = random_tensor<double>({5, 4}, rng, true);
    std::vector<int> targets{1, 0, 4, 2};
    auto res = icls::test::gradcheck<double>(
        [&](DTape& t) {
          return icls::cross_entropy_columns(&t, logits, targets);
        },
        {&logits});
    EXPECT_TRUE(res.ok) << "cross_entropy_columns: " << res.detail;
  }
}

TEST(BlockOps, MaskedSoftmaxZeroesFutureRows) {
  CounterRng rng(41);
  auto s = random_tensor<float>({4, 8}, rng);
  auto a = icls::block_softmax_columns<float>(nullptr, s, 4, true);
  for (int b = 0; b < 2; ++b)
    for (int j = 0; j < 4; ++j) {
      float acc = 0;
      for (int i = 0; i < 4; ++i) {
        if (i > j) ASSERT_EQ(a.at(i, b * 4 + j), 0.0f);
        acc += a.at(i, b * 4 + j);
      }
      ASSERT_NEAR(acc, 1.0f, 1e-6f);
    }
}

TEST(Tensor, ShapeDataInvariant) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), icls::ShapeError);
  EXPECT_THROW(Tensor::zeros({0, 2}), icls::ShapeError);
}

}  // namespace
