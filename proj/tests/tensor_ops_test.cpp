#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cnntention/ops.hpp"
#include "cnntention/tensor.hpp"

using namespace cnntention;

namespace {

Tensor<float> make(Shape shape, std::vector<float> values) {
  return Tensor<float>(std::move(shape), std::move(values));
}

Tensor<float> random_uniform(Shape shape, std::uint64_t key) {
  Tensor<float> t(std::move(shape));
  std::uint64_t state = key;
  for (auto& v : t.mutable_value()) {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    v = static_cast<float>(static_cast<double>(state >> 11) * 0x1.0p-53) * 2.0f - 1.0f;
  }
  return t;
}

}  // namespace

TEST(Conv2d, OverlapCounting) {
  Tensor<float> x(Shape{1, 1, 3, 3}, 1.0f);
  Tensor<float> w(Shape{1, 1, 3, 3}, 1.0f);
  Tensor<float> y = conv2d(x, w, nullptr, 1, 1);
  const std::vector<float> expected{4, 6, 4, 6, 9, 6, 4, 6, 4};
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_FLOAT_EQ(y.value()[i], expected[i]);
}

TEST(Conv2d, IdentityKernelIsIdentityMap) {
  Tensor<float> x = random_uniform({2, 3, 5, 5}, 7);
  Tensor<float> w(Shape{3, 3, 3, 3});
  auto wv = w.mutable_value();
  for (std::size_t o = 0; o < 3; ++o) wv[(o * 3 + o) * 9 + 4] = 1.0f;  // center tap, c == o
  Tensor<float> y = conv2d(x, w, nullptr, 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.value()[i], x.value()[i]);
}

TEST(Conv2d, ShapeErrorsNameTheAxes) {
  Tensor<float> x(Shape{1, 2, 4, 4}, 1.0f);
  Tensor<float> w(Shape{1, 3, 3, 3}, 1.0f);
  try {
    conv2d(x, w, nullptr, 1, 1);
    FAIL() << "expected shape error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos) << e.what();
  }
}

TEST(Conv1x1, ChannelIdentity) {
  Tensor<float> x = random_uniform({2, 2, 4, 4}, 11);
  Tensor<float> w(Shape{2, 2, 1, 1}, std::vector<float>{1, 0, 0, 1});
  Tensor<float> y = conv1x1(x, w);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.value()[i], x.value()[i]);
}

TEST(Conv1x1, SumDifferenceMixing) {
  const float a = 0.3f, b = -1.25f;
  Tensor<float> x(Shape{1, 2, 2, 2});
  auto xv = x.mutable_value();
  for (std::size_t i = 0; i < 4; ++i) xv[i] = a;
  for (std::size_t i = 4; i < 8; ++i) xv[i] = b;
  Tensor<float> w(Shape{2, 2, 1, 1}, std::vector<float>{1, 1, 1, -1});
  Tensor<float> y = conv1x1(x, w);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y.value()[i], a + b);
  for (std::size_t i = 4; i < 8; ++i) EXPECT_FLOAT_EQ(y.value()[i], a - b);
}

TEST(Conv1x1, MatchesConv2dExactly) {
  Tensor<float> x = random_uniform({3, 4, 5, 5}, 13);
  Tensor<float> w = random_uniform({6, 4, 1, 1}, 17);
  Tensor<float> via_1x1 = conv1x1(x, w);
  Tensor<float> via_conv = conv2d(x, w, nullptr, 1, 0);
  ASSERT_EQ(via_1x1.shape(), via_conv.shape());
  for (std::size_t i = 0; i < via_1x1.size(); ++i)
    EXPECT_EQ(via_1x1.value()[i], via_conv.value()[i]);
}

TEST(BatchNorm, ConstantInputNormalizesToZero) {
  Tensor<float> x(Shape{4, 3, 2, 2}, 2.5f);
  Tensor<float> scale(Shape{3}, 1.0f), shift(Shape{3});
  Tensor<float> rm(Shape{3}), rv(Shape{3}, 1.0f);
  Tensor<float> y = batchnorm2d(x, scale, shift, rm, rv, Mode::kTrain);
  for (float v : y.value()) EXPECT_NEAR(v, 0.0f, 1e-5f);
}

TEST(BatchNorm, TrainOutputHasUnitStatistics) {
  Tensor<float> x = random_uniform({8, 4, 6, 6}, 23);
  Tensor<float> scale(Shape{4}, 1.0f), shift(Shape{4});
  Tensor<float> rm(Shape{4}), rv(Shape{4}, 1.0f);
  Tensor<float> y = batchnorm2d(x, scale, shift, rm, rv, Mode::kTrain);
  const std::size_t b = 8, c = 4, hw = 36, n = b * hw;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0, var = 0;
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t i = 0; i < hw; ++i) mean += y.value()[(s * c + ch) * hw + i];
    mean /= n;
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t i = 0; i < hw; ++i) {
        double d = y.value()[(s * c + ch) * hw + i] - mean;
        var += d * d;
      }
    var /= n;
    EXPECT_NEAR(mean, 0.0, 1e-4);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(BatchNorm, TrainModeRejectsBatchOfOne) {
  Tensor<float> x(Shape{1, 2, 3, 3}, 1.0f);
  Tensor<float> scale(Shape{2}, 1.0f), shift(Shape{2});
  Tensor<float> rm(Shape{2}), rv(Shape{2}, 1.0f);
  EXPECT_THROW(batchnorm2d(x, scale, shift, rm, rv, Mode::kTrain), std::exception);
  EXPECT_NO_THROW(batchnorm2d(x, scale, shift, rm, rv, Mode::kEval));
}

TEST(Softmax, UniformAndClosedForm) {
  Tensor<float> z = softmax_rows(make({1, 2}, {0.0f, 0.0f}));
  EXPECT_FLOAT_EQ(z.value()[0], 0.5f);
  EXPECT_FLOAT_EQ(z.value()[1], 0.5f);

  Tensor<float> w = softmax_rows(make({1, 2}, {std::log(2.0f), 0.0f}));
  EXPECT_NEAR(w.value()[0], 2.0 / 3.0, 1e-6);
  EXPECT_NEAR(w.value()[1], 1.0 / 3.0, 1e-6);
}

TEST(Softmax, RowsAreDistributions) {
  Tensor<float> x = random_uniform({12, 9}, 31);
  Tensor<float> y = softmax_rows(x);
  for (std::size_t r = 0; r < 12; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      float v = y.value()[r * 9 + c];
      EXPECT_GT(v, 0.0f);
      EXPECT_LT(v, 1.0f);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogNumClasses) {
  Tensor<float> logits(Shape{4, 10}, 0.7f);
  Tensor<float> loss = cross_entropy_loss(logits, std::vector<int>{0, 3, 5, 9});
  EXPECT_NEAR(loss.item(), std::log(10.0), 1e-6);
}

TEST(CrossEntropy, LabelOutOfRangeIsRejected) {
  Tensor<float> logits(Shape{2, 10}, 0.0f);
  EXPECT_THROW(cross_entropy_loss(logits, std::vector<int>{0, 10}), std::exception);
  EXPECT_THROW(cross_entropy_loss(logits, std::vector<int>{-1, 3}), std::exception);
}

TEST(Backward, SumGivesOnes) {
  Tensor<float> x = random_uniform({3, 4}, 37);
  x.set_requires_grad();
  Tape<float> tape;
  tape.backward(sum(x));
  for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 1.0f);
}

TEST(Backward, HalfSumOfSquaresGivesX) {
  Tensor<float> x = random_uniform({3, 4}, 41);
  x.set_requires_grad();
  Tensor<float> half = Tensor<float>::scalar(0.5f);
  Tape<float> tape;
  tape.backward(scalar_mul(half, sum(mul(x, x))));
  auto g = x.grad();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i], x.value()[i], 1e-6f);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tensor<float> x = random_uniform({2, 2}, 43);
  x.set_requires_grad();
  Tape<float> tape;
  Tensor<float> y = relu(x);
  EXPECT_THROW(tape.backward(y), std::exception);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor<float> x = random_uniform({5}, 47);
  x.set_requires_grad();
  Tape<float> tape;
  Tensor<float> loss = sum(x);
  tape.backward(loss);
  tape.backward(loss);
  for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 2.0f);
}

TEST(FiniteChecks, NonFiniteForwardAborts) {
  Tensor<float> a(Shape{2}, std::numeric_limits<float>::infinity());
  Tensor<float> b(Shape{2}, 1.0f);
  try {
    add(a, b);
    FAIL() << "expected non-finite abort";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos) << e.what();
  }
}

TEST(Pools, GlobalAvgOfConstantChannelIsExact) {
  Tensor<float> x(Shape{2, 3, 4, 4});
  auto xv = x.mutable_value();
  for (std::size_t bc = 0; bc < 6; ++bc)
    for (std::size_t i = 0; i < 16; ++i) xv[bc * 16 + i] = 0.125f * bc;
  Tensor<float> y = global_avg_pool(x);
  for (std::size_t bc = 0; bc < 6; ++bc) EXPECT_EQ(y.value()[bc], 0.125f * bc);
}

TEST(Pools, GlobalMaxAndChannelPools) {
  Tensor<float> x = make({1, 2, 2, 2}, {1, 2, 3, 4, 8, 7, 6, 5});
  Tensor<float> gmax = global_max_pool(x);
  EXPECT_FLOAT_EQ(gmax.value()[0], 4.0f);
  EXPECT_FLOAT_EQ(gmax.value()[1], 8.0f);
  Tensor<float> cavg = channel_pool_avg(x);
  Tensor<float> cmax = channel_pool_max(x);
  const std::vector<float> avg_expected{4.5f, 4.5f, 4.5f, 4.5f};
  const std::vector<float> max_expected{8, 7, 6, 5};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_FLOAT_EQ(cavg.value()[i], avg_expected[i]);
    EXPECT_FLOAT_EQ(cmax.value()[i], max_expected[i]);
  }
}

TEST(PadZero, PadsAndPreservesInterior) {
  Tensor<float> x = random_uniform({1, 2, 3, 3}, 53);
  Tensor<float> y = pad_zero(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 7, 7}));
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 7; ++j) {
        const float v = y.value()[(ch * 7 + i) * 7 + j];
        if (i < 2 || i > 4 || j < 2 || j > 4) {
          EXPECT_EQ(v, 0.0f);
        } else {
          EXPECT_EQ(v, x.value()[(ch * 3 + (i - 2)) * 3 + (j - 2)]);
        }
      }
}

TEST(BilinearUpsample, ConstantStaysConstant) {
  Tensor<float> x(Shape{1, 1, 3, 3}, 0.75f);
  Tensor<float> y = bilinear_upsample(x, 9, 9);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 9, 9}));
  for (float v : y.value()) EXPECT_NEAR(v, 0.75f, 1e-6f);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  Tensor<float> x = random_uniform({4, 3, 8, 8}, 59);
  Tensor<float> w = random_uniform({8, 3, 3, 3}, 61);
  Tensor<float> y1 = conv2d(x, w, nullptr, 1, 1);
  Tensor<float> y2 = conv2d(x, w, nullptr, 1, 1);
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_EQ(y1.value()[i], y2.value()[i]);
}

TEST(Determinism, ParallelMatchesSingleThreadWithinTolerance) {
  Tensor<float> x = random_uniform({8, 3, 8, 8}, 67);
  Tensor<float> w = random_uniform({8, 3, 3, 3}, 71);
  const int saved = max_threads();
  set_max_threads(1);
  Tensor<float> y1 = conv2d(x, w, nullptr, 1, 1);
  set_max_threads(4);
  Tensor<float> y2 = conv2d(x, w, nullptr, 1, 1);
  set_max_threads(saved);
  for (std::size_t i = 0; i < y1.size(); ++i)
    EXPECT_NEAR(y1.value()[i], y2.value()[i], 1e-6f * (1.0f + std::abs(y1.value()[i])));
}

TEST(ScalarMul, ZeroScalarGivesExactZeros) {
  Tensor<float> w = Tensor<float>::scalar(0.0f);
  Tensor<float> x = random_uniform({2, 3, 4, 4}, 73);
  Tensor<float> y = scalar_mul(w, x);
  for (float v : y.value()) EXPECT_EQ(v, 0.0f);
}
