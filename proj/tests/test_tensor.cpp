#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "djpq/errors.hpp"
#include "djpq/ops.hpp"
#include "test_util.hpp"

using namespace djpq;
using djpq::testing::gradient_check;
using djpq::testing::randn;
using djpq::testing::to_vector;

namespace {

// Projects an output onto fixed random weights so every element contributes.
Tensor project(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

// Direct-summation convolution used as the reference.
std::vector<float> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto cout = w.dim(0), k = w.dim(2);
  const auto oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<float> out(n * cout * oh * ow, 0.0f);
  auto xd = x.data();
  auto wdd = w.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double acc = b.defined() ? b.data()[o] : 0.0;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - pad;
                const long ix = static_cast<long>(xo * stride + kx) - pad;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += xd[((i * cin + c) * h + iy) * wd + ix] * wdd[((o * cin + c) * k + ky) * k + kx];
              }
          out[((i * cout + o) * oh + y) * ow + xo] = static_cast<float>(acc);
        }
  return out;
}

}  // namespace

TEST(Conv2d, IdentityKernelReturnsInput) {
  std::mt19937_64 rng(1);
  Tensor x = randn({2, 1, 4, 5}, rng);
  Tensor w({1, 1, 1, 1}, 1.0f);
  Tensor b({1}, 0.0f);
  EXPECT_EQ(to_vector(conv2d(x, w, b, 1, 0)), to_vector(x));
}

TEST(Conv2d, ConstantInputWithOnesKernelGivesNineC) {
  const float c = 0.75f;
  Tensor x({1, 1, 6, 6}, c);
  Tensor w({1, 1, 3, 3}, 1.0f);
  Tensor out = conv2d(x, w, Tensor(), 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 4, 4}));
  for (float v : out.data()) EXPECT_FLOAT_EQ(v, 9.0f * c);
}

TEST(Conv2d, MatchesDirectSummation) {
  std::mt19937_64 rng(2);
  Tensor x = randn({2, 3, 7, 6}, rng);
  Tensor w = randn({4, 3, 3, 3}, rng);
  Tensor b = randn({4}, rng);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      const auto got = to_vector(conv2d(x, w, b, stride, pad));
      const auto want = naive_conv(x, w, b, stride, pad);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-4);
    }
  }
}

TEST(Conv2d, OutputSizeFormula) {
  Tensor x({1, 2, 9, 8});
  Tensor w({3, 2, 3, 3});
  EXPECT_EQ(conv2d(x, w, Tensor(), 2, 1).shape(), (Shape{1, 3, 5, 4}));
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  Tensor x = randn({2, 2, 5, 5}, rng, true);
  Tensor w = randn({3, 2, 3, 3}, rng, true);
  Tensor b = randn({3}, rng, true);
  Tensor r = randn({2, 3, 3, 3}, rng);
  auto loss = [&] { return project(conv2d(x, w, b, 2, 1), r); };
  EXPECT_LE(gradient_check(loss, {x, w, b}), 1e-3);
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  Tensor x({1, 2, 5, 5});
  Tensor w({3, 4, 3, 3});
  try {
    conv2d(x, w, Tensor(), 1, 0);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(shape_str(x.shape())), std::string::npos);
    EXPECT_NE(msg.find(shape_str(w.shape())), std::string::npos);
  }
}

TEST(Dense, IdentityWeightReturnsInput) {
  std::mt19937_64 rng(4);
  Tensor x = randn({3, 4}, rng);
  Tensor w({4, 4});
  for (std::size_t i = 0; i < 4; ++i) w.data()[i * 4 + i] = 1.0f;
  EXPECT_EQ(to_vector(dense(x, w, Tensor({4}, 0.0f))), to_vector(x));
}

TEST(Dense, HandArithmetic) {
  Tensor x({1, 2}, {1.0f, 2.0f});
  Tensor w({2, 1}, {1.0f, 1.0f});
  Tensor b({1}, {0.0f});
  Tensor y = dense(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_FLOAT_EQ(y.item(), 3.0f);
}

TEST(Dense, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  Tensor x = randn({3, 4}, rng, true);
  Tensor w = randn({4, 2}, rng, true);
  Tensor b = randn({2}, rng, true);
  Tensor r = randn({3, 2}, rng);
  auto loss = [&] { return project(dense(x, w, b), r); };
  EXPECT_LE(gradient_check(loss, {x, w, b}, 1e-2), 1e-4);
}

TEST(Dense, InnerDimensionMismatch) {
  EXPECT_THROW(dense(Tensor({2, 3}), Tensor({4, 2}), Tensor()), DimensionError);
}

TEST(BatchNorm, NormalizedInputIsFixedPoint) {
  // Layout [N=2, C=2, H=1, W=2]; each channel holds {1, -1, -1, 1} or
  // {1, -1, 1, -1}: zero mean, unit biased variance.
  Tensor x({2, 2, 1, 2}, {1, -1, 1, -1, -1, 1, 1, -1});
  BatchNormStats stats(2);
  Tensor y = batchnorm2d(x, Tensor({2}, 1.0f), Tensor({2}, 0.0f), stats, BnMode::kTrain);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-5);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  Tensor x({3, 2, 2, 2}, 4.0f);
  BatchNormStats stats(2);
  Tensor beta({2}, {0.25f, -1.5f});
  Tensor y = batchnorm2d(x, Tensor({2}, 2.0f), beta, stats, BnMode::kTrain);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y.data()[(n * 2 + c) * 4 + i], beta.data()[c]);
}

TEST(BatchNorm, RunningStatsUpdateAndEvalMode) {
  Tensor x({2, 1, 1, 2}, {1.0f, 3.0f, 5.0f, 7.0f});
  BatchNormStats stats(1);
  batchnorm2d(x, Tensor({1}, 1.0f), Tensor({1}, 0.0f), stats, BnMode::kTrain);
  // mean 4, unbiased variance 20/3, momentum 0.1
  EXPECT_NEAR(stats.running_mean[0], 0.4f, 1e-6);
  EXPECT_NEAR(stats.running_var[0], 0.9f + 0.1f * 20.0f / 3.0f, 1e-5);
  Tensor y = batchnorm2d(x, Tensor({1}, 1.0f), Tensor({1}, 0.0f), stats, BnMode::kEval);
  const double inv = 1.0 / std::sqrt(stats.running_var[0] + stats.epsilon);
  EXPECT_NEAR(y.data()[0], (1.0 - stats.running_mean[0]) * inv, 1e-5);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  Tensor x = randn({4, 3, 2, 2}, rng, true);
  Tensor g = randn({3}, rng, true);
  Tensor b = randn({3}, rng, true);
  Tensor r = randn({4, 3, 2, 2}, rng);
  BatchNormStats stats(3);
  auto loss = [&] { return project(batchnorm2d(x, g, b, stats, BnMode::kTrain), r); };
  EXPECT_LE(gradient_check(loss, {g, b}), 1e-3);
  EXPECT_LE(gradient_check(loss, {x}, 1e-2), 1e-3);
}

TEST(BatchNorm, NonPositiveEpsilonIsConfigError) {
  BatchNormStats stats(1);
  stats.epsilon = 0.0f;
  EXPECT_THROW(batchnorm2d(Tensor({2, 1, 1, 1}), Tensor({1}, 1.0f), Tensor({1}), stats, BnMode::kTrain), ConfigError);
}

TEST(BatchNorm, TrainModeNeedsTwoValuesPerChannel) {
  BatchNormStats stats(1);
  EXPECT_THROW(batchnorm2d(Tensor({1, 1, 1, 1}), Tensor({1}, 1.0f), Tensor({1}), stats, BnMode::kTrain),
               ContractError);
}

TEST(Relu, Definition) {
  Tensor x({3}, {-1.0f, 0.0f, 2.0f}, true);
  Tensor y = relu(x);
  EXPECT_EQ(to_vector(y), (std::vector<float>{0.0f, 0.0f, 2.0f}));
  backward(sum(y));
  EXPECT_EQ(x.grad()[0], 0.0f);
  EXPECT_EQ(x.grad()[2], 1.0f);
}

TEST(MaxPool, Definition) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = maxpool2d(x, 2, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 4.0f);
}

TEST(MaxPool, TiesRouteToFirstMaximum) {
  Tensor x({1, 1, 2, 2}, {5, 5, 5, 5}, true);
  backward(sum(maxpool2d(x, 2, 2)));
  EXPECT_EQ(to_vector(Tensor(x.shape(), std::vector<float>(x.grad().begin(), x.grad().end()))),
            (std::vector<float>{1, 0, 0, 0}));
}

TEST(MaxPool, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  Tensor x = randn({2, 2, 5, 5}, rng, true);
  Tensor r = randn({2, 2, 3, 3}, rng);
  auto loss = [&] { return project(maxpool2d(x, 3, 2, 1), r); };
  EXPECT_LE(gradient_check(loss, {x}), 1e-3);
}

TEST(GlobalAvgPool, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  Tensor x = randn({2, 3, 3, 2}, rng, true);
  Tensor r = randn({2, 3}, rng);
  auto loss = [&] { return project(global_avgpool(x), r); };
  EXPECT_LE(gradient_check(loss, {x}), 1e-3);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogK) {
  Tensor logits({2, 10}, 0.3f);
  std::vector<int> labels{3, 7};
  EXPECT_NEAR(softmax_cross_entropy(logits, labels).item(), std::log(10.0), 1e-6);
}

TEST(SoftmaxCrossEntropy, SaturatedLogits) {
  Tensor logits({1, 4}, 0.0f);
  logits.data()[2] = 1e4f;
  std::vector<int> labels{2};
  EXPECT_LE(softmax_cross_entropy(logits, labels).item(), 1e-6);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  Tensor logits = randn({4, 5}, rng, true);
  std::vector<int> labels{0, 4, 2, 2};
  auto loss = [&] { return softmax_cross_entropy(logits, labels); };
  EXPECT_LE(gradient_check(loss, {logits}, 1e-2), 1e-4);
}

TEST(SoftmaxCrossEntropy, OutOfRangeLabelIsDataError) {
  std::vector<int> labels{5};
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 5}), labels), DataError);
  labels[0] = -1;
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 5}), labels), DataError);
}

TEST(Backward, SumGivesOnes) {
  Tensor w({3}, {0.5f, -2.0f, 3.0f}, true);
  backward(sum(w));
  EXPECT_EQ(to_vector(Tensor({3}, std::vector<float>(w.grad().begin(), w.grad().end()))),
            (std::vector<float>{1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  Tensor w({2}, {1.0f, 2.0f}, true);
  backward(sum(square(w)));
  EXPECT_FLOAT_EQ(w.grad()[0], 2.0f);
  EXPECT_FLOAT_EQ(w.grad()[1], 4.0f);
}

TEST(Backward, FanOutSumsPathGradients) {
  Tensor x({2}, {1.0f, -3.0f}, true);
  backward(sum(add(x, x)));
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 2.0f);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor w({2}, 1.0f, true);
  Tensor y = scale(w, 2.0f);
  EXPECT_THROW(backward(y), ContractError);
  Tape::current().clear();
}

TEST(Backward, CompositeNetworkMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  Tensor x = randn({3, 1, 6, 6}, rng);
  Tensor cw = randn({2, 1, 3, 3}, rng, true, 0.5f);
  Tensor cb = randn({2}, rng, true, 0.1f);
  Tensor dw = randn({32, 4}, rng, true, 0.3f);
  Tensor db = randn({4}, rng, true, 0.1f);
  std::vector<int> labels{1, 3, 0};
  auto net = [&] {
    Tensor h = relu(conv2d(x, cw, cb, 1, 0));  // [3,2,4,4]
    return softmax_cross_entropy(dense(h.reshape({3, 32}), dw, db), labels);
  };
  EXPECT_LE(gradient_check(net, {cw, cb, dw, db}), 1e-3);
}

TEST(Tape, NoGrowthWithoutRequiresGrad) {
  Tape::current().clear();
  std::mt19937_64 rng(11);
  Tensor x = randn({1, 1, 4, 4}, rng);
  Tensor w = randn({1, 1, 3, 3}, rng);
  Tensor y = relu(conv2d(x, w, Tensor(), 1, 1));
  y = maxpool2d(y, 2, 2);
  EXPECT_EQ(Tape::current().size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, NoGradGuardDisablesRecording) {
  Tape::current().clear();
  Tensor w({2}, 1.0f, true);
  {
    NoGradGuard guard;
    Tensor y = sum(square(w));
    EXPECT_EQ(Tape::current().size(), 0u);
  }
  Tensor y = sum(square(w));
  EXPECT_GT(Tape::current().size(), 0u);
  Tape::current().clear();
}

TEST(Determinism, SameSeedSameOutputBits) {
  auto run = [] {
    std::mt19937_64 rng(42);
    Tensor x = randn({2, 3, 8, 8}, rng);
    Tensor w = randn({4, 3, 3, 3}, rng);
    return to_vector(relu(conv2d(x, w, Tensor(), 1, 1)));
  };
  EXPECT_EQ(run(), run());
}

TEST(SgdStep, Definition) {
  Tensor w({1}, {1.0f}, true);
  w.grad()[0] = 2.0f;
  sgd_step(w, 0.1f, 1.0f);
  EXPECT_FLOAT_EQ(w.item(), 0.8f);
  EXPECT_EQ(w.grad()[0], 0.0f);
}

TEST(SgdStep, ScaleMultipliesStep) {
  Tensor a({1}, {1.0f}, true), b({1}, {1.0f}, true);
  a.grad()[0] = b.grad()[0] = 0.5f;
  sgd_step(a, 0.01f, 1.0f);
  sgd_step(b, 0.01f, 5.0f);
  EXPECT_NEAR(1.0f - b.item(), 5.0f * (1.0f - a.item()), 1e-7);
}

TEST(SgdStep, StepsComposeAdditively) {
  Tensor w({1}, {0.0f}, true);
  for (int i = 0; i < 2; ++i) {
    w.grad()[0] = 1.0f;
    sgd_step(w, 0.25f, 1.0f);
  }
  EXPECT_FLOAT_EQ(w.item(), -0.5f);
}

TEST(SgdStep, MissingGradIsContractError) {
  Tensor w({1}, 1.0f, true);
  EXPECT_THROW(sgd_step(w, 0.1f, 1.0f), ContractError);
}

TEST(Tensor, CheckFiniteNamesTensor) {
  EXPECT_THROW(Tensor({2}, {1.0f, std::nanf("")}), DataError);
  Tensor t({2}, {1.0f, 2.0f});
  t.data()[1] = std::nanf("");
  try {
    t.check_finite("weights");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("weights"), std::string::npos);
  }
}
