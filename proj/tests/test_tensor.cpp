#include <gtest/gtest.h>

#include <cmath>

#include "dat/params.hpp"
#include "dat/tensor.hpp"
#include "oracles.hpp"

using namespace dat;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  Initializer init(seed);
  return init.uniform(std::move(s), -scale, scale);
}

}  // namespace

TEST(Tensor, ZeroDimensionRejected) {
  EXPECT_THROW(Tensor({2, 0, 3}), DimensionError);
  EXPECT_TRUE(Tensor().empty());
}

TEST(Tensor, ReshapeKeepsDataAndChecksSize) {
  Tensor t = random_tensor({2, 3, 4}, 1);
  Tensor r = t.reshaped({6, 4});
  EXPECT_EQ(r.shape(), (Shape{6, 4}));
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(r[i], t[i]);
  EXPECT_THROW(t.reshaped({5, 5}), DimensionError);
}

TEST(Tensor, MatmulMatchesNaiveProduct) {
  const Tensor a = random_tensor({7, 5}, 2), b = random_tensor({5, 9}, 3);
  EXPECT_LT(max_abs_diff(matmul(a, b), oracle::matmul(a, b)), 1e-14);
  EXPECT_THROW(matmul(a, a), DimensionError);
}

TEST(Tensor, LinearAppliesOverLastAxis) {
  const Tensor x = random_tensor({2, 3, 4, 5}, 4), w = random_tensor({5, 6}, 5), b = random_tensor({6}, 6);
  const Tensor y = linear(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 4, 6}));
  const Tensor ref = oracle::matmul(x.reshaped({24, 5}), w);
  for (std::size_t r = 0; r < 24; ++r)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(y[r * 6 + j], ref[r * 6 + j] + b[j], 1e-14);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  const Tensor x = random_tensor({16, 33}, 7, 30.0);
  const Tensor y = softmax_lastdim(x);
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 33; ++j) {
      EXPECT_GE(y[r * 33 + j], 0.0);
      s += y[r * 33 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tensor, SoftmaxIsShiftInvariantAndStable) {
  Tensor x({1, 3}, std::vector<double>{1000.0, 1001.0, 1002.0});
  const Tensor y = softmax_lastdim(x);
  const double z = 1.0 + std::exp(1.0) + std::exp(2.0);
  EXPECT_NEAR(y[0], 1.0 / z, 1e-15);
  EXPECT_NEAR(y[2], std::exp(2.0) / z, 1e-15);
}

TEST(Tensor, LayerNormNormalizesLastAxis) {
  const Tensor x = random_tensor({4, 10}, 8, 5.0);
  const Tensor y = layer_norm(x, Tensor({10}, 1.0), Tensor({10}, 0.0));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < 10; ++j) m += y[r * 10 + j] / 10.0;
    for (std::size_t j = 0; j < 10; ++j) v += (y[r * 10 + j] - m) * (y[r * 10 + j] - m) / 10.0;
    EXPECT_NEAR(m, 0.0, 1e-14);
    EXPECT_NEAR(v, 1.0, 1e-3);  // eps keeps the variance a little under 1
  }
}

TEST(Tensor, GeluExactErfForm) {
  EXPECT_EQ(gelu_scalar(0.0), 0.0);
  EXPECT_NEAR(gelu_scalar(1.0), 0.8413447460685429, 1e-15);
  EXPECT_NEAR(gelu_scalar(-1.0), -0.15865525393145707, 1e-15);
  EXPECT_NEAR(gelu_grad_scalar(0.0), 0.5, 1e-15);
}

TEST(Tensor, ConvMatchesDirectDefinition) {
  const Tensor x = random_tensor({2, 9, 7, 4}, 9);
  struct Case {
    std::size_t k, stride, pad, groups, cout;
  };
  for (const Case c : {Case{3, 1, 1, 1, 5}, Case{3, 2, 1, 1, 6}, Case{5, 2, 2, 4, 4}, Case{1, 1, 0, 2, 6},
                       Case{3, 2, 0, 4, 8}}) {
    const Tensor w = random_tensor({c.k, c.k, 4 / c.groups, c.cout}, 10 + c.k);
    const Tensor b = random_tensor({c.cout}, 20 + c.k);
    const Tensor y = conv2d(x, w, b, {c.stride, c.pad, c.groups});
    const Tensor ref = oracle::conv2d(x, w, b, c.stride, c.pad, c.groups);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(y, ref), 1e-13) << "k=" << c.k << " s=" << c.stride << " g=" << c.groups;
  }
}

TEST(Tensor, ConvOutputSizeAndErrors) {
  EXPECT_EQ(conv_out_size(224, 3, 2, 1), 112u);
  EXPECT_EQ(conv_out_size(56, 9, 8, 4), 7u);
  EXPECT_THROW(conv_out_size(2, 5, 1, 0), ConfigError);
}

TEST(Tensor, GlobalAveragePool) {
  const Tensor x = random_tensor({2, 3, 4, 5}, 11);
  const Tensor y = global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{2, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 5; ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < 12; ++p) s += x[(n * 12 + p) * 5 + c];
      EXPECT_NEAR(y[n * 5 + c], s / 12.0, 1e-15);
    }
}

TEST(Tensor, NonFiniteValuesAreReported) {
  Tensor x({1, 2}, std::vector<double>{1.0, NAN});
  EXPECT_THROW(linear(x, Tensor({2, 2}, 1.0), Tensor()), NumericError);
}

TEST(Params, InitializerIsDeterministic) {
  Initializer a(5), b(5);
  EXPECT_EQ(a.trunc_normal({100}), b.trunc_normal({100}));
  Initializer c(5);
  const Tensor t = c.trunc_normal({1000}, 0.02);
  for (double v : t.values()) EXPECT_LE(std::abs(v), 0.04);
}
