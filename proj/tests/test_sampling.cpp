#include <gtest/gtest.h>

#include "dat/params.hpp"
#include "dat/sampling.hpp"
#include "oracles.hpp"

using namespace dat;

TEST(Sampling, NormalizeRoundTrip) {
  for (std::size_t n : {1u, 2u, 7u, 56u})
    for (double p : {-0.5, 0.0, 0.3, static_cast<double>(n) - 0.5}) EXPECT_NEAR(denormalize(normalize(p, n), n), p, 1e-13);
  EXPECT_DOUBLE_EQ(normalize(-0.5, 8), -1.0);
  EXPECT_DOUBLE_EQ(normalize(7.5, 8), 1.0);
}

TEST(Sampling, ReferenceGridCellCenters) {
  const Tensor g = reference_grid(2, 4);
  ASSERT_EQ(g.shape(), (Shape{2, 4, 2}));
  EXPECT_DOUBLE_EQ(g.at({0, 0, 0}), -0.75);
  EXPECT_DOUBLE_EQ(g.at({0, 0, 1}), -0.5);
  EXPECT_DOUBLE_EQ(g.at({1, 3, 0}), 0.75);
  EXPECT_DOUBLE_EQ(g.at({1, 3, 1}), 0.5);
  for (double v : g.values()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Sampling, ClipAndItsSubgradient) {
  Tensor p({4}, std::vector<double>{-1.5, -0.2, 0.9, 3.0});
  const Tensor c = clip_locations(p);
  EXPECT_EQ(c, Tensor({4}, std::vector<double>{-1.0, -0.2, 0.9, 1.0}));
  const Tensor g = clip_locations_backward(p, Tensor({4}, 1.0));
  EXPECT_EQ(g, Tensor({4}, std::vector<double>{0.0, 1.0, 1.0, 0.0}));
}

TEST(Sampling, LatticeSiteReturnsExactValue) {
  Initializer init(1);
  const Tensor z = init.uniform({1, 5, 6, 3}, -1, 1);
  Tensor grid({1, 1, 1, 2});
  grid[0] = normalize(4.0, 6);
  grid[1] = normalize(2.0, 5);
  const Tensor s = bilinear_sample(z, grid);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(s[c], z.at({0, 2, 4, c}));
}

TEST(Sampling, CenterOfTwoByTwoIsTheAverage) {
  const Tensor z({1, 2, 2, 1}, std::vector<double>{0, 1, 2, 3});
  const Tensor s = bilinear_sample(z, Tensor({1, 1, 1, 2}, 0.0));
  EXPECT_DOUBLE_EQ(s[0], 1.5);
}

TEST(Sampling, PartitionOfUnityOnConstantMaps) {
  Initializer init(2);
  const Tensor z({2, 6, 5, 3}, 2.5);
  // Every point whose four taps are inside the map reproduces the constant.
  const double lo_x = normalize(0.0, 5), hi_x = normalize(4.0, 5), lo_y = normalize(0.0, 6), hi_y = normalize(5.0, 6);
  Tensor grid({2, 8, 8, 2});
  for (std::size_t i = 0; i < grid.size(); i += 2) {
    grid[i] = init.uniform({1}, lo_x, hi_x)[0];
    grid[i + 1] = init.uniform({1}, lo_y, hi_y)[0];
  }
  const Tensor s = bilinear_sample(z, grid);
  for (double v : s.values()) EXPECT_NEAR(v, 2.5, 1e-12);
}

TEST(Sampling, ZeroPaddingOutsideTheMap) {
  const Tensor z({1, 4, 4, 1}, 1.0);
  Tensor grid({1, 1, 2, 2});
  grid[0] = 1.0;  // right edge: half the taps fall outside
  grid[1] = 0.0;
  grid[2] = -1.0;
  grid[3] = -1.0;  // corner: three quarters outside
  const Tensor s = bilinear_sample(z, grid);
  EXPECT_NEAR(s[0], 0.5, 1e-15);
  EXPECT_NEAR(s[1], 0.25, 1e-15);
}

TEST(Sampling, MatchesPointwiseOracle) {
  Initializer init(3);
  const Tensor z = init.uniform({2, 5, 7, 4}, -1, 1);
  const Tensor grid = init.uniform({2, 3, 3, 2}, -1, 1);
  const Tensor s = bilinear_sample(z, grid);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 9; ++p)
      for (std::size_t c = 0; c < 4; ++c)
        EXPECT_NEAR(s[(n * 9 + p) * 4 + c], oracle::bilinear(z, n, c, grid[(n * 9 + p) * 2], grid[(n * 9 + p) * 2 + 1]),
                    1e-14);
}

TEST(Sampling, GroupedGridSamplesEachChannelBlockAtItsOwnPoints) {
  Initializer init(4);
  const Tensor z = init.uniform({1, 4, 4, 6}, -1, 1);
  const Tensor grid = init.uniform({1, 3, 2, 2, 2}, -1, 1);
  const Tensor s = bilinear_sample(z, grid);
  ASSERT_EQ(s.shape(), (Shape{1, 2, 2, 6}));
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t k = 0; k < 2; ++k) {
        const double* loc = grid.data() + (g * 4 + p) * 2;
        EXPECT_NEAR(s[p * 6 + g * 2 + k], oracle::bilinear(z, 0, g * 2 + k, loc[0], loc[1]), 1e-14);
      }
  EXPECT_THROW(bilinear_sample(z, Tensor({1, 4, 2, 2, 2})), ConfigError);
  EXPECT_THROW(bilinear_sample(z, Tensor({2, 2, 2, 2})), DimensionError);
}

TEST(Sampling, BackwardIsTheAdjointOfForward) {
  // <g, S(z)> is linear in z, so d/dz equals the scatter of g.
  Initializer init(5);
  const Tensor z = init.uniform({1, 4, 5, 2}, -1, 1);
  const Tensor grid = init.uniform({1, 3, 3, 2}, -1, 1);
  const Tensor g = init.uniform({1, 3, 3, 2}, -1, 1);
  const auto grads = bilinear_sample_backward(z, grid, g);
  const Tensor e = init.uniform(z.shape(), -1, 1);
  double lhs = 0.0, rhs = 0.0;
  const Tensor se = bilinear_sample(e, grid);
  for (std::size_t i = 0; i < g.size(); ++i) lhs += g[i] * se[i];
  for (std::size_t i = 0; i < e.size(); ++i) rhs += grads.input[i] * e[i];
  EXPECT_NEAR(lhs, rhs, 1e-13);
}
