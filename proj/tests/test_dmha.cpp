#include <gtest/gtest.h>

#include <string>

#include "dat/dmha.hpp"
#include "oracles.hpp"

using namespace dat;

namespace {

DmhaLayer random_layer(DmhaOptions o, std::uint64_t seed, double offset_std = 0.0, double rpb_std = 0.0) {
  Initializer init(seed);
  DmhaLayer l = make_dmha_layer(o, init);
  l.proj.visit([&](const std::string&, Tensor& t) { t = init.trunc_normal(t.shape(), 0.3); });
  if (offset_std > 0.0) l.offset_net.proj_weight = init.trunc_normal(l.offset_net.proj_weight.shape(), offset_std);
  if (rpb_std > 0.0 && l.has_rpb()) l.rpb_table = init.trunc_normal(l.rpb_table.shape(), rpb_std);
  return l;
}

Tensor random_input(Shape s, std::uint64_t seed) {
  Initializer init(seed);
  return init.uniform(std::move(s), -1, 1);
}

}  // namespace

TEST(OffsetNetwork, ShapesAndZeroInitialOffsets) {
  Initializer init(1);
  const OffsetNetwork net = make_offset_network(4, 5, 2, init);
  const Tensor q = random_input({2, 8, 6, 12}, 2);
  const Tensor off = generate_offsets(net, q, 3);
  ASSERT_EQ(off.shape(), (Shape{2, 3, 4, 3, 2}));
  for (double v : off.values()) EXPECT_EQ(v, 0.0);
}

TEST(OffsetNetwork, GroupsShareWeights) {
  Initializer init(3);
  OffsetNetwork net = make_offset_network(2, 3, 1, init);
  net.proj_weight = init.trunc_normal(net.proj_weight.shape(), 0.5);
  Tensor q = random_input({1, 4, 4, 2}, 4);
  // Two groups with identical channel slices must produce identical offsets.
  Tensor q2({1, 4, 4, 4});
  for (std::size_t p = 0; p < 16; ++p)
    for (std::size_t c = 0; c < 2; ++c) q2[p * 4 + c] = q2[p * 4 + 2 + c] = q[p * 2 + c];
  const Tensor off = generate_offsets(net, q2, 2);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(off[i], off[32 + i]);
}

TEST(OffsetNetwork, RejectsIndivisibleShapes) {
  Initializer init(5);
  const OffsetNetwork net = make_offset_network(4, 3, 2, init);
  EXPECT_THROW(generate_offsets(net, random_input({1, 5, 4, 8}, 6), 2), ConfigError);
  EXPECT_THROW(generate_offsets(net, random_input({1, 4, 4, 8}, 6), 3), ConfigError);
}

TEST(Dmha, DenseZeroOffsetLayerIsVanillaAttention) {
  const DmhaLayer l = random_layer({8, 2, 1, 1, 3, 0, 0}, 7);
  ASSERT_FALSE(l.has_rpb());
  const Tensor x = random_input({2, 4, 4, 8}, 8);
  const Tensor y = dmha_forward(l, x, nullptr);
  const Tensor ref = oracle::mhsa(x, l.proj.wq, l.proj.bq, l.proj.wk, l.proj.wv, l.proj.bv, l.proj.wo, l.proj.bo, 2);
  EXPECT_LT(max_abs_diff(y, ref), 1e-10);
  EXPECT_LT(max_abs_diff(y, mhsa_forward(l.proj, x, 2)), 1e-10);
}

TEST(Dmha, ConstantInputGivesConstantOutput) {
  const Tensor x({2, 8, 8, 16}, 0.7);
  auto check_constant = [&](const DmhaLayer& l) {
    const Tensor y = dmha_forward(l, x, nullptr);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t p = 0; p < 64; ++p)
        for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(y[(n * 64 + p) * 16 + c], y[n * 64 * 16 + c], 1e-10);
  };
  check_constant(random_layer({16, 4, 2, 2, 3, 8, 8}, 9, 0.0, 0.5));  // bias varies by query, keys all equal
  check_constant(random_layer({16, 4, 2, 2, 3, 0, 0}, 10, 0.3));      // keys differ, queries all equal
}

TEST(Dmha, BatchEqualsPerExample) {
  const DmhaLayer l = random_layer({16, 4, 2, 2, 3, 8, 8}, 11, 0.2, 0.5);
  const Tensor x = random_input({3, 8, 8, 16}, 12);
  const Tensor y = dmha_forward(l, x, nullptr);
  const std::size_t per = 8 * 8 * 16;
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor xn({1, 8, 8, 16}, std::vector<double>(x.data() + n * per, x.data() + (n + 1) * per));
    const Tensor yn = dmha_forward(l, xn, nullptr);
    for (std::size_t i = 0; i < per; ++i) EXPECT_NEAR(yn[i], y[n * per + i], 1e-10);
  }
}

TEST(Dmha, TraceShapesAndReferencePoints) {
  const DmhaLayer l = random_layer({16, 4, 2, 4, 5, 8, 8}, 13);
  const auto r = dmha_forward(l, random_input({2, 8, 8, 16}, 14), true);
  ASSERT_TRUE(r.trace.has_value());
  EXPECT_EQ(r.trace->sample_grid.shape(), (Shape{2, 2, 2, 2, 2}));
  EXPECT_EQ(r.trace->attention.shape(), (Shape{2, 4, 64, 4}));
  EXPECT_EQ(r.trace->sampled_features.shape(), (Shape{2, 2, 2, 16}));
  const Tensor ref = reference_grid(2, 2);
  for (std::size_t ng = 0; ng < 4; ++ng)
    for (std::size_t p = 0; p < 8; ++p) EXPECT_EQ(r.trace->sample_grid[ng * 8 + p], ref[p]);
  for (std::size_t row = 0; row < 2 * 4 * 64; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += r.trace->attention[row * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Dmha, SamplingPointsStayInsideTheMap) {
  const DmhaLayer l = random_layer({8, 2, 2, 2, 3, 0, 0}, 15, 5.0);
  const auto r = dmha_forward(l, random_input({1, 8, 8, 8}, 16), true);
  bool clamped = false;
  for (double v : r.trace->sample_grid.values()) {
    EXPECT_LE(std::abs(v), 1.0);
    clamped |= std::abs(v) == 1.0;
  }
  EXPECT_TRUE(clamped);
}

TEST(Dmha, BiasAtZeroDisplacementIsTheTableCenter) {
  Initializer init(17);
  const Tensor table = init.uniform({2, 7, 9}, -1, 1);
  const Tensor qg = reference_grid(4, 5);
  Tensor keys({1, 1, 1, 2});
  keys[0] = qg.at({2, 3, 0});
  keys[1] = qg.at({2, 3, 1});
  const Tensor b = deform_rpb(table, qg, keys, 1);
  EXPECT_NEAR(b[2 * 5 + 3], table.at({1, 3, 4}), 1e-15);
}

TEST(Dmha, HeadsMapToGroupsInContiguousBlocks) {
  DmhaLayer l = random_layer({8, 2, 2, 1, 3, 0, 0}, 18, 0.5);
  EXPECT_EQ(l.group_of_head(0), 0u);
  EXPECT_EQ(l.group_of_head(1), 1u);
  DmhaLayer four = random_layer({16, 4, 2, 1, 3, 0, 0}, 19);
  EXPECT_EQ(four.group_of_head(1), 0u);
  EXPECT_EQ(four.group_of_head(2), 1u);
}

TEST(Dmha, ConfigurationErrors) {
  Initializer init(20);
  EXPECT_THROW(make_dmha_layer({8, 3, 1, 1, 3, 0, 0}, init), ConfigError);
  EXPECT_THROW(make_dmha_layer({8, 2, 4, 1, 3, 0, 0}, init), ConfigError);
  const DmhaLayer l = random_layer({8, 2, 1, 2, 3, 0, 0}, 21);
  EXPECT_THROW(dmha_forward(l, random_input({1, 5, 4, 8}, 22), nullptr), ConfigError);
  EXPECT_THROW(dmha_forward(l, random_input({1, 4, 4, 6}, 22), nullptr), DimensionError);
}

TEST(Dmha, BackwardWithoutForwardIsAStateError) {
  const DmhaLayer l = random_layer({8, 2, 1, 1, 3, 0, 0}, 23);
  DmhaLayer g = zeros_like(l);
  EXPECT_THROW(dmha_backward(l, DmhaCache{}, Tensor({1, 4, 4, 8}), g), StateError);
}

TEST(Dmha, NonFiniteInputNamesTheStep) {
  const DmhaLayer l = random_layer({8, 2, 1, 1, 3, 0, 0}, 24);
  Tensor x = random_input({1, 4, 4, 8}, 25);
  x[5] = NAN;
  try {
    dmha_forward(l, x, nullptr);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("query projection"), std::string::npos) << e.what();
  }
}

TEST(Dmha, BorderSamplesOfAConstantMapLoseMassToZeroPadding) {
  const DmhaLayer l = random_layer({8, 2, 2, 2, 3, 0, 0}, 26, 5.0);
  const auto r = dmha_forward(l, Tensor({1, 8, 8, 8}, 0.7), true);
  const Tensor& grid = r.trace->sample_grid;
  const Tensor& feats = r.trace->sampled_features;
  bool saw_border = false;
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t p = 0; p < 16; ++p) {
      const double x = grid[(g * 16 + p) * 2], y = grid[(g * 16 + p) * 2 + 1];
      const bool inside = std::abs(x) <= 1.0 - 1.0 / 8.0 && std::abs(y) <= 1.0 - 1.0 / 8.0;
      const double value = feats[p * 8 + g * 4];
      if (inside) {
        EXPECT_NEAR(value, 0.7, 1e-15);
      } else {
        EXPECT_LT(value, 0.7);
        saw_border = true;
      }
    }
  EXPECT_TRUE(saw_border);
}
