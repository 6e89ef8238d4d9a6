#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "dat/cost.hpp"
#include "dat/gradcheck_suite.hpp"
#include "dat/importance.hpp"
#include "dat/train.hpp"

using namespace dat;

TEST(Cost, DmhaWorkedExampleIsExact) {
  const DmhaFlops f = dmha_flops(14, 14, 384, 2, 5);
  EXPECT_EQ(f.attention, 79'629'312u);
  EXPECT_EQ(f.offsets, 583'296u);
  EXPECT_EQ(f.total, 80'212'608u);
  EXPECT_NEAR(static_cast<double>(f.offsets) / static_cast<double>(f.total), 0.007, 0.0005);
  EXPECT_THROW(dmha_flops(14, 14, 384, 3, 5), ConfigError);
}

TEST(Cost, DoublingTheDownsampleFactorQuartersSampledTerms) {
  const DmhaFlops a = dmha_flops(16, 16, 64, 2, 3), b = dmha_flops(16, 16, 64, 4, 3);
  const std::uint64_t hw = 256, c = 64;
  const std::uint64_t sampled_a = a.attention - 2 * hw * c * c, sampled_b = b.attention - 2 * hw * c * c;
  EXPECT_EQ(sampled_a, 4 * sampled_b);
  EXPECT_EQ(a.offsets, 4 * b.offsets);
}

TEST(Cost, PresetsMatchPublishedTotals) {
  const CostReport tiny = model_cost(build_model(preset_tiny(), 0), 224);
  EXPECT_NEAR(static_cast<double>(tiny.total_params), 24e6, 0.05 * 24e6);
  EXPECT_NEAR(static_cast<double>(tiny.total_flops), 4.3e9, 0.10 * 4.3e9);
  const Model small = build_model(preset_small(), 0);
  const CostReport rep = model_cost(small, 224);
  EXPECT_NEAR(static_cast<double>(rep.total_params), 53e6, 0.05 * 53e6);
  EXPECT_NEAR(static_cast<double>(rep.total_flops), 9.4e9, 0.10 * 9.4e9);
  EXPECT_EQ(rep.total_params, parameter_count(small));
}

TEST(Cost, ReportFormatAndSpatialScaling) {
  const Model m = build_model(preset_tiny(), 0);
  const CostReport a = model_cost(m, 224), b = model_cost(m, 448);
  std::istringstream is(a.to_text());
  std::string line, last;
  std::size_t lines = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 2) << line;
    last = line;
    ++lines;
  }
  EXPECT_EQ(lines, a.entries.size() + 1);
  EXPECT_EQ(last.rfind("total\t", 0), 0u);
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    const auto& name = a.entries[i].name;
    const bool spatial = name.find(".lpu") != std::string::npos || name.rfind("stem.", 0) == 0 ||
                         name.rfind("downsamples.", 0) == 0;
    if (spatial) EXPECT_EQ(b.entries[i].flops, 4 * a.entries[i].flops) << name;
    EXPECT_EQ(b.entries[i].params, a.entries[i].params) << name;
  }
  EXPECT_THROW(model_cost(m, 225), ConfigError);
}

namespace {

DmhaTrace make_trace(std::size_t h, std::size_t w, std::size_t heads, std::size_t gh, std::size_t gw) {
  DmhaTrace tr;
  tr.height = h;
  tr.width = w;
  tr.sample_grid = Tensor({1, 1, gh, gw, 2});
  const Tensor ref = reference_grid(gh, gw);
  std::copy_n(ref.data(), ref.size(), tr.sample_grid.data());
  tr.attention = Tensor({1, heads, h * w, gh * gw});
  return tr;
}

}  // namespace

TEST(Importance, UniformAttentionGivesUniformScores) {
  DmhaTrace tr = make_trace(4, 4, 2, 2, 2);
  tr.attention.fill(0.25);
  const ImportanceMap map = importance_map({&tr});
  ASSERT_EQ(map.layers.size(), 1u);
  for (double s : map.layers[0].scores.values()) EXPECT_NEAR(s, 0.25, 1e-15);
  EXPECT_THROW(importance_map({}), ArgumentError);
}

TEST(Importance, OneHotChainsComposeToOneHot) {
  // Deep layer: every query attends to key 3, sampled at input cell (1, 1).
  DmhaTrace deep = make_trace(2, 2, 1, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) deep.attention[i * 4 + 3] = 1.0;
  // Shallow layer: the query at (1, 1) attends to key 2, every other query to key 0.
  DmhaTrace shallow = make_trace(2, 2, 1, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) shallow.attention[i * 4 + (i == 3 ? 2 : 0)] = 1.0;
  const ImportanceMap map = importance_map({&shallow, &deep});
  const double want_deep[] = {0, 0, 0, 1}, want_shallow[] = {0, 0, 1, 0};
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(map.layers[1].scores[j], want_deep[j], 1e-15);
    EXPECT_NEAR(map.layers[0].scores[j], want_shallow[j], 1e-15);
  }
}

TEST(Importance, RealTracesAreNormalized) {
  Model m = build_model(preset_nano(), 1);
  Initializer init(2);
  for (auto& st : m.stages)
    for (auto& b : st.blocks)
      if (auto* d = b.dmha()) d->offset_net.proj_weight = init.trunc_normal(d->offset_net.proj_weight.shape(), 0.3);
  ModelCache cache;
  forward_logits(m, init.uniform({1, 64, 64, 3}, -1, 1), &cache);
  const auto traces = collect_traces(m, cache);
  ASSERT_EQ(traces.size(), 6u);
  const ImportanceMap map = importance_map(traces);
  for (const auto& li : map.layers) {
    double s = 0.0;
    for (double v : li.scores.values()) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const Tensor rows = query_attention(*traces[0], 3, 5);
  EXPECT_EQ(rows.shape(), (Shape{traces[0]->attention.dim(1), traces[0]->attention.dim(3)}));
  EXPECT_THROW(query_attention(*traces[0], 16, 0), ArgumentError);
  std::ostringstream os;
  write_importance(map.layers[0], os);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(map.layers[0].scores.size()));
}

TEST(GradCheck, QuadraticIsExactAndSignFlipIsCaught) {
  Initializer init(3);
  Tensor theta = init.uniform({100}, -2, 2);
  Tensor grad = theta, flipped = theta * -1.0;
  auto loss = [&] {
    double s = 0.0;
    for (double v : theta.values()) s += 0.5 * v * v;
    return s;
  };
  // Central differences are exact for quadratics, so a wide step leaves only roundoff.
  GradCheckOptions wide;
  wide.step = 1e-2;
  const auto good = grad_check(loss, {{"theta", {&theta}, {&grad}}}, wide);
  EXPECT_TRUE(good.passed());
  EXPECT_LT(good.blocks[0].max_rel_error, 1e-10);
  EXPECT_EQ(good.blocks[0].checked, 64u);
  const auto bad = grad_check(loss, {{"theta", {&theta}, {&flipped}}}, {});
  EXPECT_FALSE(bad.passed());
  EXPECT_NEAR(bad.blocks[0].max_rel_error, 2.0, 1e-6);
  EXPECT_EQ(theta, grad);  // values restored
}

TEST(GradCheck, NonFiniteLossIsANumericError) {
  Tensor t({1}, 0.0), g({1}, 0.0);
  EXPECT_THROW(grad_check([] { return NAN; }, {{"t", {&t}, {&g}}}, {}), NumericError);
}

class GradSuite : public ::testing::TestWithParam<std::string> {};

TEST_P(GradSuite, AnalyticMatchesFiniteDifferences) {
  const auto results = run_gradcheck_suite({}, {GetParam()});
  ASSERT_EQ(results.size(), 1u);
  for (const auto& b : results[0].report.blocks) {
    EXPECT_TRUE(b.passed) << b.name << " error " << b.error() << " tolerance " << b.tolerance;
  }
}

INSTANTIATE_TEST_SUITE_P(AllChecks, GradSuite, ::testing::ValuesIn([] {
                           std::vector<std::string> names;
                           for (const auto& c : gradcheck_suite()) names.push_back(c.name);
                           return names;
                         }()));

TEST(GradSuite, CorruptionIsDetected) {
  SuiteOptions o;
  o.corrupt = "dmha";
  const auto results = run_gradcheck_suite(o, {"dmha"});
  ASSERT_EQ(results.size(), 1u);
  EXPECT_FALSE(results[0].report.passed());
  EXPECT_NEAR(results[0].report.worst()->max_rel_error, 2.0, 1e-3);
}

namespace {

Model toy_model() {
  Model m = build_model(preset_nano(), 7);
  m.head_w.fill(0.0);
  m.head_b.fill(0.0);
  return m;
}

}  // namespace

TEST(Trainer, StepZeroLossIsLogTwo) {
  Model m = toy_model();
  const Batch data = make_texture_dataset(4, 64, 1);
  TrainOptions opt;
  opt.steps = 1;
  const auto hist = train_steps(m, [&](std::size_t) -> const Batch& { return data; }, opt);
  EXPECT_NEAR(hist[0].loss, std::log(2.0), 1e-12);
}

TEST(Trainer, ZeroLearningRateChangesNothing) {
  Model m = toy_model();
  m.head_w = Initializer(2).uniform(m.head_w.shape(), -0.5, 0.5);
  const Model before = m;
  const Batch data = make_texture_dataset(4, 64, 1);
  TrainOptions opt;
  opt.steps = 3;
  opt.lr = 0.0;
  const auto hist = train_steps(m, [&](std::size_t) -> const Batch& { return data; }, opt);
  EXPECT_EQ(hist[0].loss, hist[1].loss);
  EXPECT_EQ(hist[1].loss, hist[2].loss);
  const auto pa = named_parameters(before), pb = named_parameters(m);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i].tensor, *pb[i].tensor) << pa[i].name;
}

TEST(Trainer, SameSeedSameTrajectory) {
  const Batch data = make_texture_dataset(4, 64, 1);
  TrainOptions opt;
  opt.steps = 3;
  auto run = [&] {
    Model m = toy_model();
    return train_steps(m, [&](std::size_t) -> const Batch& { return data; }, opt);
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].loss, b[i].loss);
    EXPECT_EQ(a[i].accuracy, b[i].accuracy);
  }
  EXPECT_NE(a[0].loss, a[2].loss);
}

TEST(Trainer, LabelsOutOfRangeAreDataErrors) {
  Model m = toy_model();
  Batch data = make_texture_dataset(2, 64, 1);
  data.labels[1] = 2;
  TrainOptions opt;
  opt.steps = 1;
  EXPECT_THROW(train_steps(m, [&](std::size_t) -> const Batch& { return data; }, opt), DataError);
}

TEST(Trainer, DatasetIsBalancedAndStandardized) {
  const Batch data = make_texture_dataset(6, 32, 3);
  EXPECT_EQ(std::count(data.labels.begin(), data.labels.end(), 0u), 3);
  const std::size_t per = 32 * 32;
  for (std::size_t i = 0; i < 6; ++i) {
    double mean = 0.0;
    for (std::size_t p = 0; p < per; ++p) mean += data.images[(i * per + p) * 3];
    EXPECT_NEAR(mean / per, 0.0, 1e-12);
  }
  EXPECT_EQ(make_texture_dataset(6, 32, 3).images, data.images);
}
