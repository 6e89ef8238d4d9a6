#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dat/backbone.hpp"
#include "dat/checkpoint.hpp"

using namespace dat;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("dat_test_" + name)).string();
}

Tensor random_images(std::size_t b, std::size_t res, std::uint64_t seed) {
  Initializer init(seed);
  return init.uniform({b, res, res, 3}, -1, 1);
}

}  // namespace

TEST(Presets, AllValidate) {
  for (const auto& name : preset_names()) {
    auto cfg = find_preset(name);
    ASSERT_TRUE(cfg.has_value()) << name;
    EXPECT_NO_THROW(validate_config(*cfg)) << name;
  }
  EXPECT_FALSE(find_preset("dat-huge").has_value());
}

TEST(Presets, InvalidConfigsNameTheField) {
  ModelConfig cfg = preset_nano();
  cfg.stages[2].heads = 3;
  try {
    validate_config(cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 3"), std::string::npos) << e.what();
  }
  cfg = preset_nano();
  cfg.resolution = 48;
  EXPECT_THROW(validate_config(cfg), ConfigError);
}

TEST(Presets, TinyGridsAreSevenBySevenEverywhere) {
  const ModelConfig cfg = preset_tiny();
  const std::size_t sizes[] = {56, 28, 14, 7};
  for (std::size_t i = 0; i < kNumStages; ++i) {
    EXPECT_EQ(cfg.stage_size(i), sizes[i]);
    EXPECT_EQ(cfg.stage_size(i) / cfg.stages[i].stride, 7u);
  }
}

TEST(Model, BlockLayoutAndDropPathSchedule) {
  const Model m = build_model(preset_nano(), 0);
  const std::size_t counts[] = {2, 2, 4, 2};
  for (std::size_t i = 0; i < kNumStages; ++i) {
    ASSERT_EQ(m.stages[i].blocks.size(), counts[i]);
    for (std::size_t b = 0; b < counts[i]; ++b) {
      const bool local = i < 3 && b % 2 == 0;
      EXPECT_EQ(m.stages[i].blocks[b].kind, local ? BlockKind::local : BlockKind::deformable);
    }
  }
  ModelConfig cfg = preset_nano();
  cfg.drop_path_max = 0.3;
  const Model d = build_model(cfg, 0);
  EXPECT_EQ(d.stages[0].blocks[0].drop_path, 0.0);
  EXPECT_DOUBLE_EQ(d.stages[3].blocks[1].drop_path, 0.3);
}

TEST(Model, FeatureShapes) {
  const Model m = build_model(preset_nano(), 0);
  const auto f = forward_features(m, random_images(2, 64, 1));
  ASSERT_EQ(f.size(), 4u);
  EXPECT_EQ(f[0].shape(), (Shape{2, 16, 16, 16}));
  EXPECT_EQ(f[1].shape(), (Shape{2, 8, 8, 32}));
  EXPECT_EQ(f[2].shape(), (Shape{2, 4, 4, 64}));
  EXPECT_EQ(f[3].shape(), (Shape{2, 2, 2, 128}));
  EXPECT_EQ(forward_logits(m, random_images(2, 64, 1)).shape(), (Shape{2, 2}));
  EXPECT_THROW(forward_logits(m, random_images(1, 48, 1)), ConfigError);
}

TEST(Model, BatchEqualsPerExample) {
  Model m = build_model(preset_nano(), 2);
  Initializer init(3);
  for (auto& st : m.stages)
    for (auto& b : st.blocks)
      if (auto* d = b.dmha()) d->offset_net.proj_weight = init.trunc_normal(d->offset_net.proj_weight.shape(), 0.2);
  const Tensor images = random_images(3, 64, 4);
  const Tensor logits = forward_logits(m, images);
  const std::size_t per = 64 * 64 * 3;
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor one({1, 64, 64, 3}, std::vector<double>(images.data() + n * per, images.data() + (n + 1) * per));
    const Tensor l = forward_logits(m, one);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(l[k], logits[n * 2 + k], 1e-10);
  }
}

TEST(Model, SameSeedSameParameters) {
  const Model a = build_model(preset_nano(), 9), b = build_model(preset_nano(), 9), c = build_model(preset_nano(), 10);
  const auto pa = named_parameters(a), pb = named_parameters(b), pc = named_parameters(c);
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(*pa[i].tensor, *pb[i].tensor) << pa[i].name;
    any_diff |= !(*pa[i].tensor == *pc[i].tensor);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Model m = build_model(preset_nano(), 5);
  Initializer init(6);
  m.head_w = init.uniform(m.head_w.shape(), -1, 1);
  const std::string path = temp_path("roundtrip.datw");
  save_checkpoint(m, path);
  const Model r = load_checkpoint(path, preset_nano());
  const auto pm = named_parameters(m), pr = named_parameters(r);
  ASSERT_EQ(pm.size(), pr.size());
  for (std::size_t i = 0; i < pm.size(); ++i) {
    ASSERT_EQ(pm[i].name, pr[i].name);
    ASSERT_EQ(pm[i].tensor->shape(), pr[i].tensor->shape());
    EXPECT_EQ(std::memcmp(pm[i].tensor->data(), pr[i].tensor->data(), pm[i].tensor->size() * sizeof(double)), 0)
        << pm[i].name;
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, ManifestMismatchesAreRejected) {
  const Model m = build_model(preset_nano(), 0);
  const std::string path = temp_path("manifest.datw");
  save_checkpoint(m, path);
  ModelConfig three = preset_nano();
  three.num_classes = 3;
  EXPECT_THROW(load_checkpoint(path, three), ManifestError);
  EXPECT_THROW(load_checkpoint(path, preset_tiny()), ManifestError);

  auto entries = named_parameters(m);
  std::vector<std::pair<std::string, const Tensor*>> partial;
  for (std::size_t i = 1; i < entries.size(); ++i) partial.emplace_back(entries[i].name, entries[i].tensor);
  write_tensor_file(path, partial);
  try {
    load_checkpoint(path, preset_nano());
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find(entries[0].name), std::string::npos) << e.what();
  }
  partial.emplace_back(entries[0].name, entries[0].tensor);
  partial.emplace_back(entries[0].name, entries[0].tensor);
  write_tensor_file(path, partial);
  EXPECT_THROW(load_checkpoint(path, preset_nano()), ManifestError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  const Tensor t({2, 3}, 1.5);
  const std::string path = temp_path("format.datw");
  write_tensor_file(path, {{"input", &t}});
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 3);
  EXPECT_THROW(read_tensor_file(path), FormatError);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "NOPE and more";
  }
  EXPECT_THROW(read_tensor_file(path), FormatError);
  write_tensor_file(path, {{"input", &t}});
  {
    std::ofstream os(path, std::ios::binary | std::ios::app);
    os << 'x';
  }
  EXPECT_THROW(read_tensor_file(path), FormatError);
  EXPECT_THROW(read_tensor_file(temp_path("does_not_exist")), FormatError);
  std::filesystem::remove(path);
}
