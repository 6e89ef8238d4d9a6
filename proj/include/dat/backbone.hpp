#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dat/blocks.hpp"
#include "dat/params.hpp"
#include "dat/tensor.hpp"

namespace dat {

inline constexpr std::size_t kNumStages = 4;

struct StageConfig {
  std::size_t pairs = 1;          // N_i: (local, deformable) pairs; stage 4 stacks pairs of two deformable blocks
  std::size_t channels = 64;      // C_i
  std::size_t stride = 1;         // r_i, downsample factor of the deformed points
  std::size_t heads = 1;          // M_i
  std::size_t groups = 1;         // G_i
  std::size_t local_kernel = 0;   // K_i; 0 means the stage has no local blocks
  std::size_t offset_kernel = 1;  // k_i
};

struct ModelConfig {
  std::string name = "custom";
  std::array<StageConfig, kNumStages> stages{};
  std::size_t num_classes = 1000;
  std::size_t resolution = 224;  // nominal input size; sizes the DMHA bias tables
  std::size_t in_channels = 3;
  double mlp_ratio = 4.0;
  double drop_path_max = 0.0;

  std::size_t stage_size(std::size_t stage, std::size_t res) const { return res / (4u << stage); }
  std::size_t stage_size(std::size_t stage) const { return stage_size(stage, resolution); }
  std::size_t num_blocks() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += 2 * s.pairs;
    return n;
  }
};

// Checks every structural invariant; throws ConfigError naming the offending field.
inline void validate_config(const ModelConfig& cfg) {
  auto fail = [&](std::size_t i, const std::string& what) {
    throw ConfigError("config '" + cfg.name + "' stage " + std::to_string(i + 1) + ": " + what);
  };
  if (cfg.num_classes == 0) throw ConfigError("config '" + cfg.name + "': num_classes must be positive");
  if (cfg.resolution == 0 || cfg.resolution % 32 != 0) {
    throw ConfigError("config '" + cfg.name + "': resolution " + std::to_string(cfg.resolution) +
                      " not divisible by 32");
  }
  if (!(cfg.mlp_ratio > 0.0)) throw ConfigError("config '" + cfg.name + "': mlp_ratio must be positive");
  if (cfg.drop_path_max < 0.0 || cfg.drop_path_max >= 1.0) {
    throw ConfigError("config '" + cfg.name + "': drop_path_max must be in [0, 1)");
  }
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto& s = cfg.stages[i];
    if (s.pairs == 0) fail(i, "pairs must be positive");
    if (s.channels == 0 || s.heads == 0 || s.groups == 0 || s.stride == 0) fail(i, "channels/heads/groups/stride must be positive");
    if (i > 0 && s.channels != 2 * cfg.stages[i - 1].channels) fail(i, "channels must double from the previous stage");
    if (s.channels % s.heads != 0) fail(i, "channels not divisible by heads");
    if (s.heads % s.groups != 0) fail(i, "heads not divisible by groups");
    if (s.offset_kernel < s.stride) fail(i, "offset_kernel smaller than stride");
    const std::size_t size = cfg.stage_size(i);
    if (size % s.stride != 0) fail(i, "spatial size " + std::to_string(size) + " not divisible by stride");
    if (i + 1 < kNumStages && s.local_kernel == 0) fail(i, "local_kernel required in stages 1-3");
    if (s.local_kernel != 0 && s.local_kernel % 2 == 0) fail(i, "local_kernel must be odd");
    if (s.local_kernel > size) fail(i, "local_kernel exceeds spatial size " + std::to_string(size));
  }
}

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline ModelConfig make_preset(std::string name, std::array<std::size_t, 4> channels, std::array<std::size_t, 4> pairs,
                               std::array<std::size_t, 4> heads, std::array<std::size_t, 4> groups,
                               std::array<std::size_t, 4> strides, std::size_t local_kernel,
                               std::array<std::size_t, 4> offset_kernels) {
  ModelConfig cfg;
  cfg.name = std::move(name);
  for (std::size_t i = 0; i < kNumStages; ++i) {
    cfg.stages[i] = {pairs[i], channels[i], strides[i], heads[i], groups[i], i + 1 < kNumStages ? local_kernel : 0,
                     offset_kernels[i]};
  }
  return cfg;
}

}  // namespace detail

inline ModelConfig preset_tiny() {
  auto cfg = detail::make_preset("dat-tiny++", {64, 128, 256, 512}, {1, 2, 9, 1}, {2, 4, 8, 16}, {1, 2, 4, 8},
                                 {8, 4, 2, 1}, 7, {9, 7, 5, 3});
  cfg.drop_path_max = 0.2;
  return cfg;
}

inline ModelConfig preset_small() {
  auto cfg = detail::make_preset("dat-small++", {96, 192, 384, 768}, {1, 2, 9, 1}, {3, 6, 12, 24}, {1, 2, 3, 6},
                                 {8, 4, 2, 1}, 7, {9, 7, 5, 3});
  cfg.drop_path_max = 0.4;
  return cfg;
}

// Stage 3 uses r = 2 so the 14x14 map yields a 7x7 point grid like the other stages.
inline ModelConfig preset_base() {
  auto cfg = detail::make_preset("dat-base++", {128, 256, 512, 1024}, {1, 2, 9, 1}, {4, 8, 16, 32}, {2, 4, 8, 16},
                                 {8, 4, 2, 1}, 7, {9, 7, 5, 3});
  cfg.drop_path_max = 0.6;
  return cfg;
}

// Desk-scale model for functional tests and toy training: 64x64 inputs, two classes.
inline ModelConfig preset_nano() {
  auto cfg = detail::make_preset("dat-nano", {16, 32, 64, 128}, {1, 1, 2, 1}, {1, 2, 4, 8}, {1, 1, 2, 4},
                                 {8, 4, 2, 1}, 3, {9, 7, 5, 3});
  cfg.num_classes = 2;
  cfg.resolution = 64;
  return cfg;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"dat-tiny++", "dat-small++", "dat-base++", "dat-nano"};
  return names;
}

inline std::optional<ModelConfig> find_preset(std::string_view name) {
  if (name == "dat-tiny++") return preset_tiny();
  if (name == "dat-small++") return preset_small();
  if (name == "dat-base++") return preset_base();
  if (name == "dat-nano") return preset_nano();
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Model

struct Stage {
  std::vector<Block> blocks;
  Norm norm;  // applied to the stage's output feature

  template <class F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i) visit_child(blocks[i], "blocks." + std::to_string(i), f);
    visit_child(norm, "norm", f);
  }
};

struct Model {
  ModelConfig config;
  PatchEmbed stem;
  std::array<Stage, kNumStages> stages;
  std::array<Downsample, kNumStages - 1> downsamples;
  Tensor head_w;  // C4 x num_classes
  Tensor head_b;  // num_classes

  template <class F>
  void visit(F&& f) {
    visit_child(stem, "stem", f);
    for (std::size_t i = 0; i < kNumStages; ++i) {
      visit_child(stages[i], "stages." + std::to_string(i), f);
      if (i + 1 < kNumStages) visit_child(downsamples[i], "downsamples." + std::to_string(i), f);
    }
    visit_tensor(head_w, "head.weight", f);
    visit_tensor(head_b, "head.bias", f);
  }
};

// Stages 1-3 hold N_i (local, deformable) pairs; stage 4 holds 2 N_4 deformable blocks.
// Initialization: truncated normal (std 0.02) weights, zero biases, unit LN gains, zero
// offset projections and zero relative position bias tables.
inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  Initializer init(seed);
  Model m;
  m.config = cfg;
  m.stem = make_patch_embed(cfg.in_channels, cfg.stages[0].channels, init);
  const std::size_t total = cfg.num_blocks();
  std::size_t index = 0;
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto& s = cfg.stages[i];
    const std::size_t size = cfg.stage_size(i);
    for (std::size_t b = 0; b < 2 * s.pairs; ++b, ++index) {
      BlockConfig bc;
      bc.kind = (s.local_kernel != 0 && b % 2 == 0) ? BlockKind::local : BlockKind::deformable;
      bc.channels = s.channels;
      bc.heads = s.heads;
      bc.mlp_ratio = cfg.mlp_ratio;
      bc.drop_path = total > 1 ? cfg.drop_path_max * static_cast<double>(index) / static_cast<double>(total - 1) : 0.0;
      bc.local_kernel = s.local_kernel;
      bc.groups = s.groups;
      bc.stride = s.stride;
      bc.offset_kernel = s.offset_kernel;
      bc.nominal_h = size;
      bc.nominal_w = size;
      m.stages[i].blocks.push_back(make_block(bc, init));
    }
    m.stages[i].norm = make_norm(s.channels);
    if (i + 1 < kNumStages) m.downsamples[i] = make_downsample(s.channels, cfg.stages[i + 1].channels, init);
  }
  m.head_w = init.trunc_normal({cfg.stages[3].channels, cfg.num_classes});
  m.head_b = Initializer::zeros({cfg.num_classes});
  return m;
}

struct StageCache {
  std::vector<BlockCache> blocks;
  Tensor out;  // stage output before its norm
  LayerNormCache norm;
  ConvNormCache down;
};

struct ModelCache {
  Tensor image;
  PatchEmbedCache stem;
  std::array<StageCache, kNumStages> stages;
  std::vector<Tensor> features;  // LN-normalized stage outputs
  Tensor pooled;
};

inline void check_image(const Model& m, const Tensor& image) {
  if (image.rank() != 4 || image.dim(3) != m.config.in_channels) {
    throw DimensionError("image must be B x H x W x " + std::to_string(m.config.in_channels) + ", got " +
                         shape_str(image.shape()));
  }
  if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0) {
    throw ConfigError("image size " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                      " not divisible by 32");
  }
}

// Four LN-normalized stage features at strides 4, 8, 16 and 32.
inline std::vector<Tensor> forward_features(const Model& m, const Tensor& image, ModelCache* cache = nullptr,
                                            const RunMode& mode = {}) {
  check_image(m, image);
  ModelCache local;
  ModelCache& cc = cache ? *cache : local;
  cc.image = image;
  cc.features.clear();
  Tensor x = patch_embed(m.stem, image, &cc.stem);
  for (std::size_t i = 0; i < kNumStages; ++i) {
    auto& sc = cc.stages[i];
    sc.blocks.assign(m.stages[i].blocks.size(), {});
    for (std::size_t b = 0; b < m.stages[i].blocks.size(); ++b) x = block_forward(m.stages[i].blocks[b], x, &sc.blocks[b], mode);
    sc.out = x;
    cc.features.push_back(layer_norm(x, m.stages[i].norm.gamma, m.stages[i].norm.beta, kLayerNormEps, &sc.norm));
    if (i + 1 < kNumStages) x = downsample(m.downsamples[i], x, &sc.down);
  }
  return cc.features;
}

// LN(stage-4 feature) -> global average pool -> linear classifier. Returns B x num_classes.
inline Tensor forward_logits(const Model& m, const Tensor& image, ModelCache* cache = nullptr, const RunMode& mode = {}) {
  ModelCache local;
  ModelCache& cc = cache ? *cache : local;
  forward_features(m, image, &cc, mode);
  cc.pooled = global_avg_pool(cc.features.back());
  return linear(cc.pooled, m.head_w, m.head_b);
}

// Backpropagates d loss / d logits through the whole model, accumulating into `grads`.
// Returns d loss / d image.
inline Tensor model_backward(const Model& m, const ModelCache& cache, const Tensor& grad_logits, Model& grads) {
  if (cache.pooled.empty()) throw StateError("model_backward: no forward cache");
  auto head = linear_backward(cache.pooled, m.head_w, true, grad_logits);
  grads.head_w += head.weight;
  grads.head_b += head.bias;
  Tensor g = global_avg_pool_backward(cache.features.back().shape(), head.input);
  for (std::size_t i = kNumStages; i-- > 0;) {
    const auto& sc = cache.stages[i];
    if (i + 1 < kNumStages) {
      g = downsample_backward(m.downsamples[i], sc.down, g, grads.downsamples[i]);
    } else {
      auto ln = layer_norm_backward(sc.norm, m.stages[i].norm.gamma, g);
      grads.stages[i].norm.gamma += ln.gamma;
      grads.stages[i].norm.beta += ln.beta;
      g = std::move(ln.input);
    }
    for (std::size_t b = m.stages[i].blocks.size(); b-- > 0;) {
      g = block_backward(m.stages[i].blocks[b], sc.blocks[b], g, grads.stages[i].blocks[b]);
    }
  }
  return patch_embed_backward(m.stem, cache.stem, g, grads.stem);
}

// DMHA traces of a cached forward pass, in depth order.
inline std::vector<const DmhaTrace*> collect_traces(const Model& m, const ModelCache& cache) {
  std::vector<const DmhaTrace*> out;
  for (std::size_t i = 0; i < kNumStages; ++i)
    for (std::size_t b = 0; b < m.stages[i].blocks.size(); ++b)
      if (m.stages[i].blocks[b].dmha()) out.push_back(&cache.stages[i].blocks[b].dmha.trace);
  return out;
}

}  // namespace dat
