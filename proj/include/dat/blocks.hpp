#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "dat/attention.hpp"
#include "dat/dmha.hpp"
#include "dat/params.hpp"
#include "dat/tensor.hpp"

namespace dat {

// ---------------------------------------------------------------------------
// Neighborhood attention: each query attends to the K x K window centred on it, translated
// (not shrunk) so it stays inside the map. Bias comes from a (2K-1) x (2K-1) table per head,
// indexed by the integer displacement key - query.

struct NeighborhoodAttnLayer {
  AttnProjections proj;
  Tensor rpb_table;  // M x (2K-1) x (2K-1)
  std::size_t heads = 1;
  std::size_t kernel = 7;

  std::size_t channels() const { return proj.channels(); }

  template <class F>
  void visit(F&& f) {
    visit_child(proj, "proj", f);
    visit_tensor(rpb_table, "rpb_table", f);
  }
};

inline NeighborhoodAttnLayer make_neighborhood_attn(std::size_t channels, std::size_t heads, std::size_t kernel,
                                                    Initializer& init) {
  if (kernel % 2 == 0) throw ConfigError("neighborhood attention: kernel " + std::to_string(kernel) + " must be odd");
  check_heads(channels, heads, "neighborhood attention");
  NeighborhoodAttnLayer l;
  l.heads = heads;
  l.kernel = kernel;
  l.proj = make_attn_projections(channels, init);
  l.rpb_table = Initializer::zeros({heads, 2 * kernel - 1, 2 * kernel - 1});
  return l;
}

// First row/column of the window for position `i` on an axis of length n.
inline std::size_t neighborhood_start(std::size_t i, std::size_t n, std::size_t kernel) {
  const long s = static_cast<long>(i) - static_cast<long>(kernel / 2);
  return static_cast<std::size_t>(std::clamp(s, 0L, static_cast<long>(n - kernel)));
}

struct NatCache {
  Tensor x, q, k, v;  // B x H x W x C
  Tensor attn;        // B x M x HW x K^2
  Tensor heads_out;   // B x HW x C
};

inline Tensor neighborhood_attn_forward(const NeighborhoodAttnLayer& layer, const Tensor& x, NatCache* cache = nullptr) {
  if (x.rank() != 4 || x.dim(3) != layer.channels()) {
    throw DimensionError("neighborhood attention: input " + shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3), kk = layer.kernel;
  if (kk > std::min(h, w)) {
    throw ConfigError("neighborhood attention: kernel " + std::to_string(kk) + " exceeds feature map " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  check_heads(c, layer.heads, "neighborhood attention");
  const std::size_t m_heads = layer.heads, d = c / m_heads, nk = kk * kk, tw = 2 * kk - 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  NatCache local;
  NatCache& cc = cache ? *cache : local;
  cc.x = x;
  cc.q = linear(x, layer.proj.wq, layer.proj.bq);
  cc.k = linear(x, layer.proj.wk, Tensor());
  cc.v = linear(x, layer.proj.wv, layer.proj.bv);
  cc.attn = Tensor({b, m_heads, h * w, nk});
  cc.heads_out = Tensor({b, h * w, c});
  std::vector<double> row(nk);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xq = 0; xq < w; ++xq) {
        const std::size_t sy = neighborhood_start(y, h, kk), sx = neighborhood_start(xq, w, kk);
        const std::size_t i = y * w + xq;
        for (std::size_t m = 0; m < m_heads; ++m) {
          const double* qi = cc.q.data() + (n * h * w + i) * c + m * d;
          const double* table = layer.rpb_table.data() + m * tw * tw;
          double mx = -INFINITY;
          for (std::size_t a = 0; a < kk; ++a)
            for (std::size_t e = 0; e < kk; ++e) {
              const std::size_t ky = sy + a, kx = sx + e;
              const double* kj = cc.k.data() + ((n * h + ky) * w + kx) * c + m * d;
              double s = 0.0;
              for (std::size_t t = 0; t < d; ++t) s += qi[t] * kj[t];
              s = s * scale + table[(ky + kk - 1 - y) * tw + (kx + kk - 1 - xq)];
              row[a * kk + e] = s;
              mx = std::max(mx, s);
            }
          double sum = 0.0;
          for (auto& s : row) sum += (s = std::exp(s - mx));
          double* at = cc.attn.data() + ((n * m_heads + m) * h * w + i) * nk;
          double* o = cc.heads_out.data() + (n * h * w + i) * c + m * d;
          for (std::size_t a = 0; a < kk; ++a)
            for (std::size_t e = 0; e < kk; ++e) {
              const double p = row[a * kk + e] / sum;
              at[a * kk + e] = p;
              const double* vj = cc.v.data() + ((n * h + sy + a) * w + sx + e) * c + m * d;
              for (std::size_t t = 0; t < d; ++t) o[t] += p * vj[t];
            }
        }
      }
  ensure_finite(cc.heads_out, "neighborhood attention");
  return linear(cc.heads_out, layer.proj.wo, layer.proj.bo).reshaped(x.shape());
}

inline Tensor neighborhood_attn_backward(const NeighborhoodAttnLayer& layer, const NatCache& cache,
                                         const Tensor& grad_out, NeighborhoodAttnLayer& grads) {
  if (cache.x.empty()) throw StateError("neighborhood_attn_backward: no forward cache");
  const Tensor& x = cache.x;
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3), kk = layer.kernel;
  const std::size_t m_heads = layer.heads, d = c / m_heads, nk = kk * kk, tw = 2 * kk - 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  auto out_g = linear_backward(cache.heads_out, layer.proj.wo, true, grad_out.reshaped({b, h * w, c}));
  grads.proj.wo += out_g.weight;
  grads.proj.bo += out_g.bias;
  const Tensor& g_heads = out_g.input;

  Tensor gq(x.shape()), gk(x.shape()), gv(x.shape());
  std::vector<double> ga(nk);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xq = 0; xq < w; ++xq) {
        const std::size_t sy = neighborhood_start(y, h, kk), sx = neighborhood_start(xq, w, kk);
        const std::size_t i = y * w + xq;
        for (std::size_t m = 0; m < m_heads; ++m) {
          const double* at = cache.attn.data() + ((n * m_heads + m) * h * w + i) * nk;
          const double* go = g_heads.data() + (n * h * w + i) * c + m * d;
          double dot = 0.0;
          for (std::size_t a = 0; a < kk; ++a)
            for (std::size_t e = 0; e < kk; ++e) {
              const std::size_t off = ((n * h + sy + a) * w + sx + e) * c + m * d;
              const double* vj = cache.v.data() + off;
              double* gvj = gv.data() + off;
              const double p = at[a * kk + e];
              double s = 0.0;
              for (std::size_t t = 0; t < d; ++t) {
                s += go[t] * vj[t];
                gvj[t] += p * go[t];
              }
              ga[a * kk + e] = s;
              dot += s * p;
            }
          const double* qi = cache.q.data() + (n * h * w + i) * c + m * d;
          double* gqi = gq.data() + (n * h * w + i) * c + m * d;
          double* gtable = grads.rpb_table.data() + m * tw * tw;
          for (std::size_t a = 0; a < kk; ++a)
            for (std::size_t e = 0; e < kk; ++e) {
              const std::size_t ky = sy + a, kx = sx + e;
              const double gs = at[a * kk + e] * (ga[a * kk + e] - dot);
              gtable[(ky + kk - 1 - y) * tw + (kx + kk - 1 - xq)] += gs;
              const std::size_t off = ((n * h + ky) * w + kx) * c + m * d;
              const double* kj = cache.k.data() + off;
              double* gkj = gk.data() + off;
              for (std::size_t t = 0; t < d; ++t) {
                gqi[t] += gs * scale * kj[t];
                gkj[t] += gs * scale * qi[t];
              }
            }
        }
      }

  Tensor gx(x.shape());
  auto acc = [&](const Tensor& wgt, Tensor& gw, Tensor* gb, const Tensor& g) {
    auto lg = linear_backward(x, wgt, gb != nullptr, g);
    gw += lg.weight;
    if (gb) *gb += lg.bias;
    gx += lg.input;
  };
  acc(layer.proj.wq, grads.proj.wq, &grads.proj.bq, gq);
  acc(layer.proj.wk, grads.proj.wk, nullptr, gk);
  acc(layer.proj.wv, grads.proj.wv, &grads.proj.bv, gv);
  return gx;
}

// ---------------------------------------------------------------------------
// Local perception unit: x + DWConv3x3(x).

struct Lpu {
  Tensor dw_weight;  // 3 x 3 x 1 x C
  Tensor dw_bias;    // C

  template <class F>
  void visit(F&& f) {
    visit_tensor(dw_weight, "dw_weight", f);
    visit_tensor(dw_bias, "dw_bias", f);
  }

  std::size_t channels() const { return dw_bias.dim(0); }
  Conv2dParams conv() const { return {1, 1, channels()}; }
};

inline Lpu make_lpu(std::size_t channels, Initializer& init) {
  return {init.trunc_normal({3, 3, 1, channels}), Initializer::zeros({channels})};
}

inline Tensor lpu_forward(const Lpu& lpu, const Tensor& x) { return x + conv2d(x, lpu.dw_weight, lpu.dw_bias, lpu.conv()); }

inline Tensor lpu_backward(const Lpu& lpu, const Tensor& x, const Tensor& grad_out, Lpu& grads) {
  auto g = conv2d_backward(x, lpu.dw_weight, true, lpu.conv(), grad_out);
  grads.dw_weight += g.weight;
  grads.dw_bias += g.bias;
  return grad_out + g.input;
}

// ---------------------------------------------------------------------------
// ConvFFN: fc1 -> (h + DWConv3x3(h)) -> GELU -> fc2.

struct ConvFfn {
  Tensor fc1_w, fc1_b;  // C x hidden, hidden
  Tensor dw_weight, dw_bias;  // 3 x 3 x 1 x hidden, hidden
  Tensor fc2_w, fc2_b;  // hidden x C, C

  template <class F>
  void visit(F&& f) {
    visit_tensor(fc1_w, "fc1_w", f);
    visit_tensor(fc1_b, "fc1_b", f);
    visit_tensor(dw_weight, "dw_weight", f);
    visit_tensor(dw_bias, "dw_bias", f);
    visit_tensor(fc2_w, "fc2_w", f);
    visit_tensor(fc2_b, "fc2_b", f);
  }

  std::size_t hidden() const { return fc1_b.dim(0); }
  Conv2dParams conv() const { return {1, 1, hidden()}; }
};

inline ConvFfn make_convffn(std::size_t channels, double mlp_ratio, Initializer& init) {
  if (!(mlp_ratio > 0.0)) throw ConfigError("convffn: mlp_ratio must be positive");
  const auto hidden = static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(channels)));
  if (hidden == 0) throw ConfigError("convffn: hidden width rounds to zero");
  ConvFfn f;
  f.fc1_w = init.trunc_normal({channels, hidden});
  f.fc1_b = Initializer::zeros({hidden});
  f.dw_weight = init.trunc_normal({3, 3, 1, hidden});
  f.dw_bias = Initializer::zeros({hidden});
  f.fc2_w = init.trunc_normal({hidden, channels});
  f.fc2_b = Initializer::zeros({channels});
  return f;
}

struct FfnCache {
  Tensor x, h1, h2, act;
};

inline Tensor convffn_forward(const ConvFfn& f, const Tensor& x, FfnCache* cache = nullptr) {
  FfnCache local;
  FfnCache& cc = cache ? *cache : local;
  cc.x = x;
  cc.h1 = linear(x, f.fc1_w, f.fc1_b);
  cc.h2 = cc.h1 + conv2d(cc.h1, f.dw_weight, f.dw_bias, f.conv());
  cc.act = gelu(cc.h2);
  return linear(cc.act, f.fc2_w, f.fc2_b);
}

inline Tensor convffn_backward(const ConvFfn& f, const FfnCache& cache, const Tensor& grad_out, ConvFfn& grads) {
  if (cache.x.empty()) throw StateError("convffn_backward: no forward cache");
  auto g2 = linear_backward(cache.act, f.fc2_w, true, grad_out);
  grads.fc2_w += g2.weight;
  grads.fc2_b += g2.bias;
  const Tensor g_h2 = gelu_backward(cache.h2, g2.input);
  auto gdw = conv2d_backward(cache.h1, f.dw_weight, true, f.conv(), g_h2);
  grads.dw_weight += gdw.weight;
  grads.dw_bias += gdw.bias;
  const Tensor g_h1 = g_h2 + gdw.input;
  auto g1 = linear_backward(cache.x, f.fc1_w, true, g_h1);
  grads.fc1_w += g1.weight;
  grads.fc1_b += g1.bias;
  return std::move(g1.input);
}

// ---------------------------------------------------------------------------
// Per-position LayerNorm parameters.

struct Norm {
  Tensor gamma, beta;

  template <class F>
  void visit(F&& f) {
    visit_tensor(gamma, "gamma", f);
    visit_tensor(beta, "beta", f);
  }
};

inline Norm make_norm(std::size_t channels) { return {Initializer::ones({channels}), Initializer::zeros({channels})}; }

// ---------------------------------------------------------------------------
// Conv -> LN (-> GELU) unit used by the stem and the downsampling layers.
// 3x3 kernel, stride 2, padding 1.

struct ConvNormUnit {
  Tensor weight, bias;  // 3 x 3 x Cin x Cout, Cout
  Norm norm;

  template <class F>
  void visit(F&& f) {
    visit_tensor(weight, "conv_w", f);
    visit_tensor(bias, "conv_b", f);
    visit_child(norm, "norm", f);
  }
};

inline ConvNormUnit make_conv_norm(std::size_t cin, std::size_t cout, Initializer& init) {
  return {init.trunc_normal({3, 3, cin, cout}), Initializer::zeros({cout}), make_norm(cout)};
}

inline constexpr Conv2dParams kStride2Conv{2, 1, 1};

struct ConvNormCache {
  Tensor x, conv_out, ln_out;
  LayerNormCache ln;
};

inline Tensor conv_norm_forward(const ConvNormUnit& u, const Tensor& x, bool activate, ConvNormCache* cache) {
  ConvNormCache local;
  ConvNormCache& cc = cache ? *cache : local;
  cc.x = x;
  cc.conv_out = conv2d(x, u.weight, u.bias, kStride2Conv);
  cc.ln_out = layer_norm(cc.conv_out, u.norm.gamma, u.norm.beta, kLayerNormEps, &cc.ln);
  return activate ? gelu(cc.ln_out) : cc.ln_out;
}

inline Tensor conv_norm_backward(const ConvNormUnit& u, const ConvNormCache& cache, bool activate, const Tensor& grad_out,
                                 ConvNormUnit& grads) {
  const Tensor g_ln = activate ? gelu_backward(cache.ln_out, grad_out) : grad_out;
  auto ln = layer_norm_backward(cache.ln, u.norm.gamma, g_ln);
  grads.norm.gamma += ln.gamma;
  grads.norm.beta += ln.beta;
  auto cg = conv2d_backward(cache.x, u.weight, true, kStride2Conv, ln.input);
  grads.weight += cg.weight;
  grads.bias += cg.bias;
  return std::move(cg.input);
}

// Overlapped patch embedding: two stride-2 conv-LN-GELU units, image B x H x W x 3 -> B x H/4 x W/4 x C.
struct PatchEmbed {
  ConvNormUnit conv1, conv2;

  template <class F>
  void visit(F&& f) {
    visit_child(conv1, "conv1", f);
    visit_child(conv2, "conv2", f);
  }
};

inline PatchEmbed make_patch_embed(std::size_t in_channels, std::size_t channels, Initializer& init) {
  const std::size_t mid = std::max<std::size_t>(1, channels / 2);
  auto c1 = make_conv_norm(in_channels, mid, init);
  auto c2 = make_conv_norm(mid, channels, init);
  return {std::move(c1), std::move(c2)};
}

struct PatchEmbedCache {
  ConvNormCache c1, c2;
};

inline Tensor patch_embed(const PatchEmbed& stem, const Tensor& image, PatchEmbedCache* cache = nullptr) {
  if (image.rank() != 4) throw DimensionError("patch_embed: image must be B x H x W x C, got " + shape_str(image.shape()));
  if (image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0) {
    throw ConfigError("patch_embed: image size " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                      " not divisible by 4");
  }
  PatchEmbedCache local;
  PatchEmbedCache& cc = cache ? *cache : local;
  const Tensor h = conv_norm_forward(stem.conv1, image, true, &cc.c1);
  return conv_norm_forward(stem.conv2, h, true, &cc.c2);
}

inline Tensor patch_embed_backward(const PatchEmbed& stem, const PatchEmbedCache& cache, const Tensor& grad_out,
                                   PatchEmbed& grads) {
  const Tensor g = conv_norm_backward(stem.conv2, cache.c2, true, grad_out, grads.conv2);
  return conv_norm_backward(stem.conv1, cache.c1, true, g, grads.conv1);
}

// Downsampling between stages: stride-2 conv doubling channels, then LN.
struct Downsample {
  ConvNormUnit unit;

  template <class F>
  void visit(F&& f) {
    visit_child(unit, "", f);
  }
};

inline Downsample make_downsample(std::size_t cin, std::size_t cout, Initializer& init) {
  return {make_conv_norm(cin, cout, init)};
}

inline Tensor downsample(const Downsample& ds, const Tensor& x, ConvNormCache* cache = nullptr) {
  if (x.rank() != 4) throw DimensionError("downsample: input must be B x H x W x C, got " + shape_str(x.shape()));
  if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
    throw ConfigError("downsample: odd spatial size " + std::to_string(x.dim(1)) + "x" + std::to_string(x.dim(2)));
  }
  return conv_norm_forward(ds.unit, x, false, cache);
}

inline Tensor downsample_backward(const Downsample& ds, const ConvNormCache& cache, const Tensor& grad_out,
                                  Downsample& grads) {
  return conv_norm_backward(ds.unit, cache, false, grad_out, grads.unit);
}

// ---------------------------------------------------------------------------
// Transformer block:
//   z'  = LPU(x)
//   z'' = Attn(LN(z')) + z'
//   out = ConvFFN(LN(z'')) + z''
// with Attn either neighborhood attention or DMHA.

enum class BlockKind { local, deformable };

struct BlockConfig {
  BlockKind kind = BlockKind::local;
  std::size_t channels = 0;
  std::size_t heads = 1;
  double mlp_ratio = 4.0;
  double drop_path = 0.0;
  // local attention
  std::size_t local_kernel = 7;
  // deformable attention
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t offset_kernel = 1;
  std::size_t nominal_h = 0;
  std::size_t nominal_w = 0;
};

using AttentionLayer = std::variant<NeighborhoodAttnLayer, DmhaLayer>;

struct Block {
  BlockKind kind = BlockKind::local;
  double drop_path = 0.0;
  Lpu lpu;
  Norm norm1;
  AttentionLayer attn;
  Norm norm2;
  ConvFfn ffn;

  template <class F>
  void visit(F&& f) {
    visit_child(lpu, "lpu", f);
    visit_child(norm1, "norm1", f);
    std::visit([&](auto& a) { visit_child(a, kind == BlockKind::local ? "nat" : "dmha", f); }, attn);
    visit_child(norm2, "norm2", f);
    visit_child(ffn, "ffn", f);
  }

  DmhaLayer* dmha() { return std::get_if<DmhaLayer>(&attn); }
  const DmhaLayer* dmha() const { return std::get_if<DmhaLayer>(&attn); }
};

inline Block make_block(const BlockConfig& cfg, Initializer& init) {
  if (!(cfg.mlp_ratio > 0.0)) throw ConfigError("block: mlp_ratio must be positive");
  Block b;
  b.kind = cfg.kind;
  b.drop_path = cfg.drop_path;
  b.lpu = make_lpu(cfg.channels, init);
  b.norm1 = make_norm(cfg.channels);
  if (cfg.kind == BlockKind::local) {
    b.attn = make_neighborhood_attn(cfg.channels, cfg.heads, cfg.local_kernel, init);
  } else {
    b.attn = make_dmha_layer({cfg.channels, cfg.heads, cfg.groups, cfg.stride, cfg.offset_kernel, cfg.nominal_h,
                              cfg.nominal_w},
                             init);
  }
  b.norm2 = make_norm(cfg.channels);
  b.ffn = make_convffn(cfg.channels, cfg.mlp_ratio, init);
  return b;
}

// Training-time knobs. Drop path is applied only when `rng` is set.
struct RunMode {
  std::mt19937_64* rng = nullptr;
};

struct BlockCache {
  Tensor x, z1, z2;
  LayerNormCache ln1, ln2;
  Tensor ln1_out, ln2_out;
  NatCache nat;
  DmhaCache dmha;
  FfnCache ffn;
  std::vector<double> attn_scale, ffn_scale;  // per-sample residual branch scales (drop path)
};

namespace detail {

inline std::vector<double> drop_path_scales(std::size_t batch, double rate, const RunMode& mode) {
  std::vector<double> s(batch, 1.0);
  if (!mode.rng || rate <= 0.0) return s;
  std::bernoulli_distribution keep(1.0 - rate);
  for (auto& v : s) v = keep(*mode.rng) ? 1.0 / (1.0 - rate) : 0.0;
  return s;
}

inline void scale_per_sample(Tensor& t, const std::vector<double>& s) {
  const std::size_t per = t.size() / s.size();
  for (std::size_t n = 0; n < s.size(); ++n)
    if (s[n] != 1.0)
      for (std::size_t i = 0; i < per; ++i) t[n * per + i] *= s[n];
}

}  // namespace detail

inline Tensor block_forward(const Block& blk, const Tensor& x, BlockCache* cache = nullptr, const RunMode& mode = {}) {
  BlockCache local;
  BlockCache& cc = cache ? *cache : local;
  const std::size_t batch = x.dim(0);
  cc.x = x;
  cc.z1 = lpu_forward(blk.lpu, x);
  cc.ln1_out = layer_norm(cc.z1, blk.norm1.gamma, blk.norm1.beta, kLayerNormEps, &cc.ln1);
  Tensor a = std::holds_alternative<DmhaLayer>(blk.attn)
                 ? dmha_forward(std::get<DmhaLayer>(blk.attn), cc.ln1_out, &cc.dmha)
                 : neighborhood_attn_forward(std::get<NeighborhoodAttnLayer>(blk.attn), cc.ln1_out, &cc.nat);
  cc.attn_scale = detail::drop_path_scales(batch, blk.drop_path, mode);
  detail::scale_per_sample(a, cc.attn_scale);
  cc.z2 = cc.z1 + a;
  cc.ln2_out = layer_norm(cc.z2, blk.norm2.gamma, blk.norm2.beta, kLayerNormEps, &cc.ln2);
  Tensor f = convffn_forward(blk.ffn, cc.ln2_out, &cc.ffn);
  cc.ffn_scale = detail::drop_path_scales(batch, blk.drop_path, mode);
  detail::scale_per_sample(f, cc.ffn_scale);
  return cc.z2 + f;
}

inline Tensor block_backward(const Block& blk, const BlockCache& cache, const Tensor& grad_out, Block& grads) {
  if (cache.x.empty()) throw StateError("block_backward: no forward cache");
  // out = z2 + s_f * FFN(LN2(z2))
  Tensor g_f = grad_out;
  detail::scale_per_sample(g_f, cache.ffn_scale);
  const Tensor g_ln2 = convffn_backward(blk.ffn, cache.ffn, g_f, grads.ffn);
  auto ln2 = layer_norm_backward(cache.ln2, blk.norm2.gamma, g_ln2);
  grads.norm2.gamma += ln2.gamma;
  grads.norm2.beta += ln2.beta;
  Tensor g_z2 = grad_out + ln2.input;

  // z2 = z1 + s_a * Attn(LN1(z1))
  Tensor g_a = g_z2;
  detail::scale_per_sample(g_a, cache.attn_scale);
  Tensor g_ln1;
  if (const auto* d = std::get_if<DmhaLayer>(&blk.attn)) {
    g_ln1 = dmha_backward(*d, cache.dmha, g_a, std::get<DmhaLayer>(grads.attn));
  } else {
    g_ln1 = neighborhood_attn_backward(std::get<NeighborhoodAttnLayer>(blk.attn), cache.nat, g_a,
                                       std::get<NeighborhoodAttnLayer>(grads.attn));
  }
  auto ln1 = layer_norm_backward(cache.ln1, blk.norm1.gamma, g_ln1);
  grads.norm1.gamma += ln1.gamma;
  grads.norm1.beta += ln1.beta;
  Tensor g_z1 = std::move(g_z2);
  g_z1 += ln1.input;
  return lpu_backward(blk.lpu, cache.x, g_z1, grads.lpu);
}

}  // namespace dat
