#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>

#include "dat/attention.hpp"
#include "dat/offsetnet.hpp"
#include "dat/params.hpp"
#include "dat/sampling.hpp"
#include "dat/tensor.hpp"

namespace dat {

// Deformable multi-head attention layer.
//
// Queries come from every position of the input map. Keys and values come from a small set
// of H/r x W/r deformed points per offset group: a uniform reference grid shifted by offsets
// that the offset network predicts from the queries. Heads are assigned to groups in
// contiguous blocks of M/G; group g's channel block of the input is sampled at group g's
// points, and the heads of group g see relative position bias measured against group g's
// points.
struct DmhaLayer {
  AttnProjections proj;
  OffsetNetwork offset_net;
  Tensor rpb_table;  // M x (2H-1) x (2W-1) for the nominal H x W; empty when disabled
  std::size_t heads = 1;
  std::size_t groups = 1;
  std::size_t stride = 1;  // downsample factor r

  std::size_t channels() const { return proj.channels(); }
  std::size_t head_dim() const { return channels() / heads; }
  std::size_t heads_per_group() const { return heads / groups; }
  std::size_t group_of_head(std::size_t m) const { return m / heads_per_group(); }
  bool has_rpb() const { return !rpb_table.empty(); }

  template <class F>
  void visit(F&& f) {
    visit_child(proj, "proj", f);
    visit_child(offset_net, "offset", f);
    visit_tensor(rpb_table, "rpb_table", f);
  }

  void validate() const {
    const std::size_t c = channels();
    if (heads == 0 || groups == 0 || c == 0) throw ConfigError("dmha: heads, groups and channels must be positive");
    if (c % heads != 0) {
      throw ConfigError("dmha: channels " + std::to_string(c) + " not divisible by heads " + std::to_string(heads));
    }
    if (heads % groups != 0) {
      throw ConfigError("dmha: heads " + std::to_string(heads) + " not divisible by groups " + std::to_string(groups));
    }
    if (head_dim() * heads_per_group() != c / groups) throw ConfigError("dmha: head slices do not nest in group slices");
    if (offset_net.stride != stride) throw ConfigError("dmha: offset network stride differs from layer stride");
    if (offset_net.group_channels() != c / groups) throw ConfigError("dmha: offset network width is not C/G");
    offset_net.validate();
    if (has_rpb() && (rpb_table.rank() != 3 || rpb_table.dim(0) != heads)) {
      throw ConfigError("dmha: rpb table " + shape_str(rpb_table.shape()) + " must be M x (2H-1) x (2W-1)");
    }
  }
};

struct DmhaOptions {
  std::size_t channels = 0;
  std::size_t heads = 1;
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t offset_kernel = 1;
  std::size_t nominal_h = 0;  // RPB table size; 0 disables relative position bias
  std::size_t nominal_w = 0;
};

inline DmhaLayer make_dmha_layer(const DmhaOptions& o, Initializer& init) {
  DmhaLayer l;
  l.heads = o.heads;
  l.groups = o.groups;
  l.stride = o.stride;
  if (o.heads == 0 || o.groups == 0 || o.channels % o.groups != 0) {
    throw ConfigError("dmha: channels " + std::to_string(o.channels) + " not divisible by groups " +
                      std::to_string(o.groups));
  }
  l.proj = make_attn_projections(o.channels, init);
  l.offset_net = make_offset_network(o.channels / o.groups, o.offset_kernel, o.stride, init);
  if (o.nominal_h > 0 && o.nominal_w > 0) {
    l.rpb_table = Initializer::zeros({o.heads, 2 * o.nominal_h - 1, 2 * o.nominal_w - 1});
  }
  l.validate();
  return l;
}

// What the layer looked at: deformed key locations, attention map, sampled features.
struct DmhaTrace {
  std::size_t height = 0, width = 0;  // query map size
  Tensor sample_grid;                 // B x G x Hg x Wg x 2, clipped normalized (x, y)
  Tensor attention;                   // B x M x HW x Ns
  Tensor sampled_features;            // B x Hg x Wg x C
};

struct DmhaCache {
  Tensor x;
  Tensor q;                // B x H x W x C
  OffsetCache offsets;
  Tensor unclipped;        // reference + offsets, B x G x Hg x Wg x 2
  Tensor k, v;             // B x Ns x C
  Tensor heads_out;        // B x HW x C, before the output projection
  Tensor query_grid;       // H x W x 2
  DmhaTrace trace;
  bool valid = false;
};

namespace detail {

template <class Fn>
auto dmha_step(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError(std::string("dmha step '") + name + "': " + e.what());
  }
}

}  // namespace detail

// Relative position bias for one head. `key_locs` (B x Hg x Wg x 2) are the deformed points of
// the head's group, `query_grid` (H x W x 2) the normalized query positions. Displacements
// (query - key) / 2 lie in [-1, 1] and address the head's (2H-1) x (2W-1) table with the
// cell-center convention. Returns B x HW x Ns.
inline Tensor deform_rpb(const Tensor& rpb_table, const Tensor& query_grid, const Tensor& key_locs, std::size_t head) {
  if (rpb_table.rank() != 3 || head >= rpb_table.dim(0)) throw DimensionError("deform_rpb: bad table or head index");
  if (query_grid.rank() != 3 || query_grid.dim(2) != 2 || key_locs.rank() != 4 || key_locs.dim(3) != 2) {
    throw DimensionError("deform_rpb: query grid " + shape_str(query_grid.shape()) + ", key locations " +
                         shape_str(key_locs.shape()));
  }
  const std::size_t th = rpb_table.dim(1), tw = rpb_table.dim(2);
  const std::size_t nq = query_grid.dim(0) * query_grid.dim(1);
  const std::size_t b = key_locs.dim(0), nk = key_locs.dim(1) * key_locs.dim(2);
  const double* table = rpb_table.data() + head * th * tw;
  Tensor out({b, nq, nk});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < nk; ++j) {
        const double* ql = query_grid.data() + i * 2;
        const double* kl = key_locs.data() + (n * nk + j) * 2;
        const detail::BilinearTap tap(0.5 * (ql[0] - kl[0]), 0.5 * (ql[1] - kl[1]), tw, th);
        double s = 0.0;
        for (int corner = 0; corner < 4; ++corner)
          if (tap.valid(corner)) s += tap.weight(corner) * table[tap.cy(corner) * tw + tap.cx(corner)];
        out[(n * nq + i) * nk + j] = s;
      }
  return out;
}

struct RpbGrads {
  Tensor table;      // same shape as the table
  Tensor key_locs;   // same shape as the key locations
};

// Backward of deform_rpb for one head.
inline RpbGrads deform_rpb_backward(const Tensor& rpb_table, const Tensor& query_grid, const Tensor& key_locs,
                                    std::size_t head, const Tensor& grad_bias) {
  const std::size_t th = rpb_table.dim(1), tw = rpb_table.dim(2);
  const std::size_t nq = query_grid.dim(0) * query_grid.dim(1);
  const std::size_t b = key_locs.dim(0), nk = key_locs.dim(1) * key_locs.dim(2);
  if (grad_bias.shape() != Shape{b, nq, nk}) throw DimensionError("deform_rpb_backward: gradient shape mismatch");
  RpbGrads g{Tensor(rpb_table.shape()), Tensor(key_locs.shape())};
  const double* table = rpb_table.data() + head * th * tw;
  double* gtable = g.table.data() + head * th * tw;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < nk; ++j) {
        const double gb = grad_bias[(n * nq + i) * nk + j];
        const double* ql = query_grid.data() + i * 2;
        const double* kl = key_locs.data() + (n * nk + j) * 2;
        const detail::BilinearTap tap(0.5 * (ql[0] - kl[0]), 0.5 * (ql[1] - kl[1]), tw, th);
        double dx = 0.0, dy = 0.0;
        for (int corner = 0; corner < 4; ++corner) {
          if (!tap.valid(corner)) continue;
          const std::size_t t = tap.cy(corner) * tw + tap.cx(corner);
          gtable[t] += tap.weight(corner) * gb;
          dx += tap.dweight_dx(corner) * table[t];
          dy += tap.dweight_dy(corner) * table[t];
        }
        // displacement = (query - key) / 2
        g.key_locs[(n * nk + j) * 2 + 0] -= 0.5 * tap.scale_x * dx * gb;
        g.key_locs[(n * nk + j) * 2 + 1] -= 0.5 * tap.scale_y * dy * gb;
      }
  return g;
}

namespace detail {

// Bias for all heads at once, B x M x HW x Ns. Taps are shared by the heads of a group.
inline Tensor rpb_all_heads(const DmhaLayer& layer, const Tensor& query_grid, const Tensor& locs) {
  const std::size_t b = locs.dim(0), groups = locs.dim(1), nk = locs.dim(2) * locs.dim(3);
  const std::size_t nq = query_grid.dim(0) * query_grid.dim(1), hpg = layer.heads_per_group();
  const std::size_t th = layer.rpb_table.dim(1), tw = layer.rpb_table.dim(2);
  Tensor bias({b, layer.heads, nq, nk});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < nq; ++i)
        for (std::size_t j = 0; j < nk; ++j) {
          const double* ql = query_grid.data() + i * 2;
          const double* kl = locs.data() + ((n * groups + g) * nk + j) * 2;
          const BilinearTap tap(0.5 * (ql[0] - kl[0]), 0.5 * (ql[1] - kl[1]), tw, th);
          for (std::size_t m = g * hpg; m < (g + 1) * hpg; ++m) {
            const double* table = layer.rpb_table.data() + m * th * tw;
            double s = 0.0;
            for (int corner = 0; corner < 4; ++corner)
              if (tap.valid(corner)) s += tap.weight(corner) * table[tap.cy(corner) * tw + tap.cx(corner)];
            bias[((n * layer.heads + m) * nq + i) * nk + j] = s;
          }
        }
  return bias;
}

inline void rpb_all_heads_backward(const DmhaLayer& layer, const Tensor& query_grid, const Tensor& locs,
                                   const Tensor& grad_bias, Tensor& grad_table, Tensor& grad_locs) {
  const std::size_t b = locs.dim(0), groups = locs.dim(1), nk = locs.dim(2) * locs.dim(3);
  const std::size_t nq = query_grid.dim(0) * query_grid.dim(1), hpg = layer.heads_per_group();
  const std::size_t th = layer.rpb_table.dim(1), tw = layer.rpb_table.dim(2);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < nq; ++i)
        for (std::size_t j = 0; j < nk; ++j) {
          const double* ql = query_grid.data() + i * 2;
          const std::size_t loff = ((n * groups + g) * nk + j) * 2;
          const BilinearTap tap(0.5 * (ql[0] - locs[loff]), 0.5 * (ql[1] - locs[loff + 1]), tw, th);
          double dx = 0.0, dy = 0.0;
          for (std::size_t m = g * hpg; m < (g + 1) * hpg; ++m) {
            const double gb = grad_bias[((n * layer.heads + m) * nq + i) * nk + j];
            const double* table = layer.rpb_table.data() + m * th * tw;
            double* gtable = grad_table.data() + m * th * tw;
            for (int corner = 0; corner < 4; ++corner) {
              if (!tap.valid(corner)) continue;
              const std::size_t t = tap.cy(corner) * tw + tap.cx(corner);
              gtable[t] += tap.weight(corner) * gb;
              dx += tap.dweight_dx(corner) * table[t] * gb;
              dy += tap.dweight_dy(corner) * table[t] * gb;
            }
          }
          grad_locs[loff] -= 0.5 * tap.scale_x * dx;
          grad_locs[loff + 1] -= 0.5 * tap.scale_y * dy;
        }
}

}  // namespace detail

// Forward pass. x: B x H x W x C. Fills `cache` (including the trace) when given.
inline Tensor dmha_forward(const DmhaLayer& layer, const Tensor& x, DmhaCache* cache) {
  layer.validate();
  if (x.rank() != 4 || x.dim(3) != layer.channels()) {
    throw DimensionError("dmha: input " + shape_str(x.shape()) + " for a layer with " +
                         std::to_string(layer.channels()) + " channels");
  }
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3), r = layer.stride;
  if (h % r != 0 || w % r != 0) {
    throw ConfigError("dmha: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by downsample factor " + std::to_string(r));
  }
  const std::size_t hg = h / r, wg = w / r, ns = hg * wg, hw = h * w, groups = layer.groups;

  DmhaCache local;
  DmhaCache& cc = cache ? *cache : local;
  cc.valid = false;
  cc.x = x;
  cc.q = detail::dmha_step("query projection", [&] { return linear(x, layer.proj.wq, layer.proj.bq); });
  const Tensor offsets =
      detail::dmha_step("offset generation", [&] { return generate_offsets(layer.offset_net, cc.q, groups, &cc.offsets); });

  const Tensor ref = reference_grid(hg, wg);
  cc.unclipped = offsets;
  for (std::size_t n = 0; n < b * groups; ++n)
    for (std::size_t p = 0; p < ns * 2; ++p) cc.unclipped[n * ns * 2 + p] += ref[p];
  Tensor locs = clip_locations(cc.unclipped);
  detail::dmha_step("sampling locations", [&] { ensure_finite(locs, "clip_locations"); return 0; });

  Tensor sampled = detail::dmha_step("bilinear sampling", [&] { return bilinear_sample(x, locs); });
  const Tensor sampled_tokens = sampled.reshaped({b, ns, c});
  cc.k = detail::dmha_step("key projection", [&] { return linear(sampled_tokens, layer.proj.wk, Tensor()); });
  cc.v = detail::dmha_step("value projection", [&] { return linear(sampled_tokens, layer.proj.wv, layer.proj.bv); });

  cc.query_grid = reference_grid(h, w);
  Tensor bias;
  if (layer.has_rpb()) {
    bias = detail::dmha_step("relative position bias", [&] {
      Tensor t = detail::rpb_all_heads(layer, cc.query_grid, locs);
      ensure_finite(t, "deform_rpb");
      return t;
    });
  }
  Tensor attn;
  cc.heads_out = detail::dmha_step(
      "attention", [&] { return attention_core(cc.q.reshaped({b, hw, c}), cc.k, cc.v, layer.heads, bias, attn); });
  Tensor out = detail::dmha_step("output projection", [&] { return linear(cc.heads_out, layer.proj.wo, layer.proj.bo); });

  cc.trace.height = h;
  cc.trace.width = w;
  cc.trace.sample_grid = std::move(locs);
  cc.trace.attention = std::move(attn);
  cc.trace.sampled_features = std::move(sampled);
  cc.valid = true;
  return std::move(out).reshaped(x.shape());
}

struct DmhaResult {
  Tensor output;
  std::optional<DmhaTrace> trace;
};

inline DmhaResult dmha_forward(const DmhaLayer& layer, const Tensor& x, bool want_trace) {
  DmhaCache cache;
  DmhaResult r{dmha_forward(layer, x, &cache), std::nullopt};
  if (want_trace) r.trace = std::move(cache.trace);
  return r;
}

// Reverse pass. Returns d loss / d x and accumulates parameter gradients into `grads`
// (same structure as `layer`). Gradients reach the offsets through both the feature sampling
// and the relative position bias.
inline Tensor dmha_backward(const DmhaLayer& layer, const DmhaCache& cache, const Tensor& grad_out, DmhaLayer& grads) {
  if (!cache.valid) throw StateError("dmha_backward: no forward trace available");
  const Tensor& x = cache.x;
  if (grad_out.shape() != x.shape()) {
    throw DimensionError("dmha_backward: gradient " + shape_str(grad_out.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t hw = h * w, ns = cache.k.dim(1);
  const Tensor& locs = cache.trace.sample_grid;

  auto out_g = linear_backward(cache.heads_out, layer.proj.wo, true, grad_out.reshaped({b, hw, c}));
  grads.proj.wo += out_g.weight;
  grads.proj.bo += out_g.bias;

  const Tensor q_tokens = cache.q.reshaped({b, hw, c});
  auto att_g = attention_core_backward(q_tokens, cache.k, cache.v, layer.heads, cache.trace.attention, out_g.input);

  Tensor g_locs(locs.shape());
  if (layer.has_rpb()) {
    detail::rpb_all_heads_backward(layer, cache.query_grid, locs, att_g.bias, grads.rpb_table, g_locs);
  }

  const Tensor sampled_tokens = cache.trace.sampled_features.reshaped({b, ns, c});
  auto k_g = linear_backward(sampled_tokens, layer.proj.wk, false, att_g.k);
  grads.proj.wk += k_g.weight;
  auto v_g = linear_backward(sampled_tokens, layer.proj.wv, true, att_g.v);
  grads.proj.wv += v_g.weight;
  grads.proj.bv += v_g.bias;
  Tensor g_sampled = k_g.input + v_g.input;

  auto s_g = bilinear_sample_backward(x, locs, std::move(g_sampled).reshaped(cache.trace.sampled_features.shape()));
  g_locs += s_g.grid;
  // The reference grid is constant, so the offset gradient is the clipped location gradient.
  const Tensor g_offsets = clip_locations_backward(cache.unclipped, g_locs);

  Tensor g_q = std::move(att_g.q).reshaped(x.shape());
  g_q += generate_offsets_backward(layer.offset_net, cache.offsets, g_offsets, grads.offset_net);

  auto q_g = linear_backward(x, layer.proj.wq, true, g_q);
  grads.proj.wq += q_g.weight;
  grads.proj.bq += q_g.bias;
  Tensor gx = std::move(s_g.input);
  gx += q_g.input;
  return gx;
}

}  // namespace dat
