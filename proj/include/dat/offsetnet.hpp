#pragma once

#include <cstddef>
#include <string>

#include "dat/params.hpp"
#include "dat/tensor.hpp"

namespace dat {

// Offset generation network: depthwise k x k conv with stride r -> LayerNorm -> GELU ->
// bias-free 1x1 conv to 2 channels. One network is shared by all offset groups and sees
// C/G channels at a time.
struct OffsetNetwork {
  Tensor dw_weight;    // k x k x 1 x Cg
  Tensor dw_bias;      // Cg
  Tensor ln_gamma;     // Cg
  Tensor ln_beta;      // Cg
  Tensor proj_weight;  // 1 x 1 x Cg x 2, no bias
  std::size_t kernel = 1;
  std::size_t stride = 1;

  std::size_t group_channels() const { return ln_gamma.empty() ? 0 : ln_gamma.dim(0); }
  std::size_t padding() const { return (kernel - 1) / 2; }

  template <class F>
  void visit(F&& f) {
    visit_tensor(dw_weight, "dw_weight", f);
    visit_tensor(dw_bias, "dw_bias", f);
    visit_tensor(ln_gamma, "ln_gamma", f);
    visit_tensor(ln_beta, "ln_beta", f);
    visit_tensor(proj_weight, "proj_weight", f);
  }

  void validate() const {
    if (kernel < stride) {
      throw ConfigError("offset network: kernel " + std::to_string(kernel) + " smaller than stride " +
                        std::to_string(stride));
    }
    const std::size_t cg = group_channels();
    if (cg == 0 || dw_weight.shape() != Shape{kernel, kernel, 1, cg} || dw_bias.shape() != Shape{cg} ||
        ln_beta.shape() != Shape{cg} || proj_weight.shape() != Shape{1, 1, cg, 2}) {
      throw ConfigError("offset network: inconsistent parameter shapes");
    }
  }
};

// Fresh network: truncated-normal depthwise weights, zero projection so offsets start at zero.
inline OffsetNetwork make_offset_network(std::size_t group_channels, std::size_t kernel, std::size_t stride,
                                         Initializer& init) {
  OffsetNetwork net;
  net.kernel = kernel;
  net.stride = stride;
  net.dw_weight = init.trunc_normal({kernel, kernel, 1, group_channels});
  net.dw_bias = Initializer::zeros({group_channels});
  net.ln_gamma = Initializer::ones({group_channels});
  net.ln_beta = Initializer::zeros({group_channels});
  net.proj_weight = Initializer::zeros({1, 1, group_channels, 2});
  net.validate();
  return net;
}

struct OffsetCache {
  std::size_t batch = 0, groups = 0, h = 0, w = 0;
  Tensor grouped_input;  // (B*G) x H x W x Cg
  Tensor dw_out;
  LayerNormCache ln;
  Tensor ln_out;
  Tensor act;
};

namespace detail {

inline Tensor split_groups(const Tensor& q, std::size_t groups) {
  const std::size_t b = q.dim(0), h = q.dim(1), w = q.dim(2), c = q.dim(3), cg = c / groups;
  Tensor out({b * groups, h, w, cg});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t p = 0; p < h * w; ++p) {
        const double* src = q.data() + (n * h * w + p) * c + g * cg;
        std::copy_n(src, cg, out.data() + ((n * groups + g) * h * w + p) * cg);
      }
  return out;
}

inline Tensor merge_groups(const Tensor& grouped, std::size_t groups) {
  const std::size_t bg = grouped.dim(0), h = grouped.dim(1), w = grouped.dim(2), cg = grouped.dim(3);
  const std::size_t b = bg / groups, c = cg * groups;
  Tensor out({b, h, w, c});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t p = 0; p < h * w; ++p) {
        const double* src = grouped.data() + ((n * groups + g) * h * w + p) * cg;
        std::copy_n(src, cg, out.data() + (n * h * w + p) * c + g * cg);
      }
  return out;
}

}  // namespace detail

// q: B x H x W x C. Returns offsets B x G x H/r x W/r x 2 in normalized units, (x, y) order.
inline Tensor generate_offsets(const OffsetNetwork& net, const Tensor& q, std::size_t groups,
                               OffsetCache* cache = nullptr) {
  if (q.rank() != 4) throw DimensionError("generate_offsets: query must be B x H x W x C, got " + shape_str(q.shape()));
  if (groups == 0 || q.dim(3) % groups != 0) {
    throw ConfigError("generate_offsets: channels " + std::to_string(q.dim(3)) + " not divisible by groups " +
                      std::to_string(groups));
  }
  if (q.dim(3) / groups != net.group_channels()) {
    throw ConfigError("generate_offsets: network expects " + std::to_string(net.group_channels()) +
                      " channels per group, got " + std::to_string(q.dim(3) / groups));
  }
  if (q.dim(1) % net.stride != 0 || q.dim(2) % net.stride != 0) {
    throw ConfigError("generate_offsets: spatial size " + std::to_string(q.dim(1)) + "x" + std::to_string(q.dim(2)) +
                      " not divisible by stride " + std::to_string(net.stride));
  }
  const std::size_t b = q.dim(0), hg = q.dim(1) / net.stride, wg = q.dim(2) / net.stride;
  const Conv2dParams dw{net.stride, net.padding(), net.group_channels()};

  OffsetCache local;
  OffsetCache& c = cache ? *cache : local;
  c.batch = b;
  c.groups = groups;
  c.h = q.dim(1);
  c.w = q.dim(2);
  c.grouped_input = detail::split_groups(q, groups);
  c.dw_out = conv2d(c.grouped_input, net.dw_weight, net.dw_bias, dw);
  if (c.dw_out.dim(1) != hg || c.dw_out.dim(2) != wg) {
    throw ConfigError("generate_offsets: kernel " + std::to_string(net.kernel) + " with stride " +
                      std::to_string(net.stride) + " does not produce the reference grid size");
  }
  c.ln_out = layer_norm(c.dw_out, net.ln_gamma, net.ln_beta, kLayerNormEps, &c.ln);
  c.act = gelu(c.ln_out);
  Tensor offsets = conv2d(c.act, net.proj_weight, Tensor(), {});
  return std::move(offsets).reshaped({b, groups, hg, wg, 2});
}

// Returns d loss / d q and accumulates parameter gradients into `grads`.
inline Tensor generate_offsets_backward(const OffsetNetwork& net, const OffsetCache& cache, const Tensor& grad_offsets,
                                        OffsetNetwork& grads) {
  if (cache.grouped_input.empty()) throw StateError("generate_offsets_backward: no forward cache");
  const Tensor g_off = grad_offsets.reshaped({cache.batch * cache.groups, cache.act.dim(1), cache.act.dim(2), 2});
  auto proj = conv2d_backward(cache.act, net.proj_weight, false, {}, g_off);
  grads.proj_weight += proj.weight;
  const Tensor g_ln = gelu_backward(cache.ln_out, proj.input);
  auto ln = layer_norm_backward(cache.ln, net.ln_gamma, g_ln);
  grads.ln_gamma += ln.gamma;
  grads.ln_beta += ln.beta;
  auto dw = conv2d_backward(cache.grouped_input, net.dw_weight, true, {net.stride, net.padding(), net.group_channels()},
                            ln.input);
  grads.dw_weight += dw.weight;
  grads.dw_bias += dw.bias;
  return detail::merge_groups(dw.input, cache.groups);
}

}  // namespace dat
