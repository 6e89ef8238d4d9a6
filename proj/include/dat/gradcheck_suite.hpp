#pragma once

#include <chrono>
#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "dat/backbone.hpp"
#include "dat/blocks.hpp"
#include "dat/dmha.hpp"
#include "dat/gradcheck.hpp"
#include "dat/offsetnet.hpp"
#include "dat/sampling.hpp"
#include "dat/tensor.hpp"
#include "dat/train.hpp"

namespace dat {

// Named bag of tensors, usable wherever a module is expected.
struct Operands {
  std::vector<std::pair<std::string, Tensor>> items;

  Operands& add(std::string name, Tensor t) {
    items.emplace_back(std::move(name), std::move(t));
    return *this;
  }

  Tensor& operator[](const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return t;
    throw ArgumentError("operands: no tensor named '" + name + "'");
  }
  const Tensor& operator[](const std::string& name) const { return const_cast<Operands&>(*this)[name]; }

  template <class F>
  void visit(F&& f) {
    for (auto& [n, t] : items) visit_tensor(t, n, f);
  }
};

// A module together with the input it is evaluated on.
template <class M>
struct WithInput {
  M module;
  Tensor input;

  template <class F>
  void visit(F&& f) {
    visit_child(module, "", f);
    visit_tensor(input, "input", f);
  }
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t samples_per_block = 64;
  double step = 1e-6;
  std::string corrupt;  // name of a check whose analytic gradient is sign-flipped
};

struct SuiteCheck {
  std::string name;
  double tolerance;
  std::function<GradCheckReport(const SuiteOptions&)> run;
};

namespace detail {

inline double dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(s);
}

// Checks loss = <R, fwd(p)> for a fixed random R against the analytic gradient produced by
// bwd(p, R, grads). One block per tensor of `p`.
template <class P, class Fwd, class Bwd>
GradCheckReport check_projection(const std::string& name, P& p, Fwd fwd, Bwd bwd, double tolerance,
                                 const SuiteOptions& opt) {
  Initializer init(opt.seed ^ 0x5eed);
  const Tensor out = fwd(p);
  const Tensor r = init.uniform(out.shape(), -1.0, 1.0);
  P grads = zeros_like(p);
  bwd(p, r, grads);
  if (opt.corrupt == name) grads.visit([](const std::string&, Tensor& t) { t *= -1.0; });
  auto refs = bind_gradients(p, grads);
  GradCheckOptions gopt{opt.step, tolerance, ErrorMetric::coordinate, opt.samples_per_block, opt.seed};
  return grad_check([&] { return dot(r, fwd(p)); }, blocks_per_tensor(refs, name + "."), gopt);
}

inline Tensor random(Initializer& init, Shape s, double scale = 1.0) { return init.uniform(std::move(s), -scale, scale); }

// Puts DMHA sampling points away from lattice sites and gives the bias table some content.
inline void perturb_dmha(DmhaLayer& d, Initializer& init) {
  d.offset_net.proj_weight = init.trunc_normal(d.offset_net.proj_weight.shape(), 0.1);
  d.offset_net.dw_bias = init.trunc_normal(d.offset_net.dw_bias.shape(), 0.1);
  if (d.has_rpb()) d.rpb_table = init.trunc_normal(d.rpb_table.shape(), 0.5);
  d.proj = [&] {
    AttnProjections p = d.proj;
    p.visit([&](const std::string&, Tensor& t) { t = init.trunc_normal(t.shape(), 0.3); });
    return p;
  }();
}

inline void randomize_all(auto& module, Initializer& init, double std) {
  module.visit([&](const std::string&, Tensor& t) { t = init.trunc_normal(t.shape(), std); });
}

// Groups model parameters per block ("stages.i.blocks.j") and per leaf module elsewhere.
inline std::vector<GradBlock> model_blocks(const std::vector<ParamRef>& refs, const std::string& prefix) {
  std::vector<GradBlock> out;
  for (const auto& p : refs) {
    std::string key = p.name;
    if (key.find(".blocks.") != std::string::npos) {
      std::size_t pos = 0;
      for (int d = 0; d < 4 && pos != std::string::npos; ++d) pos = key.find('.', pos + (d ? 1 : 0));
      key = key.substr(0, pos);
    } else if (const auto dot = key.rfind('.'); dot != std::string::npos) {
      key = key.substr(0, dot);
    }
    key = prefix + key;
    if (out.empty() || out.back().name != key) out.push_back({key, {}, {}});
    out.back().values.push_back(p.value);
    out.back().gradients.push_back(p.gradient);
  }
  return out;
}

}  // namespace detail

// Cross-entropy of dat-nano on one random image, grouped per block and judged block-wise.
inline GradCheckReport nano_loss_check(const SuiteOptions& o) {
  const ModelConfig cfg = preset_nano();
  WithInput<Model> p{build_model(cfg, o.seed + 22), Tensor()};
  Initializer init(o.seed + 23);
  p.input = init.uniform({1, cfg.resolution, cfg.resolution, cfg.in_channels}, -1.0, 1.0);
  p.module.visit([&](const std::string& name, Tensor& t) {
    t = init.trunc_normal(t.shape(), 0.1);
    if (name.ends_with("gamma")) t += Initializer::ones(t.shape());
  });
  for (auto& st : p.module.stages)
    for (auto& b : st.blocks)
      if (auto* d = b.dmha()) detail::perturb_dmha(*d, init);
  p.module.head_w = init.trunc_normal(p.module.head_w.shape(), 0.5);
  const std::vector<std::size_t> labels{1};

  WithInput<Model> grads = zeros_like(p);
  ModelCache cache;
  const LossResult lr = cross_entropy(forward_logits(p.module, p.input, &cache), labels);
  grads.input = model_backward(p.module, cache, lr.grad_logits, grads.module);
  if (o.corrupt == "model") grads.visit([](const std::string&, Tensor& t) { t *= -1.0; });
  auto refs = bind_gradients(p, grads);
  GradCheckOptions gopt{o.step, 1e-4, ErrorMetric::block_norm, o.samples_per_block, o.seed};
  return grad_check([&] { return cross_entropy(forward_logits(p.module, p.input), labels).loss; },
                    detail::model_blocks(refs, "model."), gopt);
}

// Every check in the suite, in execution order.
inline std::vector<SuiteCheck> gradcheck_suite() {
  using detail::check_projection;
  using detail::random;
  std::vector<SuiteCheck> s;

  s.push_back({"matmul", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 1);
                 Operands p;
                 p.add("a", random(init, {5, 7})).add("b", random(init, {7, 4}));
                 return check_projection(
                     "matmul", p, [](Operands& q) { return matmul(q["a"], q["b"]); },
                     [](Operands& q, const Tensor& g, Operands& gr) {
                       auto r = matmul_backward(q["a"], q["b"], g);
                       gr["a"] += r.a;
                       gr["b"] += r.b;
                     },
                     1e-4, o);
               }});

  s.push_back({"linear", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 2);
                 Operands p;
                 p.add("x", random(init, {2, 3, 3, 6})).add("w", random(init, {6, 5})).add("b", random(init, {5}));
                 return check_projection(
                     "linear", p, [](Operands& q) { return linear(q["x"], q["w"], q["b"]); },
                     [](Operands& q, const Tensor& g, Operands& gr) {
                       auto r = linear_backward(q["x"], q["w"], true, g);
                       gr["x"] += r.input;
                       gr["w"] += r.weight;
                       gr["b"] += r.bias;
                     },
                     1e-4, o);
               }});

  s.push_back({"softmax", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 3);
                 Operands p;
                 p.add("x", random(init, {4, 6}));
                 return check_projection(
                     "softmax", p, [](Operands& q) { return softmax_lastdim(q["x"]); },
                     [](Operands& q, const Tensor& g, Operands& gr) {
                       gr["x"] += softmax_backward(softmax_lastdim(q["x"]), g);
                     },
                     1e-4, o);
               }});

  s.push_back({"gelu", 1e-6, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 4);
                 Operands p;
                 p.add("x", random(init, {8, 8}, 3.0));
                 return check_projection(
                     "gelu", p, [](Operands& q) { return gelu(q["x"]); },
                     [](Operands& q, const Tensor& g, Operands& gr) { gr["x"] += gelu_backward(q["x"], g); }, 1e-6, o);
               }});

  s.push_back({"layer_norm", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 5);
                 Operands p;
                 p.add("x", random(init, {2, 3, 3, 8}, 2.0))
                     .add("gamma", random(init, {8}))
                     .add("beta", random(init, {8}));
                 return check_projection(
                     "layer_norm", p, [](Operands& q) { return layer_norm(q["x"], q["gamma"], q["beta"]); },
                     [](Operands& q, const Tensor& g, Operands& gr) {
                       LayerNormCache c;
                       layer_norm(q["x"], q["gamma"], q["beta"], kLayerNormEps, &c);
                       auto r = layer_norm_backward(c, q["gamma"], g);
                       gr["x"] += r.input;
                       gr["gamma"] += r.gamma;
                       gr["beta"] += r.beta;
                     },
                     1e-4, o);
               }});

  s.push_back({"conv2d", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 6);
                 Operands p;
                 p.add("x", random(init, {2, 7, 6, 3})).add("w", random(init, {3, 3, 3, 4})).add("b", random(init, {4}));
                 const Conv2dParams cp{2, 1, 1};
                 return check_projection(
                     "conv2d", p, [cp](Operands& q) { return conv2d(q["x"], q["w"], q["b"], cp); },
                     [cp](Operands& q, const Tensor& g, Operands& gr) {
                       auto r = conv2d_backward(q["x"], q["w"], true, cp, g);
                       gr["x"] += r.input;
                       gr["w"] += r.weight;
                       gr["b"] += r.bias;
                     },
                     1e-4, o);
               }});

  s.push_back({"conv2d_depthwise", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 7);
                 Operands p;
                 p.add("x", random(init, {2, 8, 8, 6})).add("w", random(init, {5, 5, 1, 6})).add("b", random(init, {6}));
                 const Conv2dParams cp{2, 2, 6};
                 return check_projection(
                     "conv2d_depthwise", p, [cp](Operands& q) { return conv2d(q["x"], q["w"], q["b"], cp); },
                     [cp](Operands& q, const Tensor& g, Operands& gr) {
                       auto r = conv2d_backward(q["x"], q["w"], true, cp, g);
                       gr["x"] += r.input;
                       gr["w"] += r.weight;
                       gr["b"] += r.bias;
                     },
                     1e-4, o);
               }});

  s.push_back({"global_avg_pool", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 8);
                 Operands p;
                 p.add("x", random(init, {2, 3, 4, 5}));
                 return check_projection(
                     "global_avg_pool", p, [](Operands& q) { return global_avg_pool(q["x"]); },
                     [](Operands& q, const Tensor& g, Operands& gr) {
                       gr["x"] += global_avg_pool_backward(q["x"].shape(), g);
                     },
                     1e-4, o);
               }});

  s.push_back({"clip_locations", 1e-6, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 9);
                 Operands p;
                 p.add("locations", random(init, {2, 4, 4, 2}, 1.5));
                 return check_projection(
                     "clip_locations", p, [](Operands& q) { return clip_locations(q["locations"]); },
                     [](Operands& q, const Tensor& g, Operands& gr) {
                       gr["locations"] += clip_locations_backward(q["locations"], g);
                     },
                     1e-6, o);
               }});

  s.push_back({"bilinear_sample", 1e-5, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 10);
                 Operands p;
                 p.add("z", random(init, {2, 5, 6, 3})).add("grid", random(init, {2, 3, 4, 2}, 1.1));
                 return check_projection(
                     "bilinear_sample", p, [](Operands& q) { return bilinear_sample(q["z"], q["grid"]); },
                     [](Operands& q, const Tensor& g, Operands& gr) {
                       auto r = bilinear_sample_backward(q["z"], q["grid"], g);
                       gr["z"] += r.input;
                       gr["grid"] += r.grid;
                     },
                     1e-5, o);
               }});

  s.push_back({"bilinear_sample_grouped", 1e-5, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 11);
                 Operands p;
                 p.add("z", random(init, {2, 6, 5, 6})).add("grid", random(init, {2, 3, 3, 2, 2}, 1.0));
                 return check_projection(
                     "bilinear_sample_grouped", p, [](Operands& q) { return bilinear_sample(q["z"], q["grid"]); },
                     [](Operands& q, const Tensor& g, Operands& gr) {
                       auto r = bilinear_sample_backward(q["z"], q["grid"], g);
                       gr["z"] += r.input;
                       gr["grid"] += r.grid;
                     },
                     1e-5, o);
               }});

  s.push_back({"offset_network", 1e-5, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 12);
                 WithInput<OffsetNetwork> p{make_offset_network(4, 3, 2, init), random(init, {2, 8, 8, 8})};
                 detail::randomize_all(p.module, init, 0.3);
                 p.module.ln_gamma += Initializer::ones({4});
                 return check_projection(
                     "offset_network", p,
                     [](WithInput<OffsetNetwork>& q) { return generate_offsets(q.module, q.input, 2); },
                     [](WithInput<OffsetNetwork>& q, const Tensor& g, WithInput<OffsetNetwork>& gr) {
                       OffsetCache c;
                       generate_offsets(q.module, q.input, 2, &c);
                       gr.input += generate_offsets_backward(q.module, c, g, gr.module);
                     },
                     1e-5, o);
               }});

  auto dmha_case = [](std::string name, DmhaOptions dopt, std::uint64_t salt) {
    return SuiteCheck{name, 1e-4, [name, dopt, salt](const SuiteOptions& o) {
                        Initializer init(o.seed + salt);
                        WithInput<DmhaLayer> p{make_dmha_layer(dopt, init),
                                               random(init, {2, dopt.nominal_h ? dopt.nominal_h : 8,
                                                             dopt.nominal_w ? dopt.nominal_w : 8, dopt.channels})};
                        detail::perturb_dmha(p.module, init);
                        return check_projection(
                            name, p, [](WithInput<DmhaLayer>& q) { return dmha_forward(q.module, q.input, nullptr); },
                            [](WithInput<DmhaLayer>& q, const Tensor& g, WithInput<DmhaLayer>& gr) {
                              DmhaCache c;
                              dmha_forward(q.module, q.input, &c);
                              gr.input += dmha_backward(q.module, c, g, gr.module);
                            },
                            1e-4, o);
                      }};
  };
  s.push_back(dmha_case("dmha", {16, 4, 2, 2, 3, 8, 8}, 13));
  s.push_back(dmha_case("dmha_dense", {8, 2, 1, 1, 3, 6, 6}, 14));

  s.push_back({"neighborhood_attention", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 15);
                 using P = WithInput<NeighborhoodAttnLayer>;
                 P p{make_neighborhood_attn(8, 2, 3, init), random(init, {2, 5, 6, 8})};
                 detail::randomize_all(p.module, init, 0.3);
                 return check_projection(
                     "neighborhood_attention", p, [](P& q) { return neighborhood_attn_forward(q.module, q.input); },
                     [](P& q, const Tensor& g, P& gr) {
                       NatCache c;
                       neighborhood_attn_forward(q.module, q.input, &c);
                       gr.input += neighborhood_attn_backward(q.module, c, g, gr.module);
                     },
                     1e-4, o);
               }});

  s.push_back({"lpu", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 16);
                 using P = WithInput<Lpu>;
                 P p{make_lpu(6, init), random(init, {2, 5, 5, 6})};
                 detail::randomize_all(p.module, init, 0.3);
                 return check_projection(
                     "lpu", p, [](P& q) { return lpu_forward(q.module, q.input); },
                     [](P& q, const Tensor& g, P& gr) { gr.input += lpu_backward(q.module, q.input, g, gr.module); },
                     1e-4, o);
               }});

  s.push_back({"convffn", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 17);
                 using P = WithInput<ConvFfn>;
                 P p{make_convffn(4, 4.0, init), random(init, {2, 4, 5, 4})};
                 detail::randomize_all(p.module, init, 0.3);
                 return check_projection(
                     "convffn", p, [](P& q) { return convffn_forward(q.module, q.input); },
                     [](P& q, const Tensor& g, P& gr) {
                       FfnCache c;
                       convffn_forward(q.module, q.input, &c);
                       gr.input += convffn_backward(q.module, c, g, gr.module);
                     },
                     1e-4, o);
               }});

  auto block_case = [](std::string name, BlockConfig bc, std::uint64_t salt) {
    return SuiteCheck{name, 1e-4, [name, bc, salt](const SuiteOptions& o) {
                        Initializer init(o.seed + salt);
                        using P = WithInput<Block>;
                        P p{make_block(bc, init), random(init, {2, 8, 8, bc.channels})};
                        detail::randomize_all(p.module, init, 0.2);
                        p.module.norm1.gamma += Initializer::ones({bc.channels});
                        p.module.norm2.gamma += Initializer::ones({bc.channels});
                        if (auto* d = p.module.dmha()) {
                          d->offset_net.ln_gamma += Initializer::ones({d->offset_net.group_channels()});
                        }
                        return check_projection(
                            name, p, [](P& q) { return block_forward(q.module, q.input); },
                            [](P& q, const Tensor& g, P& gr) {
                              BlockCache c;
                              block_forward(q.module, q.input, &c);
                              gr.input += block_backward(q.module, c, g, gr.module);
                            },
                            1e-4, o);
                      }};
  };
  {
    BlockConfig local;
    local.kind = BlockKind::local;
    local.channels = 8;
    local.heads = 2;
    local.local_kernel = 3;
    s.push_back(block_case("block_local", local, 18));
    BlockConfig deform = local;
    deform.kind = BlockKind::deformable;
    deform.groups = 2;
    deform.stride = 2;
    deform.offset_kernel = 3;
    deform.nominal_h = deform.nominal_w = 8;
    s.push_back(block_case("block_deformable", deform, 19));
  }

  s.push_back({"patch_embed", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 20);
                 using P = WithInput<PatchEmbed>;
                 P p{make_patch_embed(3, 8, init), random(init, {1, 8, 8, 3})};
                 detail::randomize_all(p.module, init, 0.3);
                 return check_projection(
                     "patch_embed", p, [](P& q) { return patch_embed(q.module, q.input); },
                     [](P& q, const Tensor& g, P& gr) {
                       PatchEmbedCache c;
                       patch_embed(q.module, q.input, &c);
                       gr.input += patch_embed_backward(q.module, c, g, gr.module);
                     },
                     1e-4, o);
               }});

  s.push_back({"downsample", 1e-4, [](const SuiteOptions& o) {
                 Initializer init(o.seed + 21);
                 using P = WithInput<Downsample>;
                 P p{make_downsample(4, 8, init), random(init, {2, 4, 4, 4})};
                 detail::randomize_all(p.module, init, 0.3);
                 return check_projection(
                     "downsample", p, [](P& q) { return downsample(q.module, q.input); },
                     [](P& q, const Tensor& g, P& gr) {
                       ConvNormCache c;
                       downsample(q.module, q.input, &c);
                       gr.input += downsample_backward(q.module, c, g, gr.module);
                     },
                     1e-4, o);
               }});

  s.push_back({"model", 1e-4, [](const SuiteOptions& o) { return nano_loss_check(o); }});
  return s;
}

struct SuiteResult {
  std::string check;
  double tolerance = 0.0;
  double seconds = 0.0;
  GradCheckReport report;
};

// Runs the named checks (all when `only` is empty), reporting each as it finishes.
inline std::vector<SuiteResult> run_gradcheck_suite(const SuiteOptions& opt, const std::vector<std::string>& only = {},
                                                    const std::function<void(const SuiteResult&)>& on_done = {}) {
  std::vector<SuiteResult> out;
  for (const auto& c : gradcheck_suite()) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r{c.name, c.tolerance, 0.0, c.run(opt)};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_done) on_done(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace dat
