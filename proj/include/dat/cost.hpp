#pragma once

#include <cstdint>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "dat/backbone.hpp"
#include "dat/params.hpp"

namespace dat {

// Complexity of one DMHA layer on an H x W x C map with downsample factor r and offset kernel k:
//   attention = 2 HW Ns C + 2 HW C^2 + 2 Ns C^2   (QK^T and AV, q/out projections, k/v projections)
//   offsets   = (k^2 + 6) Ns C                     (offset network and bilinear sampling)
// with Ns = HW / r^2. One multiply-accumulate counts as one FLOP.
struct DmhaFlops {
  std::uint64_t attention = 0;
  std::uint64_t offsets = 0;
  std::uint64_t total = 0;
};

inline DmhaFlops dmha_flops(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t r, std::uint64_t k) {
  if (r == 0 || h % r != 0 || w % r != 0) {
    throw ConfigError("dmha_flops: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by r=" +
                      std::to_string(r));
  }
  const std::uint64_t hw = h * w, ns = hw / (r * r);
  DmhaFlops f;
  f.attention = 2 * hw * ns * c + 2 * hw * c * c + 2 * ns * c * c;
  f.offsets = (k * k + 6) * ns * c;
  f.total = f.attention + f.offsets;
  return f;
}

struct CostEntry {
  std::string name;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

struct CostReport {
  std::vector<CostEntry> entries;
  std::uint64_t total_flops = 0;
  std::uint64_t total_params = 0;

  void add(std::string name, std::uint64_t flops, std::uint64_t params) {
    total_flops += flops;
    total_params += params;
    entries.push_back({std::move(name), flops, params});
  }

  // One `name<TAB>flops<TAB>params` line per entry, then the `total` line.
  void write(std::ostream& os) const {
    for (const auto& e : entries) os << e.name << '\t' << e.flops << '\t' << e.params << '\n';
    os << "total\t" << total_flops << '\t' << total_params << '\n';
  }

  std::string to_text() const {
    std::ostringstream os;
    write(os);
    return os.str();
  }
};

namespace detail {

inline std::uint64_t conv_macs(std::uint64_t oh, std::uint64_t ow, std::uint64_t k, std::uint64_t cin_per_group,
                               std::uint64_t cout) {
  return oh * ow * k * k * cin_per_group * cout;
}

}  // namespace detail

// Multiply-accumulates of convolutions, linear layers and attention products at the given
// input resolution; normalization, activation and softmax are not counted. DMHA layers use
// dmha_flops and are reported as two entries (`.attention`, `.offsets`). Parameters are
// exact tensor element counts.
inline CostReport model_cost(const Model& m, std::size_t resolution) {
  if (resolution == 0 || resolution % 32 != 0) {
    throw ConfigError("model_cost: resolution " + std::to_string(resolution) + " not divisible by 32");
  }
  const auto& cfg = m.config;
  CostReport rep;

  const std::uint64_t half = resolution / 2, quarter = resolution / 4;
  const std::uint64_t c0 = cfg.stages[0].channels, mid = m.stem.conv1.bias.dim(0);
  rep.add("stem.conv1", detail::conv_macs(half, half, 3, cfg.in_channels, mid), parameter_count(m.stem.conv1));
  rep.add("stem.conv2", detail::conv_macs(quarter, quarter, 3, mid, c0), parameter_count(m.stem.conv2));

  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto& s = cfg.stages[i];
    const std::uint64_t size = cfg.stage_size(i, resolution), hw = size * size, c = s.channels;
    for (std::size_t b = 0; b < m.stages[i].blocks.size(); ++b) {
      const Block& blk = m.stages[i].blocks[b];
      const std::string p = "stages." + std::to_string(i) + ".blocks." + std::to_string(b);
      rep.add(p + ".lpu", hw * 9 * c, parameter_count(blk.lpu));
      rep.add(p + ".norms", 0, parameter_count(blk.norm1) + parameter_count(blk.norm2));
      if (const auto* d = blk.dmha()) {
        const auto f = dmha_flops(size, size, c, d->stride, d->offset_net.kernel);
        rep.add(p + ".dmha.attention", f.attention, parameter_count(d->proj) + d->rpb_table.size());
        rep.add(p + ".dmha.offsets", f.offsets, parameter_count(d->offset_net));
      } else {
        const auto& nat = std::get<NeighborhoodAttnLayer>(blk.attn);
        const std::uint64_t kk = nat.kernel * nat.kernel;
        rep.add(p + ".nat", 4 * hw * c * c + 2 * hw * kk * c, parameter_count(nat));
      }
      const std::uint64_t hidden = blk.ffn.hidden();
      rep.add(p + ".ffn", 2 * hw * c * hidden + hw * 9 * hidden, parameter_count(blk.ffn));
    }
    rep.add("stages." + std::to_string(i) + ".norm", 0, parameter_count(m.stages[i].norm));
    if (i + 1 < kNumStages) {
      const std::uint64_t out = size / 2;
      rep.add("downsamples." + std::to_string(i), detail::conv_macs(out, out, 3, c, cfg.stages[i + 1].channels),
              parameter_count(m.downsamples[i]));
    }
  }
  rep.add("head", cfg.stages[3].channels * cfg.num_classes, m.head_w.size() + m.head_b.size());
  return rep;
}

}  // namespace dat
