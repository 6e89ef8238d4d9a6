#pragma once

#include <cstddef>
#include <ostream>
#include <vector>

#include "dat/dmha.hpp"
#include "dat/sampling.hpp"
#include "dat/tensor.hpp"

namespace dat {

// Accumulated key importance of one DMHA layer for one image.
struct LayerImportance {
  std::size_t height = 0, width = 0;  // the layer's query map
  std::size_t groups = 0, grid_h = 0, grid_w = 0;
  Tensor key_locations;  // G x Hg x Wg x 2, normalized (x, y)
  Tensor scores;         // G x Hg x Wg, non-negative, sums to 1
};

struct ImportanceMap {
  std::vector<LayerImportance> layers;  // depth order, same as the input traces
};

namespace detail {

// Importance of query positions (H x W, sums to 1) carried over from a map of another size by
// giving each position the weight of the cell it falls in, then renormalizing.
inline std::vector<double> transport_weights(const std::vector<double>& src, std::size_t sh, std::size_t sw,
                                             std::size_t h, std::size_t w) {
  if (sh == h && sw == w) return src;
  std::vector<double> out(h * w);
  double total = 0.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t cy = std::min(sh - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * sh / h));
      const std::size_t cx = std::min(sw - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * sw / w));
      total += (out[y * w + x] = src[cy * sw + cx]);
    }
  for (auto& v : out) v = total > 0.0 ? v / total : 1.0 / static_cast<double>(h * w);
  return out;
}

inline void normalize_or_uniform(std::vector<double>& v) {
  double total = 0.0;
  for (double x : v) total += x;
  for (auto& x : v) x = total > 0.0 ? x / total : 1.0 / static_cast<double>(v.size());
}

}  // namespace detail

// Starting from the deepest layer with every query weighted equally, each layer's keys are
// scored by the weighted attention they receive (averaged over heads). The key scores are
// then spread onto the layer's input positions with the bilinear sampling weights, and that
// position weighting becomes the query weighting of the previous layer.
inline ImportanceMap importance_map(const std::vector<const DmhaTrace*>& traces, std::size_t batch_index = 0) {
  if (traces.empty()) throw ArgumentError("importance_map: no traces");
  ImportanceMap map;
  map.layers.resize(traces.size());
  std::vector<double> query_weights;
  std::size_t prev_h = 0, prev_w = 0;
  for (std::size_t l = traces.size(); l-- > 0;) {
    const DmhaTrace& tr = *traces[l];
    const Tensor& attn = tr.attention;
    const Tensor& grid = tr.sample_grid;
    if (attn.rank() != 4 || grid.rank() != 5 || batch_index >= attn.dim(0)) {
      throw ArgumentError("importance_map: malformed trace at layer " + std::to_string(l));
    }
    const std::size_t h = tr.height, w = tr.width, hw = h * w;
    const std::size_t heads = attn.dim(1), ns = attn.dim(3), groups = grid.dim(1);
    const std::size_t hg = grid.dim(2), wg = grid.dim(3);
    if (attn.dim(2) != hw || hg * wg != ns || heads % groups != 0) {
      throw ArgumentError("importance_map: inconsistent trace shapes at layer " + std::to_string(l));
    }
    if (query_weights.empty()) {
      query_weights.assign(hw, 1.0 / static_cast<double>(hw));
    } else {
      query_weights = detail::transport_weights(query_weights, prev_h, prev_w, h, w);
    }

    LayerImportance& li = map.layers[l];
    li.height = h;
    li.width = w;
    li.groups = groups;
    li.grid_h = hg;
    li.grid_w = wg;
    li.key_locations = Tensor({groups, hg, wg, 2});
    std::copy_n(grid.data() + batch_index * groups * ns * 2, groups * ns * 2, li.key_locations.data());
    li.scores = Tensor({groups, hg, wg});
    const std::size_t hpg = heads / groups;
    for (std::size_t m = 0; m < heads; ++m) {
      const std::size_t g = m / hpg;
      for (std::size_t i = 0; i < hw; ++i) {
        const double wi = query_weights[i] / static_cast<double>(heads);
        const double* row = attn.data() + ((batch_index * heads + m) * hw + i) * ns;
        for (std::size_t j = 0; j < ns; ++j) li.scores[g * ns + j] += wi * row[j];
      }
    }

    // Spread key scores onto the input positions they were sampled from.
    std::vector<double> pos(hw, 0.0);
    for (std::size_t k = 0; k < groups * ns; ++k) {
      const detail::BilinearTap tap(li.key_locations[k * 2], li.key_locations[k * 2 + 1], w, h);
      for (int corner = 0; corner < 4; ++corner)
        if (tap.valid(corner)) pos[tap.cy(corner) * w + tap.cx(corner)] += tap.weight(corner) * li.scores[k];
    }
    detail::normalize_or_uniform(pos);
    query_weights = std::move(pos);
    prev_h = h;
    prev_w = w;
  }
  return map;
}

// Attention rows of every head for the query at (row, col): M x Ns.
inline Tensor query_attention(const DmhaTrace& tr, std::size_t row, std::size_t col, std::size_t batch_index = 0) {
  if (row >= tr.height || col >= tr.width) {
    throw ArgumentError("query (" + std::to_string(row) + "," + std::to_string(col) + ") outside " +
                        std::to_string(tr.height) + "x" + std::to_string(tr.width) + " map");
  }
  const std::size_t heads = tr.attention.dim(1), hw = tr.attention.dim(2), ns = tr.attention.dim(3);
  Tensor out({heads, ns});
  const std::size_t i = row * tr.width + col;
  for (std::size_t m = 0; m < heads; ++m)
    std::copy_n(tr.attention.data() + ((batch_index * heads + m) * hw + i) * ns, ns, out.data() + m * ns);
  return out;
}

// One `x y score` line per deformed key.
inline void write_importance(const LayerImportance& li, std::ostream& os) {
  const auto old = os.precision(17);
  for (std::size_t k = 0; k < li.scores.size(); ++k) {
    os << li.key_locations[k * 2] << ' ' << li.key_locations[k * 2 + 1] << ' ' << li.scores[k] << '\n';
  }
  os.precision(old);
}

}  // namespace dat
