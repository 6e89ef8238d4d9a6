#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "dat/tensor.hpp"

namespace dat {

// Normalized coordinates use the cell-center convention: pixel j of an n-wide axis sits at
// u = 2 (j + 0.5) / n - 1, so (-1, -1) is the top-left corner of the map and (+1, +1) the
// bottom-right corner. Grids always store (x, y): x runs along width, y along height.

inline double normalize(double pixel, std::size_t n) { return 2.0 * (pixel + 0.5) / static_cast<double>(n) - 1.0; }

inline double denormalize(double u, std::size_t n) { return (u + 1.0) * 0.5 * static_cast<double>(n) - 0.5; }

// Uniform h_g x w_g lattice of reference points, shape h_g x w_g x 2.
inline Tensor reference_grid(std::size_t h_g, std::size_t w_g) {
  if (h_g == 0 || w_g == 0) throw ConfigError("reference_grid: grid dims must be positive");
  Tensor grid({h_g, w_g, 2});
  for (std::size_t i = 0; i < h_g; ++i) {
    for (std::size_t j = 0; j < w_g; ++j) {
      grid[(i * w_g + j) * 2 + 0] = normalize(static_cast<double>(j), w_g);
      grid[(i * w_g + j) * 2 + 1] = normalize(static_cast<double>(i), h_g);
    }
  }
  return grid;
}

inline Tensor clip_locations(const Tensor& locations) {
  Tensor out(locations.shape());
  for (std::size_t i = 0; i < locations.size(); ++i) out[i] = std::clamp(locations[i], -1.0, 1.0);
  return out;
}

// Gradient passes where the pre-clip value was inside [-1, 1], zero where it was clamped.
inline Tensor clip_locations_backward(const Tensor& unclipped, const Tensor& grad_out) {
  if (unclipped.shape() != grad_out.shape()) throw DimensionError("clip_locations_backward: shape mismatch");
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::abs(unclipped[i]) <= 1.0 ? grad_out[i] : 0.0;
  return g;
}

namespace detail {

// The (up to) four lattice neighbours of one sample point with their weights g(a, b) = max(0, 1 - |a - b|).
// Neighbours that fall outside the map are flagged and contribute zero (zero padding).
struct BilinearTap {
  long x0, y0;
  double fx, fy;  // fractional offsets in [0, 1)
  bool in_x0, in_x1, in_y0, in_y1;
  double scale_x, scale_y;  // d pixel / d normalized coordinate

  BilinearTap(double u, double v, std::size_t w, std::size_t h) {
    const double px = denormalize(u, w);
    const double py = denormalize(v, h);
    const double flx = std::floor(px), fly = std::floor(py);
    x0 = static_cast<long>(flx);
    y0 = static_cast<long>(fly);
    fx = px - flx;
    fy = py - fly;
    in_x0 = x0 >= 0 && x0 < static_cast<long>(w);
    in_x1 = x0 + 1 >= 0 && x0 + 1 < static_cast<long>(w);
    in_y0 = y0 >= 0 && y0 < static_cast<long>(h);
    in_y1 = y0 + 1 >= 0 && y0 + 1 < static_cast<long>(h);
    scale_x = 0.5 * static_cast<double>(w);
    scale_y = 0.5 * static_cast<double>(h);
  }

  // Corner c in {0,1,2,3} = (y0,x0), (y0,x1), (y1,x0), (y1,x1).
  bool valid(int c) const { return ((c & 2) ? in_y1 : in_y0) && ((c & 1) ? in_x1 : in_x0); }
  long cx(int c) const { return x0 + (c & 1); }
  long cy(int c) const { return y0 + ((c >> 1) & 1); }
  double weight(int c) const { return ((c & 1) ? fx : 1.0 - fx) * ((c & 2) ? fy : 1.0 - fy); }
  // d weight / d px and d weight / d py.
  double dweight_dx(int c) const { return ((c & 1) ? 1.0 : -1.0) * ((c & 2) ? fy : 1.0 - fy); }
  double dweight_dy(int c) const { return ((c & 1) ? fx : 1.0 - fx) * ((c & 2) ? 1.0 : -1.0); }
};

struct GridGeometry {
  std::size_t batch, groups, hg, wg;
};

inline GridGeometry grouped_grid_geometry(const Tensor& z, const Tensor& grid) {
  if (z.rank() != 4) throw DimensionError("bilinear_sample: input must be B x H x W x C, got " + shape_str(z.shape()));
  GridGeometry g{};
  if (grid.rank() == 4 && grid.dim(3) == 2) {
    g = {grid.dim(0), 1, grid.dim(1), grid.dim(2)};
  } else if (grid.rank() == 5 && grid.dim(4) == 2) {
    g = {grid.dim(0), grid.dim(1), grid.dim(2), grid.dim(3)};
  } else {
    throw DimensionError("bilinear_sample: grid must be B x Hg x Wg x 2 or B x G x Hg x Wg x 2, got " +
                         shape_str(grid.shape()));
  }
  if (g.batch != z.dim(0)) {
    throw DimensionError("bilinear_sample: batch of grid " + shape_str(grid.shape()) + " vs input " + shape_str(z.shape()));
  }
  if (z.dim(3) % g.groups != 0) {
    throw ConfigError("bilinear_sample: channels " + std::to_string(z.dim(3)) + " not divisible by groups " +
                      std::to_string(g.groups));
  }
  return g;
}

}  // namespace detail

// Samples z (B x H x W x C) at normalized grid locations. The grid is either B x Hg x Wg x 2,
// or B x G x Hg x Wg x 2 in which case channel block g of the output is sampled at group g's
// locations. Output is B x Hg x Wg x C.
inline Tensor bilinear_sample(const Tensor& z, const Tensor& grid) {
  const auto gg = detail::grouped_grid_geometry(z, grid);
  const std::size_t h = z.dim(1), w = z.dim(2), c = z.dim(3), cg = c / gg.groups;
  Tensor out({gg.batch, gg.hg, gg.wg, c});
  for (std::size_t b = 0; b < gg.batch; ++b) {
    for (std::size_t g = 0; g < gg.groups; ++g) {
      for (std::size_t p = 0; p < gg.hg * gg.wg; ++p) {
        const double* loc = grid.data() + ((b * gg.groups + g) * gg.hg * gg.wg + p) * 2;
        const detail::BilinearTap tap(loc[0], loc[1], w, h);
        double* o = out.data() + (b * gg.hg * gg.wg + p) * c + g * cg;
        for (int corner = 0; corner < 4; ++corner) {
          if (!tap.valid(corner)) continue;
          const double wt = tap.weight(corner);
          if (wt == 0.0) continue;
          const double* zi = z.data() + ((b * h + tap.cy(corner)) * w + tap.cx(corner)) * c + g * cg;
          for (std::size_t k = 0; k < cg; ++k) o[k] += wt * zi[k];
        }
      }
    }
  }
  ensure_finite(out, "bilinear_sample");
  return out;
}

struct BilinearGrads {
  Tensor input;
  Tensor grid;
};

inline BilinearGrads bilinear_sample_backward(const Tensor& z, const Tensor& grid, const Tensor& grad_out) {
  const auto gg = detail::grouped_grid_geometry(z, grid);
  const std::size_t h = z.dim(1), w = z.dim(2), c = z.dim(3), cg = c / gg.groups;
  if (grad_out.shape() != Shape{gg.batch, gg.hg, gg.wg, c}) {
    throw DimensionError("bilinear_sample_backward: grad " + shape_str(grad_out.shape()) + " does not match output");
  }
  BilinearGrads r{Tensor(z.shape()), Tensor(grid.shape())};
  for (std::size_t b = 0; b < gg.batch; ++b) {
    for (std::size_t g = 0; g < gg.groups; ++g) {
      for (std::size_t p = 0; p < gg.hg * gg.wg; ++p) {
        const std::size_t loff = ((b * gg.groups + g) * gg.hg * gg.wg + p) * 2;
        const detail::BilinearTap tap(grid[loff], grid[loff + 1], w, h);
        const double* go = grad_out.data() + (b * gg.hg * gg.wg + p) * c + g * cg;
        double dpx = 0.0, dpy = 0.0;
        for (int corner = 0; corner < 4; ++corner) {
          if (!tap.valid(corner)) continue;
          const std::size_t zoff = ((b * h + tap.cy(corner)) * w + tap.cx(corner)) * c + g * cg;
          const double* zi = z.data() + zoff;
          double* gzi = r.input.data() + zoff;
          const double wt = tap.weight(corner);
          double dot = 0.0;
          for (std::size_t k = 0; k < cg; ++k) {
            gzi[k] += wt * go[k];
            dot += go[k] * zi[k];
          }
          dpx += tap.dweight_dx(corner) * dot;
          dpy += tap.dweight_dy(corner) * dot;
        }
        r.grid[loff] = dpx * tap.scale_x;
        r.grid[loff + 1] = dpy * tap.scale_y;
      }
    }
  }
  return r;
}

}  // namespace dat
