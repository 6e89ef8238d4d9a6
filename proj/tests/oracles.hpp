#pragma once

// Straightforward reference implementations, written from the definitions with no shared code
// paths with the library kernels.

#include <cmath>
#include <vector>

#include "dat/tensor.hpp"

namespace oracle {

using dat::Tensor;

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += a.at({i, k}) * b.at({k, j});
      c.at({i, j}) = s;
    }
  return c;
}

// x: B x H x W x Cin, w: k x k x (Cin/groups) x Cout.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad,
                     std::size_t groups) {
  const std::size_t b = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const std::size_t k = w.dim(0), cout = w.dim(3), cin_g = cin / groups, cout_g = cout / groups;
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor out({b, oh, ow, cout});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t co = 0; co < cout; ++co) {
          const std::size_t g = co / cout_g;
          double s = bias.empty() ? 0.0 : bias[co];
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
              for (std::size_t ci = 0; ci < cin_g; ++ci)
                s += x.at({n, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), g * cin_g + ci}) *
                     w.at({ky, kx, ci, co});
            }
          out.at({n, oy, ox, co}) = s;
        }
  return out;
}

// Bilinear value of an H x W x C map (batch `n`) at normalized (u, v), zero outside.
inline double bilinear(const Tensor& z, std::size_t n, std::size_t c, double u, double v) {
  const double px = (u + 1.0) / 2.0 * static_cast<double>(z.dim(2)) - 0.5;
  const double py = (v + 1.0) / 2.0 * static_cast<double>(z.dim(1)) - 0.5;
  double s = 0.0;
  for (long y = static_cast<long>(std::floor(py)); y <= static_cast<long>(std::floor(py)) + 1; ++y)
    for (long x = static_cast<long>(std::floor(px)); x <= static_cast<long>(std::floor(px)) + 1; ++x) {
      if (y < 0 || x < 0 || y >= static_cast<long>(z.dim(1)) || x >= static_cast<long>(z.dim(2))) continue;
      const double wgt = std::max(0.0, 1.0 - std::abs(px - x)) * std::max(0.0, 1.0 - std::abs(py - y));
      s += wgt * z.at({n, static_cast<std::size_t>(y), static_cast<std::size_t>(x), c});
    }
  return s;
}

// Multi-head self-attention over the H*W tokens of x (B x H x W x C). Weights are C x C,
// biases C (an empty key bias means none). `bias` (M x N x N, optional) is added to the logits.
inline Tensor mhsa(const Tensor& x, const Tensor& wq, const Tensor& bq, const Tensor& wk, const Tensor& wv,
                   const Tensor& bv, const Tensor& wo, const Tensor& bo, std::size_t heads,
                   const Tensor& bias = Tensor()) {
  const std::size_t b = x.dim(0), n = x.dim(1) * x.dim(2), c = x.dim(3), d = c / heads;
  auto project = [&](const Tensor& w, const Tensor& bb, std::size_t batch) {
    std::vector<double> out(n * c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < c; ++o) {
        double s = bb.empty() ? 0.0 : bb[o];
        for (std::size_t k = 0; k < c; ++k) s += x[(batch * n + i) * c + k] * w.at({k, o});
        out[i * c + o] = s;
      }
    return out;
  };
  Tensor y(x.shape());
  for (std::size_t bi = 0; bi < b; ++bi) {
    const auto q = project(wq, bq, bi), k = project(wk, Tensor(), bi), v = project(wv, bv, bi);
    std::vector<double> heads_out(n * c, 0.0);
    for (std::size_t m = 0; m < heads; ++m)
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> logits(n);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t t = 0; t < d; ++t) s += q[i * c + m * d + t] * k[j * c + m * d + t];
          logits[j] = s / std::sqrt(static_cast<double>(d)) + (bias.empty() ? 0.0 : bias.at({m, i, j}));
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t t = 0; t < d; ++t) heads_out[i * c + m * d + t] += logits[j] / z * v[j * c + m * d + t];
      }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < c; ++o) {
        double s = bo[o];
        for (std::size_t k2 = 0; k2 < c; ++k2) s += heads_out[i * c + k2] * wo.at({k2, o});
        y[(bi * n + i) * c + o] = s;
      }
  }
  return y;
}

}  // namespace oracle
