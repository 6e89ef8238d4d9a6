#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dat/error.hpp"

namespace dat {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// Dense row-major tensor of doubles. Feature maps are laid out B x H x W x C.
// A default-constructed tensor has no shape and stands for "absent".
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor zeros_like(const Tensor& t) { return t.empty() ? Tensor() : Tensor(t.shape_, 0.0); }

  bool empty() const noexcept { return shape_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw DimensionError("axis " + std::to_string(i) + " out of range for " + shape_str(shape_));
    return shape_[i];
  }
  std::size_t size() const noexcept { return data_.size(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // Multi-index access, bounds-checked on rank only.
  double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  Tensor reshaped(Shape shape) const& {
    Tensor t = *this;
    return std::move(t).reshaped(std::move(shape));
  }
  Tensor reshaped(Shape shape) && {
    if (shape_numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data_);
    t.validate_shape();
    return t;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }

  bool operator==(const Tensor& o) const = default;

 private:
  void validate_shape() const {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("tensor shape " + shape_str(shape_) + " has a zero dimension");
    }
  }

  void require_same_shape(const Tensor& o, const char* op) const {
    if (shape_ != o.shape_) {
      throw DimensionError(std::string("shape mismatch in ") + op + ": " + shape_str(shape_) + " vs " +
                           shape_str(o.shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw DimensionError("index of rank " + std::to_string(idx.size()) + " for tensor " + shape_str(shape_));
    }
    std::size_t off = 0, k = 0;
    for (auto i : idx) off = off * shape_[k++] + i;
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

// A value paired with the gradient accumulated into it by backward passes.
struct DualTensor {
  Tensor value;
  Tensor gradient;

  DualTensor() = default;
  explicit DualTensor(Tensor v) : value(std::move(v)), gradient(Tensor::zeros_like(value)) {}

  void zero_grad() { gradient = Tensor::zeros_like(value); }
};

inline void ensure_finite(const Tensor& t, std::string_view where) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError("non-finite value " + std::to_string(t[i]) + " at flat index " + std::to_string(i) +
                         " in " + std::string(where));
    }
  }
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* br = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  ensure_finite(out, "matmul");
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

struct MatmulGrads {
  Tensor a;
  Tensor b;
};

inline MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& grad_out) {
  return {matmul(grad_out, transpose(b)), matmul(transpose(a), grad_out)};
}

// ---------------------------------------------------------------------------
// linear: y[..., n] = x[..., k] w[k x n] + bias[n]

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0), n = w.dim(1), rows = x.size() / k;
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != n)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match output width " + std::to_string(n));
  }
  Shape os = x.shape();
  os.back() = n;
  Tensor out(std::move(os));
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * n;
    if (!bias.empty()) std::copy_n(bias.data(), n, o);
    const double* xr = x.data() + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = xr[p];
      if (xv == 0.0) continue;
      const double* wr = w.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += xv * wr[j];
    }
  }
  ensure_finite(out, "linear");
  return out;
}

struct LinearGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

inline LinearGrads linear_backward(const Tensor& x, const Tensor& w, bool has_bias, const Tensor& grad_out) {
  const std::size_t k = w.dim(0), n = w.dim(1), rows = x.size() / k;
  if (grad_out.size() != rows * n) {
    throw DimensionError("linear_backward: grad " + shape_str(grad_out.shape()) + " vs input " + shape_str(x.shape()));
  }
  LinearGrads g{Tensor(x.shape()), Tensor(w.shape()), has_bias ? Tensor({n}) : Tensor()};
  for (std::size_t r = 0; r < rows; ++r) {
    const double* go = grad_out.data() + r * n;
    const double* xr = x.data() + r * k;
    double* gx = g.input.data() + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* wr = w.data() + p * n;
      double* gw = g.weight.data() + p * n;
      const double xv = xr[p];
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        acc += go[j] * wr[j];
        gw[j] += xv * go[j];
      }
      gx[p] = acc;
    }
    if (has_bias)
      for (std::size_t j = 0; j < n; ++j) g.bias[j] += go[j];
  }
  return g;
}

// ---------------------------------------------------------------------------
// softmax over the last axis

inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.empty()) throw DimensionError("softmax_lastdim: empty tensor");
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double* yr = y.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  ensure_finite(y, "softmax_lastdim");
  return y;
}

// y * (g - <g, y>) row by row.
inline Tensor softmax_backward(const Tensor& y, const Tensor& grad_out) {
  if (y.shape() != grad_out.shape()) throw DimensionError("softmax_backward: shape mismatch");
  const std::size_t n = y.shape().back(), rows = y.size() / n;
  Tensor gx(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y.data() + r * n;
    const double* gr = grad_out.data() + r * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
    for (std::size_t j = 0; j < n; ++j) gx[r * n + j] = yr[j] * (gr[j] - dot);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// layer normalization over the last axis

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Tensor normalized;          // (x - mean) * rstd
  std::vector<double> rstd;   // one per row
};

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps,
                         LayerNormCache* cache = nullptr) {
  if (x.empty() || gamma.rank() != 1 || gamma.dim(0) != x.shape().back() || beta.shape() != gamma.shape()) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                         " and beta " + shape_str(beta.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t c = x.shape().back(), rows = x.size() / c;
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xr[j] - mean) * rs;
      xhat[r * c + j] = h;
      y[r * c + j] = h * gamma[j] + beta[j];
    }
  }
  ensure_finite(y, "layer_norm");
  if (cache) *cache = {std::move(xhat), std::move(rstd)};
  return y;
}

struct LayerNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

inline LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma, const Tensor& grad_out) {
  const Tensor& xhat = cache.normalized;
  if (xhat.shape() != grad_out.shape()) throw StateError("layer_norm_backward: cache does not match gradient shape");
  const std::size_t c = gamma.dim(0), rows = xhat.size() / c;
  LayerNormGrads g{Tensor(xhat.shape()), Tensor({c}), Tensor({c})};
  const double inv_c = 1.0 / static_cast<double>(c);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* h = xhat.data() + r * c;
    const double* go = grad_out.data() + r * c;
    double sum_g = 0.0, sum_gh = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double gh = go[j] * gamma[j];
      sum_g += gh;
      sum_gh += gh * h[j];
      g.gamma[j] += go[j] * h[j];
      g.beta[j] += go[j];
    }
    const double rs = cache.rstd[r];
    for (std::size_t j = 0; j < c; ++j) {
      const double gh = go[j] * gamma[j];
      g.input[r * c + j] = rs * (gh - inv_c * sum_g - h[j] * inv_c * sum_gh);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// GELU, exact erf form

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

inline Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
  ensure_finite(y, "gelu");
  return y;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& grad_out) {
  if (x.shape() != grad_out.shape()) throw DimensionError("gelu_backward: shape mismatch");
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = grad_out[i] * gelu_grad_scalar(x[i]);
  return g;
}

// ---------------------------------------------------------------------------
// conv2d: grouped cross-correlation on B x H x W x C maps.
// Weight layout is k x k x (Cin / groups) x Cout.

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
  if (in + 2 * padding < k) {
    throw ConfigError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                      std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - k) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t batch, h, w, cin, k, cin_g, cout, cout_g, oh, ow, stride, pad, groups;
};

inline ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, const Conv2dParams& p) {
  if (x.rank() != 4) throw DimensionError("conv2d: input must be B x H x W x C, got " + shape_str(x.shape()));
  if (w.rank() != 4 || w.dim(0) != w.dim(1)) {
    throw DimensionError("conv2d: weight must be k x k x Cin/groups x Cout, got " + shape_str(w.shape()));
  }
  if (p.stride == 0 || p.groups == 0) throw ConfigError("conv2d: stride and groups must be positive");
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cin = x.dim(3);
  g.k = w.dim(0);
  g.cin_g = w.dim(2);
  g.cout = w.dim(3);
  g.groups = p.groups;
  g.stride = p.stride;
  g.pad = p.padding;
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ConfigError("conv2d: channels (" + std::to_string(g.cin) + " in, " + std::to_string(g.cout) +
                      " out) not divisible by groups " + std::to_string(g.groups));
  }
  if (g.cin / g.groups != g.cin_g) {
    throw DimensionError("conv2d: weight expects " + std::to_string(g.cin_g) + " input channels per group, input has " +
                         std::to_string(g.cin / g.groups));
  }
  g.cout_g = g.cout / g.groups;
  g.oh = conv_out_size(g.h, g.k, g.stride, g.pad);
  g.ow = conv_out_size(g.w, g.k, g.stride, g.pad);
  return g;
}

// Input coordinate for output index o and kernel tap t, or -1 when it falls in padding.
inline long conv_src(std::size_t o, std::size_t t, std::size_t stride, std::size_t pad, std::size_t n) {
  const long v = static_cast<long>(o * stride + t) - static_cast<long>(pad);
  return (v < 0 || v >= static_cast<long>(n)) ? -1 : v;
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dParams& p) {
  const auto g = detail::conv_geometry(x, w, p);
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match Cout " + std::to_string(g.cout));
  }
  Tensor out({g.batch, g.oh, g.ow, g.cout});
  const bool depthwise = g.cin_g == 1 && g.cout_g == 1;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        double* o = out.data() + ((b * g.oh + oy) * g.ow + ox) * g.cout;
        if (!bias.empty()) std::copy_n(bias.data(), g.cout, o);
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const long iy = detail::conv_src(oy, ky, g.stride, g.pad, g.h);
          if (iy < 0) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const long ix = detail::conv_src(ox, kx, g.stride, g.pad, g.w);
            if (ix < 0) continue;
            const double* xi = x.data() + ((b * g.h + iy) * g.w + ix) * g.cin;
            const double* wt = w.data() + (ky * g.k + kx) * g.cin_g * g.cout;
            if (depthwise) {
              for (std::size_t c = 0; c < g.cout; ++c) o[c] += xi[c] * wt[c];
              continue;
            }
            for (std::size_t grp = 0; grp < g.groups; ++grp) {
              for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
                const double xv = xi[grp * g.cin_g + ci];
                const double* wr = wt + ci * g.cout + grp * g.cout_g;
                double* og = o + grp * g.cout_g;
                for (std::size_t co = 0; co < g.cout_g; ++co) og[co] += xv * wr[co];
              }
            }
          }
        }
      }
    }
  }
  ensure_finite(out, "conv2d");
  return out;
}

struct Conv2dGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

inline Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& w, bool has_bias, const Conv2dParams& p,
                                   const Tensor& grad_out) {
  const auto g = detail::conv_geometry(x, w, p);
  if (grad_out.shape() != Shape{g.batch, g.oh, g.ow, g.cout}) {
    throw DimensionError("conv2d_backward: grad " + shape_str(grad_out.shape()) + " does not match output shape");
  }
  Conv2dGrads r{Tensor(x.shape()), Tensor(w.shape()), has_bias ? Tensor({g.cout}) : Tensor()};
  const bool depthwise = g.cin_g == 1 && g.cout_g == 1;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        const double* go = grad_out.data() + ((b * g.oh + oy) * g.ow + ox) * g.cout;
        if (has_bias)
          for (std::size_t c = 0; c < g.cout; ++c) r.bias[c] += go[c];
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const long iy = detail::conv_src(oy, ky, g.stride, g.pad, g.h);
          if (iy < 0) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const long ix = detail::conv_src(ox, kx, g.stride, g.pad, g.w);
            if (ix < 0) continue;
            const std::size_t xoff = ((b * g.h + iy) * g.w + ix) * g.cin;
            const double* xi = x.data() + xoff;
            double* gxi = r.input.data() + xoff;
            const std::size_t woff = (ky * g.k + kx) * g.cin_g * g.cout;
            const double* wt = w.data() + woff;
            double* gwt = r.weight.data() + woff;
            if (depthwise) {
              for (std::size_t c = 0; c < g.cout; ++c) {
                gxi[c] += wt[c] * go[c];
                gwt[c] += xi[c] * go[c];
              }
              continue;
            }
            for (std::size_t grp = 0; grp < g.groups; ++grp) {
              const double* gog = go + grp * g.cout_g;
              for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
                const double xv = xi[grp * g.cin_g + ci];
                const double* wr = wt + ci * g.cout + grp * g.cout_g;
                double* gwr = gwt + ci * g.cout + grp * g.cout_g;
                double acc = 0.0;
                for (std::size_t co = 0; co < g.cout_g; ++co) {
                  acc += wr[co] * gog[co];
                  gwr[co] += xv * gog[co];
                }
                gxi[grp * g.cin_g + ci] += acc;
              }
            }
          }
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// global average pooling: B x H x W x C -> B x C

inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool: expected B x H x W x C, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor out({b, c});
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      const double* xr = x.data() + (n * hw + p) * c;
      for (std::size_t j = 0; j < c; ++j) out[n * c + j] += xr[j];
    }
    for (std::size_t j = 0; j < c; ++j) out[n * c + j] *= inv;
  }
  return out;
}

inline Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out) {
  const std::size_t b = input_shape[0], hw = input_shape[1] * input_shape[2], c = input_shape[3];
  if (grad_out.shape() != Shape{b, c}) throw DimensionError("global_avg_pool_backward: grad shape mismatch");
  Tensor gx(input_shape);
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t j = 0; j < c; ++j) gx[(n * hw + p) * c + j] = grad_out[n * c + j] * inv;
  return gx;
}

}  // namespace dat
