#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "dat/params.hpp"
#include "dat/tensor.hpp"

namespace dat {

// Query/key/value/output projections shared by every attention flavour. All C x C with biases.
struct AttnProjections {
  Tensor wq, bq, wk, wv, bv, wo, bo;  // keys carry no bias: softmax would cancel it

  std::size_t channels() const { return wq.empty() ? 0 : wq.dim(0); }

  template <class F>
  void visit(F&& f) {
    visit_tensor(wq, "wq", f);
    visit_tensor(bq, "bq", f);
    visit_tensor(wk, "wk", f);
    visit_tensor(wv, "wv", f);
    visit_tensor(bv, "bv", f);
    visit_tensor(wo, "wo", f);
    visit_tensor(bo, "bo", f);
  }
};

inline AttnProjections make_attn_projections(std::size_t channels, Initializer& init) {
  AttnProjections p;
  p.wq = init.trunc_normal({channels, channels});
  p.bq = Initializer::zeros({channels});
  p.wk = init.trunc_normal({channels, channels});
  p.wv = init.trunc_normal({channels, channels});
  p.bv = Initializer::zeros({channels});
  p.wo = init.trunc_normal({channels, channels});
  p.bo = Initializer::zeros({channels});
  return p;
}

inline void check_heads(std::size_t channels, std::size_t heads, const char* who) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError(std::string(who) + ": channels " + std::to_string(channels) + " not divisible by heads " +
                      std::to_string(heads));
  }
}

// Scaled dot-product attention over token sequences.
// q: B x Nq x C, k and v: B x Nk x C. `bias` is empty, M x Nq x Nk (shared over the batch),
// or B x M x Nq x Nk. Returns B x Nq x C and writes the attention map B x M x Nq x Nk.
inline Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, const Tensor& bias,
                             Tensor& attn) {
  const std::size_t b = q.dim(0), nq = q.dim(1), c = q.dim(2), nk = k.dim(1);
  check_heads(c, heads, "attention");
  if (k.shape() != Shape{b, nk, c} || v.shape() != k.shape()) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
  }
  const bool batched_bias = bias.rank() == 4;
  if (!bias.empty() && bias.shape() != Shape{heads, nq, nk} && bias.shape() != Shape{b, heads, nq, nk}) {
    throw DimensionError("attention: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(heads) +
                         " heads x " + std::to_string(nq) + " x " + std::to_string(nk));
  }
  const std::size_t d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  attn = Tensor({b, heads, nq, nk});
  Tensor out({b, nq, c});
  std::vector<double> row(nk);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t m = 0; m < heads; ++m) {
      for (std::size_t i = 0; i < nq; ++i) {
        const double* qi = q.data() + (n * nq + i) * c + m * d;
        const double* brow = bias.empty() ? nullptr
                             : batched_bias ? bias.data() + ((n * heads + m) * nq + i) * nk
                                            : bias.data() + (m * nq + i) * nk;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < nk; ++j) {
          const double* kj = k.data() + (n * nk + j) * c + m * d;
          double s = 0.0;
          for (std::size_t t = 0; t < d; ++t) s += qi[t] * kj[t];
          s *= scale;
          if (brow) s += brow[j];
          row[j] = s;
          mx = std::max(mx, s);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < nk; ++j) sum += (row[j] = std::exp(row[j] - mx));
        double* a = attn.data() + ((n * heads + m) * nq + i) * nk;
        double* o = out.data() + (n * nq + i) * c + m * d;
        for (std::size_t j = 0; j < nk; ++j) {
          a[j] = row[j] / sum;
          const double* vj = v.data() + (n * nk + j) * c + m * d;
          for (std::size_t t = 0; t < d; ++t) o[t] += a[j] * vj[t];
        }
      }
    }
  }
  ensure_finite(out, "attention");
  return out;
}

struct AttentionGrads {
  Tensor q, k, v;
  Tensor bias;  // B x M x Nq x Nk: gradient of the pre-softmax scores
};

inline AttentionGrads attention_core_backward(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                              const Tensor& attn, const Tensor& grad_out) {
  const std::size_t b = q.dim(0), nq = q.dim(1), c = q.dim(2), nk = k.dim(1), d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionGrads g{Tensor(q.shape()), Tensor(k.shape()), Tensor(v.shape()), Tensor(attn.shape())};
  std::vector<double> ga(nk);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t m = 0; m < heads; ++m) {
      for (std::size_t i = 0; i < nq; ++i) {
        const double* a = attn.data() + ((n * heads + m) * nq + i) * nk;
        const double* go = grad_out.data() + (n * nq + i) * c + m * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          const double* vj = v.data() + (n * nk + j) * c + m * d;
          double* gvj = g.v.data() + (n * nk + j) * c + m * d;
          double s = 0.0;
          for (std::size_t t = 0; t < d; ++t) {
            s += go[t] * vj[t];
            gvj[t] += a[j] * go[t];
          }
          ga[j] = s;
          dot += s * a[j];
        }
        const double* qi = q.data() + (n * nq + i) * c + m * d;
        double* gqi = g.q.data() + (n * nq + i) * c + m * d;
        double* gs = g.bias.data() + ((n * heads + m) * nq + i) * nk;
        for (std::size_t j = 0; j < nk; ++j) {
          const double s = a[j] * (ga[j] - dot);
          gs[j] = s;
          const double* kj = k.data() + (n * nk + j) * c + m * d;
          double* gkj = g.k.data() + (n * nk + j) * c + m * d;
          const double ss = s * scale;
          for (std::size_t t = 0; t < d; ++t) {
            gqi[t] += ss * kj[t];
            gkj[t] += ss * qi[t];
          }
        }
      }
    }
  }
  return g;
}

// Vanilla multi-head self-attention over all H*W tokens of x (B x H x W x C).
// `bias`, when given, is M x HW x HW and added to the scaled scores.
inline Tensor mhsa_forward(const AttnProjections& w, const Tensor& x, std::size_t heads, const Tensor& bias = Tensor()) {
  if (x.rank() != 4) throw DimensionError("mhsa: input must be B x H x W x C, got " + shape_str(x.shape()));
  check_heads(x.dim(3), heads, "mhsa");
  const std::size_t b = x.dim(0), n = x.dim(1) * x.dim(2), c = x.dim(3);
  const Tensor tokens = x.reshaped({b, n, c});
  const Tensor q = linear(tokens, w.wq, w.bq);
  const Tensor k = linear(tokens, w.wk, Tensor());
  const Tensor v = linear(tokens, w.wv, w.bv);
  Tensor attn;
  const Tensor z = attention_core(q, k, v, heads, bias, attn);
  return linear(z, w.wo, w.bo).reshaped(x.shape());
}

}  // namespace dat
