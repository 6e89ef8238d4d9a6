#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dat/backbone.hpp"
#include "dat/params.hpp"
#include "dat/tensor.hpp"

namespace dat {

struct Batch {
  Tensor images;                    // B x H x W x 3
  std::vector<std::size_t> labels;  // B
};

struct LossResult {
  double loss = 0.0;
  double accuracy = 0.0;
  Tensor grad_logits;
};

// Mean softmax cross-entropy over the batch, with its gradient w.r.t. the logits.
inline LossResult cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) throw DataError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(b));
  LossResult r;
  const Tensor p = softmax_lastdim(logits);
  r.grad_logits = p;
  std::size_t correct = 0;
  for (std::size_t n = 0; n < b; ++n) {
    if (labels[n] >= k) throw DataError("label " + std::to_string(labels[n]) + " out of range for " + std::to_string(k) + " classes");
    const double* row = logits.data() + n * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    r.loss += (std::log(s) + mx - row[labels[n]]) / static_cast<double>(b);
    const std::size_t pred = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    correct += pred == labels[n];
    r.grad_logits[n * k + labels[n]] -= 1.0;
  }
  r.grad_logits *= 1.0 / static_cast<double>(b);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(b);
  return r;
}

struct TrainOptions {
  std::size_t steps = 200;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;  // drop-path randomness
};

struct StepStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

// AdamW with decoupled weight decay. Decay applies to matrices and kernels (rank >= 2);
// biases, norm gains and bias tables are not decayed.
class AdamW {
 public:
  AdamW(const std::vector<ParamRef>& params, const TrainOptions& opt) : params_(params), opt_(opt) {
    for (const auto& p : params_) {
      m_.push_back(Tensor::zeros_like(*p.value));
      v_.push_back(Tensor::zeros_like(*p.value));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& w = *params_[i].value;
      const Tensor& g = *params_[i].gradient;
      const bool decay = w.rank() >= 2 && params_[i].name.find("rpb_table") == std::string::npos;
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * g[j];
        v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * g[j] * g[j];
        const double mhat = m_[i][j] / bc1, vhat = v_[i][j] / bc2;
        double update = mhat / (std::sqrt(vhat) + opt_.eps);
        if (decay) update += opt_.weight_decay * w[j];
        w[j] -= opt_.lr * update;
      }
    }
  }

 private:
  std::vector<ParamRef> params_;
  TrainOptions opt_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// Runs `opt.steps` optimizer steps; `next_batch(step)` supplies the data. Loss and accuracy
// are those of the forward pass taken before each update.
inline std::vector<StepStats> train_steps(Model& model, const std::function<const Batch&(std::size_t)>& next_batch,
                                          const TrainOptions& opt) {
  Model grads = zeros_like(model);
  const auto params = bind_gradients(model, grads);
  AdamW optimizer(params, opt);
  std::mt19937_64 rng(opt.seed);
  const RunMode mode{model.config.drop_path_max > 0.0 ? &rng : nullptr};
  std::vector<StepStats> history;
  history.reserve(opt.steps);
  for (std::size_t step = 0; step < opt.steps; ++step) {
    const Batch& batch = next_batch(step);
    for (const auto& p : params) p.gradient->fill(0.0);
    ModelCache cache;
    const Tensor logits = forward_logits(model, batch.images, &cache, mode);
    LossResult lr = cross_entropy(logits, batch.labels);
    model_backward(model, cache, lr.grad_logits, grads);
    optimizer.step();
    history.push_back({lr.loss, lr.accuracy});
  }
  return history;
}

// Two classes of Gaussian noise textures that differ only in spatial frequency: class 0 is
// smoothed with a wide Gaussian (coarse blobs), class 1 with a narrow one (fine grain). Each
// image is standardized, so per-image mean and variance carry no label information.
inline Batch make_texture_dataset(std::size_t count, std::size_t resolution, std::uint64_t seed) {
  Batch batch{Tensor({count, resolution, resolution, 3}), std::vector<std::size_t>(count)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t n = resolution;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % 2;
    batch.labels[i] = label;
    const double sigma = label == 0 ? 3.0 : 0.7;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double ks = 0.0;
    for (int t = -radius; t <= radius; ++t) ks += (kernel[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma)));
    for (auto& v : kernel) v /= ks;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      std::vector<double> img(n * n), tmp(n * n);
      for (auto& v : img) v = noise(rng);
      auto wrap = [n](long v) { return static_cast<std::size_t>((v % static_cast<long>(n) + static_cast<long>(n)) % static_cast<long>(n)); };
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          double s = 0.0;
          for (int t = -radius; t <= radius; ++t) s += kernel[t + radius] * img[y * n + wrap(static_cast<long>(x) + t)];
          tmp[y * n + x] = s;
        }
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          double s = 0.0;
          for (int t = -radius; t <= radius; ++t) s += kernel[t + radius] * tmp[wrap(static_cast<long>(y) + t) * n + x];
          img[y * n + x] = s;
        }
      double mean = 0.0, var = 0.0;
      for (double v : img) mean += v;
      mean /= static_cast<double>(n * n);
      for (double v : img) var += (v - mean) * (v - mean);
      const double inv = 1.0 / std::sqrt(var / static_cast<double>(n * n) + 1e-12);
      for (std::size_t p = 0; p < n * n; ++p) batch.images[(i * n * n + p) * 3 + ch] = (img[p] - mean) * inv;
    }
  }
  return batch;
}

}  // namespace dat
