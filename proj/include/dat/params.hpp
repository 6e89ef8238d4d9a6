#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dat/tensor.hpp"

namespace dat {

// Parameterized modules expose `template <class F> void visit(F&& f)` which calls
// f(const std::string& name, Tensor& t) once per parameter tensor, in a fixed order.
// Absent (empty) tensors are skipped.

namespace detail {

inline std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace detail

// Visit `child` with every parameter name prefixed by `prefix`.
template <class M, class F>
void visit_child(M& child, const std::string& prefix, F&& f) {
  child.visit([&](const std::string& name, Tensor& t) { f(detail::join_path(prefix, name), t); });
}

// Visits a single tensor if present.
template <class F>
void visit_tensor(Tensor& t, const std::string& name, F&& f) {
  if (!t.empty()) f(name, t);
}

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

template <class M>
std::vector<NamedTensor> named_parameters(M& module) {
  std::vector<NamedTensor> out;
  module.visit([&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

template <class M>
std::vector<NamedTensor> named_parameters(const M& module) {
  return named_parameters(const_cast<M&>(module));
}

template <class M>
std::size_t parameter_count(const M& module) {
  std::size_t n = 0;
  for (const auto& p : named_parameters(module)) n += p.tensor->size();
  return n;
}

// Same structure as `module`, every parameter zeroed. Used as a gradient accumulator.
template <class M>
M zeros_like(const M& module) {
  M copy = module;
  copy.visit([](const std::string&, Tensor& t) { t.fill(0.0); });
  return copy;
}

// A parameter paired with its gradient slot.
struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* gradient;
};

template <class M>
std::vector<ParamRef> bind_gradients(M& module, M& grads) {
  auto values = named_parameters(module);
  auto slots = named_parameters(grads);
  if (values.size() != slots.size()) throw StateError("bind_gradients: parameter and gradient structures differ");
  std::vector<ParamRef> out;
  out.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].name != slots[i].name || values[i].tensor->shape() != slots[i].tensor->shape()) {
      throw StateError("bind_gradients: mismatch at " + values[i].name);
    }
    out.push_back({values[i].name, values[i].tensor, slots[i].tensor});
  }
  return out;
}

// Seeded parameter initializer. Draws are consumed in construction order, so the same
// seed and configuration reproduce identical parameters.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  // Normal(0, std) truncated to +-2 std by resampling.
  Tensor trunc_normal(Shape shape, double std = 0.02) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.values()) {
      double s;
      do {
        s = dist(rng_);
      } while (std::abs(s) > 2.0);
      v = s * std;
    }
    return t;
  }

  Tensor uniform(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.values()) v = dist(rng_);
    return t;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace dat
