#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dat/params.hpp"
#include "dat/tensor.hpp"

namespace dat {

// A set of tensors checked together. Coordinates are drawn from the concatenation of all
// member tensors; `gradients[i]` holds the analytic gradient for `values[i]`.
struct GradBlock {
  std::string name;
  std::vector<Tensor*> values;
  std::vector<const Tensor*> gradients;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto* t : values) n += t->size();
    return n;
  }
};

// How a block's sampled coordinates are judged: every coordinate on its own, or the sampled
// gradient vector as a whole (||a - n|| / max(||a||, ||n||)), which is not swayed by single
// coordinates whose gradient is at the level of the loss's rounding noise.
enum class ErrorMetric { coordinate, block_norm };

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  ErrorMetric metric = ErrorMetric::coordinate;
  std::size_t samples_per_block = 64;  // every coordinate is checked when the block is smaller
  std::uint64_t seed = 0;
};

struct BlockResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;  // worst single coordinate
  double norm_rel_error = 0.0;
  double analytic = 0.0;  // at the worst coordinate
  double numeric = 0.0;
  double tolerance = 0.0;
  ErrorMetric metric = ErrorMetric::coordinate;

  double error() const { return metric == ErrorMetric::coordinate ? max_rel_error : norm_rel_error; }
  bool passed = true;
};

struct GradCheckReport {
  std::vector<BlockResult> blocks;

  bool passed() const {
    return std::all_of(blocks.begin(), blocks.end(), [](const BlockResult& b) { return b.passed; });
  }

  const BlockResult* worst() const {
    const BlockResult* w = nullptr;
    for (const auto& b : blocks)
      if (!w || b.error() / b.tolerance > w->error() / w->tolerance) w = &b;
    return w;
  }

  void append(const GradCheckReport& other) { blocks.insert(blocks.end(), other.blocks.begin(), other.blocks.end()); }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// One block per parameter tensor.
inline std::vector<GradBlock> blocks_per_tensor(const std::vector<ParamRef>& params, const std::string& prefix = "") {
  std::vector<GradBlock> out;
  for (const auto& p : params) out.push_back({prefix + p.name, {p.value}, {p.gradient}});
  return out;
}

// Parameters grouped by the first `depth` components of their dotted path.
inline std::vector<GradBlock> blocks_by_prefix(const std::vector<ParamRef>& params, std::size_t depth) {
  std::vector<GradBlock> out;
  for (const auto& p : params) {
    std::size_t pos = std::string::npos, from = 0;
    for (std::size_t d = 0; d < depth; ++d) {
      pos = p.name.find('.', from);
      if (pos == std::string::npos) break;
      from = pos + 1;
    }
    const std::string key = pos == std::string::npos ? p.name : p.name.substr(0, pos);
    if (out.empty() || out.back().name != key) out.push_back({key, {}, {}});
    out.back().values.push_back(p.value);
    out.back().gradients.push_back(p.gradient);
  }
  return out;
}

// Central-difference check of analytic gradients. `loss` is re-evaluated with single
// coordinates perturbed in place by +-step; every value is restored afterwards.
inline GradCheckReport grad_check(const std::function<double()>& loss, const std::vector<GradBlock>& blocks,
                                  const GradCheckOptions& opt) {
  GradCheckReport rep;
  std::mt19937_64 rng(opt.seed);
  for (const auto& blk : blocks) {
    BlockResult res;
    res.name = blk.name;
    res.tolerance = opt.tolerance;
    res.metric = opt.metric;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    const std::size_t n = blk.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > opt.samples_per_block) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.samples_per_block);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t flat : coords) {
      std::size_t t = 0;
      while (flat >= blk.values[t]->size()) flat -= blk.values[t++]->size();
      double& v = (*blk.values[t])[flat];
      const double saved = v;
      v = saved + opt.step;
      const double fp = loss();
      v = saved - opt.step;
      const double fm = loss();
      v = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: non-finite loss while perturbing " + blk.name);
      }
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double analytic = (*blk.gradients[t])[flat];
      const double err = relative_error(analytic, numeric);
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      if (res.checked == 0 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.analytic = analytic;
        res.numeric = numeric;
      }
      ++res.checked;
    }
    res.norm_rel_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    res.passed = res.error() <= opt.tolerance;
    rep.blocks.push_back(std::move(res));
  }
  return rep;
}

}  // namespace dat
