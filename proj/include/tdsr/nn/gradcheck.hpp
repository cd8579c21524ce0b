#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "tdsr/nn/module.hpp"
#include "tdsr/rng.hpp"

namespace tdsr::nn {

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  /// Denominator floor so near-zero gradients are compared absolutely.
  double abs_floor = 1e-6;
  /// Coordinates sampled per tensor; 0 checks every coordinate.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = true;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

inline std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_coords == 0 || max_coords >= n) return idx;
  for (std::size_t i = 0; i < max_coords; ++i)
    std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(max_coords);
  return idx;
}

inline void record(GradCheckReport& r, double analytic, double numeric, double floor) {
  const double e = relative_error(analytic, numeric, floor);
  ++r.checked;
  if (e > r.max_relative_error || !std::isfinite(e)) {
    r.max_relative_error = std::isfinite(e) ? e : INFINITY;
    r.analytic_at_worst = analytic;
    r.numeric_at_worst = numeric;
  }
}

}  // namespace detail

/// Scalar function of a flat input. When `grad` is non-null it must be
/// filled with the analytic gradient.
using ScalarFn = std::function<double(std::span<const double> x, std::vector<double>* grad)>;

/// Central finite differences against the analytic gradient of `fn` at x.
inline GradCheckReport grad_check(const ScalarFn& fn, std::vector<double> x,
                                  const GradCheckOptions& opt = {}) {
  std::vector<double> analytic;
  fn(x, &analytic);
  Rng rng(opt.seed);
  GradCheckReport r;
  for (std::size_t i : detail::pick_coords(x.size(), opt.max_coords, rng)) {
    const double saved = x[i];
    x[i] = saved + opt.step;
    const double up = fn(x, nullptr);
    x[i] = saved - opt.step;
    const double down = fn(x, nullptr);
    x[i] = saved;
    detail::record(r, analytic[i], (up - down) / (2.0 * opt.step), opt.abs_floor);
  }
  r.passed = r.max_relative_error <= opt.tolerance;
  return r;
}

/// Checks gradients of a loss with respect to parameters in place.
/// `evaluate` runs a forward pass and returns the loss; `backprop` runs
/// after one `evaluate` and accumulates parameter gradients.
inline GradCheckReport grad_check_params(const std::function<double()>& evaluate,
                                         const std::function<void()>& backprop,
                                         std::span<Param<double>* const> params,
                                         const GradCheckOptions& opt = {}) {
  for (auto* p : params) p->zero_grad();
  evaluate();
  backprop();
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  Rng rng(opt.seed);
  GradCheckReport r;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor<double>& v = params[t]->value;
    for (std::size_t i : detail::pick_coords(v.size(), opt.max_coords, rng)) {
      const double saved = v[i];
      v[i] = saved + opt.step;
      const double up = evaluate();
      v[i] = saved - opt.step;
      const double down = evaluate();
      v[i] = saved;
      detail::record(r, analytic[t][i], (up - down) / (2.0 * opt.step), opt.abs_floor);
    }
  }
  r.passed = r.max_relative_error <= opt.tolerance;
  return r;
}

}  // namespace tdsr::nn
