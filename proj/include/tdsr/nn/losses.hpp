#pragma once

#include <algorithm>
#include <cmath>

#include "tdsr/tensor.hpp"

namespace tdsr::nn {

template <typename T>
struct LossValue {
  T value = T(0);
  Tensor<T> grad;  // d(value)/d(prediction)
};

/// Mean squared error, averaged over all elements.
template <typename T>
LossValue<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  pred.require_same_shape(target, "mse");
  LossValue<T> out{T(0), Tensor<T>(pred.shape())};
  const T inv = T(1) / static_cast<T>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    out.value += d * d;
    out.grad[i] = T(2) * d * inv;
  }
  out.value *= inv;
  return out;
}

/// Mean absolute error. The subgradient at zero residual is 0.
template <typename T>
LossValue<T> l1(const Tensor<T>& pred, const Tensor<T>& target) {
  pred.require_same_shape(target, "l1");
  LossValue<T> out{T(0), Tensor<T>(pred.shape())};
  const T inv = T(1) / static_cast<T>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    out.value += std::abs(d);
    out.grad[i] = (d > T(0) ? inv : (d < T(0) ? -inv : T(0)));
  }
  out.value *= inv;
  return out;
}

inline constexpr double kFocalClamp = 1e-7;

/// Mean over pixels of -a_t (1 - p_t)^gamma log(p_t), with p_t = p for
/// positive targets and 1 - p otherwise; a_t = alpha / (1 - alpha) likewise.
/// Predictions are clamped to [1e-7, 1 - 1e-7].
template <typename T>
LossValue<T> focal_loss(const Tensor<T>& pred, const Tensor<T>& target, double gamma,
                        double alpha) {
  pred.require_same_shape(target, "focal_loss");
  LossValue<T> out{T(0), Tensor<T>(pred.shape())};
  const double inv = 1.0 / static_cast<double>(pred.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double raw = static_cast<double>(pred[i]);
    const double p = std::clamp(raw, kFocalClamp, 1.0 - kFocalClamp);
    const bool clamped = p != raw;
    const bool positive = target[i] > T(0.5);
    const double pt = positive ? p : 1.0 - p;
    const double at = positive ? alpha : 1.0 - alpha;
    const double mod = std::pow(1.0 - pt, gamma);
    total += -at * mod * std::log(pt);
    double dpt = 0.0;
    if (!clamped) {
      // d/dpt of -at (1-pt)^g log(pt)
      const double dmod = gamma == 0.0 ? 0.0 : -gamma * std::pow(1.0 - pt, gamma - 1.0);
      dpt = -at * (dmod * std::log(pt) + mod / pt);
    }
    out.grad[i] = static_cast<T>((positive ? dpt : -dpt) * inv);
  }
  out.value = static_cast<T>(total * inv);
  return out;
}

}  // namespace tdsr::nn
