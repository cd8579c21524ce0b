#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tdsr/rng.hpp"
#include "tdsr/tensor.hpp"

namespace tdsr::nn {

/// A named trainable tensor and its accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Shape4 shape) : name(std::move(n)), value(shape), grad(shape) {}

  void zero_grad() { grad.zero(); }
};

/// Layer with an explicit backward pass.
///
/// forward() caches whatever backward() needs and is meant for a single
/// owning training loop. infer() is const and cache-free, so a frozen
/// module can serve concurrent callers.
template <typename T>
class Module {
 public:
  virtual ~Module() = default;

  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> infer(const Tensor<T>& x) const = 0;
  /// Accumulates parameter gradients and returns d(loss)/d(input).
  virtual Tensor<T> backward(const Tensor<T>& dy) = 0;

  virtual void collect(const std::string& /*prefix*/, std::vector<Param<T>*>& /*out*/) {}
  virtual void init(Rng& /*rng*/) {}
  /// While pinned, activation patterns recorded by the first forward() are
  /// reused by later calls. Used to differentiate numerically within one
  /// linear region of a piecewise-linear network.
  virtual void pin_activations(bool /*on*/) {}

  std::vector<Param<T>*> parameters(const std::string& prefix = "") {
    std::vector<Param<T>*> out;
    collect(prefix, out);
    return out;
  }
};

template <typename T>
using ModulePtr = std::unique_ptr<Module<T>>;

template <typename T>
class ReLU final : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    const bool reuse = pinned_ && have_pin_ && mask_.size() == x.size();
    if (!reuse) {
      mask_.assign(x.size(), 0);
      for (std::size_t i = 0; i < x.size(); ++i) mask_[i] = x[i] > T(0);
      if (pinned_) have_pin_ = true;
    }
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = mask_[i] ? x[i] : T(0);
    return y;
  }

  Tensor<T> infer(const Tensor<T>& x) const override {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = mask_[i] ? dy[i] : T(0);
    return dx;
  }

  void pin_activations(bool on) override {
    pinned_ = on;
    have_pin_ = false;
  }

 private:
  std::vector<unsigned char> mask_;
  bool pinned_ = false;
  bool have_pin_ = false;
};

template <typename T>
class Sigmoid final : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    y_ = infer(x);
    return y_;
  }
  Tensor<T> infer(const Tensor<T>& x) const override {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * y_[i] * (T(1) - y_[i]);
    return dx;
  }

 private:
  Tensor<T> y_;
};

/// Nearest-neighbour upsampling by an integer factor.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  if (factor < 1) throw ArgumentError("upsample factor must be >= 1");
  Tensor<T> y(x.n(), x.c(), x.h() * factor, x.w() * factor);
  for (int b = 0; b < x.n(); ++b)
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.plane(b, c);
      T* dst = y.plane(b, c);
      const int wo = x.w() * factor;
      for (int yy = 0; yy < y.h(); ++yy) {
        const T* row = src + static_cast<std::size_t>(yy / factor) * x.w();
        T* out = dst + static_cast<std::size_t>(yy) * wo;
        for (int xx = 0; xx < wo; ++xx) out[xx] = row[xx / factor];
      }
    }
  return y;
}

/// Adjoint of upsample_nearest: sums each factor x factor block.
template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, int factor) {
  if (dy.h() % factor != 0 || dy.w() % factor != 0)
    throw ShapeError("upsample backward: " + dy.shape().str() + " not divisible by factor");
  Tensor<T> dx(dy.n(), dy.c(), dy.h() / factor, dy.w() / factor);
  for (int b = 0; b < dy.n(); ++b)
    for (int c = 0; c < dy.c(); ++c) {
      const T* src = dy.plane(b, c);
      T* dst = dx.plane(b, c);
      for (int yy = 0; yy < dy.h(); ++yy)
        for (int xx = 0; xx < dy.w(); ++xx)
          dst[static_cast<std::size_t>(yy / factor) * dx.w() + xx / factor] +=
              src[static_cast<std::size_t>(yy) * dy.w() + xx];
    }
  return dx;
}

template <typename T>
class Upsample final : public Module<T> {
 public:
  explicit Upsample(int factor) : factor_(factor) {
    if (factor < 1) throw ArgumentError("upsample factor must be >= 1");
  }
  Tensor<T> forward(const Tensor<T>& x) override { return upsample_nearest(x, factor_); }
  Tensor<T> infer(const Tensor<T>& x) const override { return upsample_nearest(x, factor_); }
  Tensor<T> backward(const Tensor<T>& dy) override {
    return upsample_nearest_backward(dy, factor_);
  }

 private:
  int factor_;
};

template <typename T>
class Sequential final : public Module<T> {
 public:
  Sequential() = default;

  Sequential& add(ModulePtr<T> m) {
    layers_.push_back(std::move(m));
    return *this;
  }
  template <typename M, typename... Args>
  M& emplace(Args&&... args) {
    auto m = std::make_unique<M>(std::forward<Args>(args)...);
    M& ref = *m;
    layers_.push_back(std::move(m));
    return ref;
  }

  std::size_t size() const noexcept { return layers_.size(); }
  Module<T>& operator[](std::size_t i) { return *layers_[i]; }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h);
    return h;
  }
  Tensor<T> infer(const Tensor<T>& x) const override {
    Tensor<T> h = x;
    for (const auto& l : layers_) h = l->infer(h);
    return h;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> g = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  void collect(const std::string& prefix, std::vector<Param<T>*>& out) override {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i]->collect(prefix + std::to_string(i) + ".", out);
  }
  void init(Rng& rng) override {
    for (auto& l : layers_) l->init(rng);
  }
  void pin_activations(bool on) override {
    for (auto& l : layers_) l->pin_activations(on);
  }

 private:
  std::vector<ModulePtr<T>> layers_;
};

}  // namespace tdsr::nn
