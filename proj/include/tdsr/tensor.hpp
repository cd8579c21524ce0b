#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tdsr/errors.hpp"

namespace tdsr {

/// (batch, channels, height, width)
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Dense NCHW tensor with contiguous storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape4 shape, T fill = T(0))
      : shape_(shape), data_(shape.count(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
      throw ShapeError("negative tensor extent " + shape.str());
  }
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : Tensor(Shape4{n, c, h, w}, fill) {}

  const Shape4& shape() const noexcept { return shape_; }
  int n() const noexcept { return shape_.n; }
  int c() const noexcept { return shape_.c; }
  int h() const noexcept { return shape_.h; }
  int w() const noexcept { return shape_.w; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t index(int b, int ch, int y, int x) const noexcept {
    return ((static_cast<std::size_t>(b) * shape_.c + ch) * shape_.h + y) *
               shape_.w + x;
  }
  T& at(int b, int ch, int y, int x) noexcept { return data_[index(b, ch, y, x)]; }
  const T& at(int b, int ch, int y, int x) const noexcept {
    return data_[index(b, ch, y, x)];
  }

  /// Pointer to the (b, ch) spatial plane.
  T* plane(int b, int ch) noexcept { return data_.data() + index(b, ch, 0, 0); }
  const T* plane(int b, int ch) const noexcept {
    return data_.data() + index(b, ch, 0, 0);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }
  T max_value() const { return *std::max_element(data_.begin(), data_.end()); }
  T min_value() const { return *std::min_element(data_.begin(), data_.end()); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (!(shape_ == o.shape_))
      throw ShapeError(std::string(what) + ": shape " + shape_.str() +
                       " vs " + o.shape_.str());
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

// ---- channel bookkeeping ----------------------------------------------------

/// Copies channels [begin, begin+count) of x.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > x.c())
    throw ShapeError("slice_channels: [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") out of " +
                     x.shape().str());
  Tensor<T> out(x.n(), count, x.h(), x.w());
  const std::size_t p = x.shape().plane();
  for (int b = 0; b < x.n(); ++b)
    std::copy_n(x.plane(b, begin), p * count, out.plane(b, 0));
  return out;
}

/// Concatenates along the channel axis. All parts share n, h, w.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape4 s0 = parts[0]->shape();
  int channels = 0;
  for (const auto* p : parts) {
    if (p->n() != s0.n || p->h() != s0.h || p->w() != s0.w)
      throw ShapeError("concat_channels: " + s0.str() + " vs " +
                       p->shape().str());
    channels += p->c();
  }
  Tensor<T> out(s0.n, channels, s0.h, s0.w);
  const std::size_t plane = s0.plane();
  for (int b = 0; b < s0.n; ++b) {
    int offset = 0;
    for (const auto* p : parts) {
      std::copy_n(p->plane(b, 0), plane * p->c(), out.plane(b, offset));
      offset += p->c();
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Tensor<T>* parts[] = {&a, &b};
  return concat_channels<T>(parts);
}

/// Writes `src` into channels [begin, begin + src.c()) of dst.
template <typename T>
void assign_channels(Tensor<T>& dst, int begin, const Tensor<T>& src) {
  if (src.n() != dst.n() || src.h() != dst.h() || src.w() != dst.w() ||
      begin + src.c() > dst.c())
    throw ShapeError("assign_channels: " + src.shape().str() + " into " +
                     dst.shape().str());
  const std::size_t p = dst.shape().plane();
  for (int b = 0; b < dst.n(); ++b)
    std::copy_n(src.plane(b, 0), p * src.c(), dst.plane(b, begin));
}

/// Adds `src` into channels [begin, begin + src.c()) of dst.
template <typename T>
void accumulate_channels(Tensor<T>& dst, int begin, const Tensor<T>& src) {
  if (src.n() != dst.n() || src.h() != dst.h() || src.w() != dst.w() ||
      begin + src.c() > dst.c())
    throw ShapeError("accumulate_channels: " + src.shape().str() + " into " +
                     dst.shape().str());
  const std::size_t p = dst.shape().plane() * src.c();
  for (int b = 0; b < dst.n(); ++b) {
    T* d = dst.plane(b, begin);
    const T* s = src.plane(b, 0);
    for (std::size_t i = 0; i < p; ++i) d[i] += s[i];
  }
}

/// Gathers channels in the given order.
template <typename T>
Tensor<T> permute_channels(const Tensor<T>& x, std::span<const int> order) {
  if (static_cast<int>(order.size()) != x.c())
    throw ShapeError("permute_channels: order size mismatch");
  Tensor<T> out(x.shape());
  const std::size_t p = x.shape().plane();
  for (int b = 0; b < x.n(); ++b)
    for (int c = 0; c < x.c(); ++c)
      std::copy_n(x.plane(b, order[c]), p, out.plane(b, c));
  return out;
}

/// Inverse of permute_channels: out[order[c]] = x[c].
template <typename T>
Tensor<T> scatter_channels(const Tensor<T>& x, std::span<const int> order) {
  if (static_cast<int>(order.size()) != x.c())
    throw ShapeError("scatter_channels: order size mismatch");
  Tensor<T> out(x.shape());
  const std::size_t p = x.shape().plane();
  for (int b = 0; b < x.n(); ++b)
    for (int c = 0; c < x.c(); ++c)
      std::copy_n(x.plane(b, c), p, out.plane(b, order[c]));
  return out;
}

/// Samples [begin, begin+count) of the batch.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int begin, int count) {
  if (begin < 0 || begin + count > x.n())
    throw ShapeError("slice_batch: range out of " + x.shape().str());
  Tensor<T> out(count, x.c(), x.h(), x.w());
  const std::size_t per = static_cast<std::size_t>(x.c()) * x.shape().plane();
  std::copy_n(x.data() + per * begin, per * count, out.data());
  return out;
}

}  // namespace tdsr
