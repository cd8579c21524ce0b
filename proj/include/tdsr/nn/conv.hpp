#pragma once

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "tdsr/nn/module.hpp"

namespace tdsr::nn {

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

inline int conv_output_extent(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Lays out the receptive fields of channel group `g` as a
/// (cin_g * k * k) x (n * ho * wo) matrix.
template <typename T>
void im2col(const Tensor<T>& x, const ConvSpec& s, int g, int ho, int wo, std::vector<T>& col) {
  const int cin_g = s.in_channels / s.groups;
  const int k = s.kernel;
  const std::size_t p = static_cast<std::size_t>(ho) * wo;
  const std::size_t cols = p * x.n();
  col.assign(static_cast<std::size_t>(cin_g) * k * k * cols, T(0));
  for (int ci = 0; ci < cin_g; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * cols;
        for (int b = 0; b < x.n(); ++b) {
          const T* src = x.plane(b, g * cin_g + ci);
          T* dst = row + p * b;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * s.stride - s.padding + ky;
            if (iy < 0 || iy >= x.h()) continue;
            const T* srow = src + static_cast<std::size_t>(iy) * x.w();
            T* drow = dst + static_cast<std::size_t>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * s.stride - s.padding + kx;
              if (ix >= 0 && ix < x.w()) drow[ox] = srow[ix];
            }
          }
        }
      }
}

template <typename T>
void col2im(const std::vector<T>& col, const ConvSpec& s, int g, int ho, int wo, Tensor<T>& dx) {
  const int cin_g = s.in_channels / s.groups;
  const int k = s.kernel;
  const std::size_t p = static_cast<std::size_t>(ho) * wo;
  const std::size_t cols = p * dx.n();
  for (int ci = 0; ci < cin_g; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * cols;
        for (int b = 0; b < dx.n(); ++b) {
          T* dst = dx.plane(b, g * cin_g + ci);
          const T* src = row + p * b;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * s.stride - s.padding + ky;
            if (iy < 0 || iy >= dx.h()) continue;
            T* drow = dst + static_cast<std::size_t>(iy) * dx.w();
            const T* srow = src + static_cast<std::size_t>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * s.stride - s.padding + kx;
              if (ix >= 0 && ix < dx.w()) drow[ix] += srow[ox];
            }
          }
        }
      }
}

}  // namespace detail

/// 2D cross-correlation with stride, zero padding and channel groups.
/// Weight layout (out_ch, in_ch / groups, k, k); bias (1, out_ch, 1, 1).
template <typename T>
class Conv2d final : public Module<T> {
 public:
  explicit Conv2d(ConvSpec spec)
      : spec_(spec),
        weight_("weight", {spec.out_channels, spec.in_channels / std::max(spec.groups, 1),
                           spec.kernel, spec.kernel}),
        bias_("bias", {1, spec.out_channels, 1, 1}) {
    if (spec.groups < 1 || spec.in_channels % spec.groups != 0 ||
        spec.out_channels % spec.groups != 0)
      throw ShapeError("conv2d: channels (" + std::to_string(spec.in_channels) + " -> " +
                       std::to_string(spec.out_channels) + ") not divisible by groups " +
                       std::to_string(spec.groups));
    if (spec.kernel < 1 || spec.stride < 1 || spec.padding < 0)
      throw ArgumentError("conv2d: invalid kernel/stride/padding");
  }

  const ConvSpec& spec() const noexcept { return spec_; }
  Param<T>& weight() noexcept { return weight_; }
  Param<T>& bias() noexcept { return bias_; }
  const Param<T>& weight() const noexcept { return weight_; }
  const Param<T>& bias() const noexcept { return bias_; }

  /// Uniform on +-1/sqrt(fan_in) for weights and bias.
  void init(Rng& rng) override {
    const double fan_in = static_cast<double>(weight_.value.c()) * spec_.kernel * spec_.kernel;
    const double bound = 1.0 / std::sqrt(fan_in);
    for (auto& v : weight_.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : bias_.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  }

  void collect(const std::string& prefix, std::vector<Param<T>*>& out) override {
    weight_.name = prefix + "weight";
    bias_.name = prefix + "bias";
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    in_shape_ = x.shape();
    return run(x, &cols_);
  }

  Tensor<T> infer(const Tensor<T>& x) const override { return run(x, nullptr); }

  Tensor<T> backward(const Tensor<T>& dy) override {
    using namespace detail;
    const int ho = dy.h();
    const int wo = dy.w();
    const int n = dy.n();
    const int G = spec_.groups;
    const int cout_g = spec_.out_channels / G;
    const int k2 = spec_.kernel * spec_.kernel;
    const int krows = (spec_.in_channels / G) * k2;
    const std::size_t p = static_cast<std::size_t>(ho) * wo;
    const std::size_t cols = p * n;

    Tensor<T> dx(in_shape_);
    std::vector<T> dyg(static_cast<std::size_t>(cout_g) * cols);
    std::vector<T> dcol(static_cast<std::size_t>(krows) * cols);
    for (int g = 0; g < G; ++g) {
      for (int co = 0; co < cout_g; ++co) {
        T* row = dyg.data() + static_cast<std::size_t>(co) * cols;
        T bsum = T(0);
        for (int b = 0; b < n; ++b) {
          const T* src = dy.plane(b, g * cout_g + co);
          std::copy_n(src, p, row + p * b);
          for (std::size_t i = 0; i < p; ++i) bsum += src[i];
        }
        bias_.grad[g * cout_g + co] += bsum;
      }
      ConstMatrixMap<T> dY(dyg.data(), cout_g, static_cast<Eigen::Index>(cols));
      ConstMatrixMap<T> C(cols_[g].data(), krows, static_cast<Eigen::Index>(cols));
      MatrixMap<T> dW(weight_.grad.data() + static_cast<std::size_t>(g) * cout_g * krows,
                      cout_g, krows);
      dW.noalias() += dY * C.transpose();
      ConstMatrixMap<T> W(weight_.value.data() + static_cast<std::size_t>(g) * cout_g * krows,
                          cout_g, krows);
      MatrixMap<T> dC(dcol.data(), krows, static_cast<Eigen::Index>(cols));
      dC.noalias() = W.transpose() * dY;
      col2im(dcol, spec_, g, ho, wo, dx);
    }
    return dx;
  }

 private:
  Tensor<T> run(const Tensor<T>& x, std::vector<std::vector<T>>* keep) const {
    using namespace detail;
    if (x.c() != spec_.in_channels)
      throw ShapeError("conv2d: input " + x.shape().str() + " but weight expects " +
                       std::to_string(spec_.in_channels) + " channels");
    const int ho = conv_output_extent(x.h(), spec_.kernel, spec_.stride, spec_.padding);
    const int wo = conv_output_extent(x.w(), spec_.kernel, spec_.stride, spec_.padding);
    if (ho < 1 || wo < 1)
      throw ShapeError("conv2d: input " + x.shape().str() + " smaller than kernel");
    const int G = spec_.groups;
    const int cout_g = spec_.out_channels / G;
    const int krows = (spec_.in_channels / G) * spec_.kernel * spec_.kernel;
    const std::size_t p = static_cast<std::size_t>(ho) * wo;
    const std::size_t cols = p * x.n();

    Tensor<T> y(x.n(), spec_.out_channels, ho, wo);
    std::vector<T> local;
    std::vector<T> yg(static_cast<std::size_t>(cout_g) * cols);
    if (keep) keep->resize(G);
    for (int g = 0; g < G; ++g) {
      std::vector<T>& col = keep ? (*keep)[g] : local;
      im2col(x, spec_, g, ho, wo, col);
      ConstMatrixMap<T> W(weight_.value.data() + static_cast<std::size_t>(g) * cout_g * krows,
                          cout_g, krows);
      ConstMatrixMap<T> C(col.data(), krows, static_cast<Eigen::Index>(cols));
      MatrixMap<T> Y(yg.data(), cout_g, static_cast<Eigen::Index>(cols));
      Y.noalias() = W * C;
      for (int co = 0; co < cout_g; ++co) {
        const T bias = bias_.value[g * cout_g + co];
        const T* row = yg.data() + static_cast<std::size_t>(co) * cols;
        for (int b = 0; b < x.n(); ++b) {
          T* dst = y.plane(b, g * cout_g + co);
          const T* src = row + p * b;
          for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] + bias;
        }
      }
    }
    return y;
  }

  ConvSpec spec_;
  Param<T> weight_;
  Param<T> bias_;
  Shape4 in_shape_{};
  std::vector<std::vector<T>> cols_;
};

/// Convolution over explicit channel partitions: partition i maps
/// in_parts[i] input channels to out_parts[i] output channels with no
/// cross-partition connections. Covers uneven modality splits such as
/// RGB (3) | depth (1) that plain grouped convolution cannot express.
template <typename T>
class PartitionedConv2d final : public Module<T> {
 public:
  PartitionedConv2d(std::vector<int> in_parts, std::vector<int> out_parts, int kernel,
                    int stride, int padding)
      : in_parts_(std::move(in_parts)), out_parts_(std::move(out_parts)) {
    if (in_parts_.size() != out_parts_.size() || in_parts_.empty())
      throw ShapeError("partitioned conv: partition lists differ in length");
    for (std::size_t i = 0; i < in_parts_.size(); ++i)
      convs_.emplace_back(ConvSpec{in_parts_[i], out_parts_[i], kernel, stride, padding, 1});
  }

  int in_channels() const {
    int s = 0;
    for (int v : in_parts_) s += v;
    return s;
  }

  Tensor<T> forward(const Tensor<T>& x) override { return run(x, true); }
  Tensor<T> infer(const Tensor<T>& x) const override {
    return const_cast<PartitionedConv2d*>(this)->run(x, false);
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(in_shape_);
    int ib = 0;
    int ob = 0;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      const Tensor<T> part = convs_[i].backward(slice_channels(dy, ob, out_parts_[i]));
      assign_channels(dx, ib, part);
      ib += in_parts_[i];
      ob += out_parts_[i];
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<Param<T>*>& out) override {
    for (std::size_t i = 0; i < convs_.size(); ++i)
      convs_[i].collect(prefix + "part" + std::to_string(i) + ".", out);
  }
  void init(Rng& rng) override {
    for (auto& c : convs_) c.init(rng);
  }

  std::vector<Conv2d<T>>& parts() noexcept { return convs_; }

 private:
  // infer() only calls the const path of each part.
  Tensor<T> run(const Tensor<T>& x, bool train) {
    if (x.c() != in_channels())
      throw ShapeError("partitioned conv: input " + x.shape().str() + " expects " +
                       std::to_string(in_channels()) + " channels");
    if (train) in_shape_ = x.shape();
    std::vector<Tensor<T>> outs;
    outs.reserve(convs_.size());
    int ib = 0;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      const Tensor<T> xi = slice_channels(x, ib, in_parts_[i]);
      outs.push_back(train ? convs_[i].forward(xi) : std::as_const(convs_[i]).infer(xi));
      ib += in_parts_[i];
    }
    std::vector<const Tensor<T>*> ptrs;
    for (const auto& o : outs) ptrs.push_back(&o);
    return concat_channels<T>(ptrs);
  }

  std::vector<int> in_parts_;
  std::vector<int> out_parts_;
  std::vector<Conv2d<T>> convs_;
  Shape4 in_shape_{};
};

}  // namespace tdsr::nn
