#pragma once

#include <string>
#include <vector>

#include "tdsr/nn/conv.hpp"
#include "tdsr/nn/module.hpp"

namespace tdsr::nn {

/// x + conv1x1(relu(conv3x3(relu(x)))), all convolutions grouped.
template <typename T>
class ResBlock final : public Module<T> {
 public:
  ResBlock(int channels, int hidden, int groups)
      : conv1_({channels, hidden, 3, 1, 1, groups}), conv2_({hidden, channels, 1, 1, 0, groups}) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> h = conv2_.forward(relu2_.forward(conv1_.forward(relu1_.forward(x))));
    h += x;
    return h;
  }
  Tensor<T> infer(const Tensor<T>& x) const override {
    Tensor<T> h = conv2_.infer(relu2_.infer(conv1_.infer(relu1_.infer(x))));
    h += x;
    return h;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx = relu1_.backward(conv1_.backward(relu2_.backward(conv2_.backward(dy))));
    dx += dy;
    return dx;
  }
  void collect(const std::string& prefix, std::vector<Param<T>*>& out) override {
    conv1_.collect(prefix + "conv1.", out);
    conv2_.collect(prefix + "conv2.", out);
  }
  void init(Rng& rng) override {
    conv1_.init(rng);
    conv2_.init(rng);
  }
  void pin_activations(bool on) override {
    relu1_.pin_activations(on);
    relu2_.pin_activations(on);
  }

  Conv2d<T>& residual_output() noexcept { return conv2_; }

 private:
  ReLU<T> relu1_;
  Conv2d<T> conv1_;
  ReLU<T> relu2_;
  Conv2d<T> conv2_;
};

/// `blocks` residual blocks followed by a ReLU.
template <typename T>
ModulePtr<T> make_res_stack(int channels, int hidden, int blocks, int groups) {
  auto seq = std::make_unique<Sequential<T>>();
  for (int i = 0; i < blocks; ++i) seq->template emplace<ResBlock<T>>(channels, hidden, groups);
  seq->template emplace<ReLU<T>>();
  return seq;
}

template <typename T>
ModulePtr<T> make_conv(int in, int out, int kernel, int stride, int padding, int groups) {
  return std::make_unique<Conv2d<T>>(ConvSpec{in, out, kernel, stride, padding, groups});
}

}  // namespace tdsr::nn
