#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tdsr/errors.hpp"
#include "tdsr/nn/module.hpp"

namespace tdsr::nn {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Non-owning view over a model's parameters plus Adam moment buffers.
template <typename T>
class ParamStore {
 public:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };

  ParamStore() = default;
  explicit ParamStore(std::vector<Param<T>*> params) : params_(std::move(params)) {}

  std::span<Param<T>* const> params() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }
  long step() const noexcept { return step_; }
  bool has_state() const noexcept { return !state_.empty(); }
  const std::vector<Moments>& state() const noexcept { return state_; }
  std::vector<Moments>& moments() noexcept { return state_; }

  Param<T>* find(const std::string& name) const {
    for (auto* p : params_)
      if (p->name == name) return p;
    return nullptr;
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  /// Restores optimizer state, e.g. from a checkpoint.
  void set_state(long step, std::vector<Moments> state) {
    if (!state.empty() && state.size() != params_.size())
      throw ShapeError("optimizer state size does not match parameter count");
    step_ = step;
    state_ = std::move(state);
  }

  void ensure_state() {
    if (!state_.empty()) return;
    state_.reserve(params_.size());
    for (auto* p : params_) state_.push_back({Tensor<T>(p->value.shape()), Tensor<T>(p->value.shape())});
  }

  void advance() { ++step_; }

 private:
  std::vector<Param<T>*> params_;
  std::vector<Moments> state_;
  long step_ = 0;
};

/// One bias-corrected Adam update from the gradients held in the store.
template <typename T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg) {
  for (auto* p : store.params())
    if (!p->grad.all_finite()) throw NumericError("gradient overflow in parameter '" + p->name + "'");
  store.ensure_state();
  store.advance();
  const double t = static_cast<double>(store.step());
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto params = store.params();
  auto& state = store.moments();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<T>& p = *params[i];
    Tensor<T>& m = state[i].m;
    Tensor<T>& v = state[i].v;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = static_cast<double>(p.grad[j]);
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * g;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1;
      const double vhat = vj / c2;
      p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) -
                                  cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace tdsr::nn
