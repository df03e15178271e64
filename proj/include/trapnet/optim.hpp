#pragma once

#include "trapnet/tensor.hpp"

#include <cmath>

namespace trapnet {

/// A trainable tensor together with its accumulated gradient.
template <typename S>
struct Parameter {
  BasicTensor<S> value;
  BasicTensor<S> grad;
  bool requires_grad = true;
};

struct OptimizerConfig {
  enum class Method { Sgd, Adam };
  Method method = Method::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Stateful first-order optimizer. Moment buffers are keyed by position, so
/// callers must pass parameters in a stable order.
template <typename S>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }
  long steps() const { return t_; }

  void step(std::span<Parameter<S>* const> params) {
    for (const auto* p : params)
      if (p->requires_grad && (p->grad.is_null() || p->grad.shape() != p->value.shape()))
        throw PreconditionError("optimizer_step: parameter without a populated gradient");
    if (config_.method == OptimizerConfig::Method::Adam && m_.empty()) {
      for (const auto* p : params) {
        m_.push_back(BasicTensor<S>::Array::Zero(p->value.size()));
        v_.push_back(BasicTensor<S>::Array::Zero(p->value.size()));
      }
    }
    if (config_.method == OptimizerConfig::Method::Adam && m_.size() != params.size())
      throw PreconditionError("optimizer_step: parameter set changed between steps");
    ++t_;
    const S lr = S(config_.lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<S>& p = *params[i];
      if (!p.requires_grad) continue;
      auto& g = p.grad.array();
      if (config_.method == OptimizerConfig::Method::Sgd) {
        p.value.array() -= lr * g;
      } else {
        const S b1 = S(config_.beta1), b2 = S(config_.beta2);
        m_[i] = b1 * m_[i] + (S(1) - b1) * g;
        v_[i] = b2 * v_[i] + (S(1) - b2) * g.square();
        const S c1 = S(1) - S(std::pow(config_.beta1, double(t_)));
        const S c2 = S(1) - S(std::pow(config_.beta2, double(t_)));
        p.value.array() -= lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + S(config_.epsilon));
      }
      g.setZero();
    }
  }

 private:
  OptimizerConfig config_;
  long t_ = 0;
  std::vector<typename BasicTensor<S>::Array> m_, v_;
};

}  // namespace trapnet
