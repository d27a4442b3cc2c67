#include "aptab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace aptab {
namespace {

void require_grad(const Tensor& p, const char* who) {
  if (!p.has_grad()) throw std::logic_error(std::string(who) + ": parameter has no gradient");
}

}  // namespace

void descend_step(std::span<Tensor> params, Real lr) {
  for (auto& p : params) {
    require_grad(p, "descend_step");
    auto data = p.mutable_data();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * grad[i];
  }
}

void ascend_step(std::span<Tensor> params, Real lr, Real weight_decay) {
  for (auto& p : params) require_grad(p, "ascend_step");
  const Real decay = 1 - lr * weight_decay;
  for (auto& p : params) {
    auto data = p.mutable_data();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = (data[i] + lr * grad[i]) * decay;
  }
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

bool grads_finite(std::span<const Tensor> params) {
  for (const auto& p : params) {
    if (p.has_grad() && !all_finite(p.grad())) return false;
  }
  return true;
}

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), Real{0});
    v_.emplace_back(p.numel(), Real{0});
  }
}

void Adam::step() {
  ++steps_;
  const Real t = static_cast<Real>(steps_);
  const Real correction1 = 1 - std::pow(config_.beta1, t);
  const Real correction2 = 1 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    require_grad(p, "Adam::step");
    auto data = p.mutable_data();
    const auto grad = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1 - config_.beta1) * grad[i];
      v[i] = config_.beta2 * v[i] + (1 - config_.beta2) * grad[i] * grad[i];
      const Real m_hat = m[i] / correction1;
      const Real v_hat = v[i] / correction2;
      data[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

void Adam::zero_grad() { zero_grads(params_); }

}  // namespace aptab
