#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "aptab/tensor.hpp"

namespace aptab {

// p <- p - lr * grad
void descend_step(std::span<Tensor> params, Real lr);

// p <- (p + lr * grad) * (1 - lr * weight_decay)
//
// Gradient ascent with decoupled weight decay. Throws std::logic_error if a
// parameter has no gradient buffer (no zero_grad()/backward() happened).
void ascend_step(std::span<Tensor> params, Real lr, Real weight_decay);

void zero_grads(std::span<Tensor> params);
bool grads_finite(std::span<const Tensor> params);

struct AdamConfig {
  Real lr = 1e-4;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  void step();
  void zero_grad();

  const AdamConfig& config() const { return config_; }
  std::size_t step_count() const { return steps_; }
  std::vector<std::vector<Real>>& first_moments() { return m_; }
  std::vector<std::vector<Real>>& second_moments() { return v_; }
  void set_step_count(std::size_t steps) { steps_ = steps; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::size_t steps_ = 0;
  std::vector<std::vector<Real>> m_;
  std::vector<std::vector<Real>> v_;
};

}  // namespace aptab
