#pragma once

// Central finite-difference oracle for gradient checks. Kept independent of
// the backward rules it verifies: it only perturbs values and re-evaluates.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "aptab/tensor.hpp"

namespace aptab::testing {

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kGradientRelTolerance = 1e-4;
// Denominator floor so that entries which are analytically ~0 are compared
// absolutely (1e-4 * 1e-6 = 1e-10) instead of dividing by round-off.
inline constexpr double kGradientScaleFloor = 1e-6;

inline std::vector<double> numeric_gradient(Tensor input, const std::function<double()>& f,
                                            double step = kFiniteDifferenceStep) {
  auto values = input.mutable_data();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Real saved = values[i];
    values[i] = saved + step;
    const double up = f();
    values[i] = saved - step;
    const double down = f();
    values[i] = saved;
    grad[i] = (up - down) / (2 * step);
  }
  return grad;
}

// Round-off in a central difference: each evaluation of f carries a few
// hundred ulps of accumulated error, divided by 2h.
inline constexpr double kRoundoffUlps = 100;

inline double difference_noise(double f, double step) {
  return kRoundoffUlps * std::numeric_limits<double>::epsilon() * (std::abs(f) + 1) / step;
}

// |a - n| over the allowance tol * max(|a|, |n|) + noise; <= 1 passes.
inline double tolerance_ratio(double analytic, double numeric, double noise,
                              double tol = kGradientRelTolerance) {
  return std::abs(analytic - numeric) /
         (tol * std::max(std::abs(analytic), std::abs(numeric)) + noise);
}

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kGradientScaleFloor});
  return std::abs(analytic - numeric) / scale;
}

inline double max_relative_error(std::span<const Real> analytic, const std::vector<double>& numeric) {
  double worst = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    worst = std::max(worst, relative_error(analytic[i], numeric[i]));
  }
  return worst;
}

}  // namespace aptab::testing
