#pragma once

#include <cstddef>

#include "aptab/model.hpp"
#include "aptab/random.hpp"

namespace aptab {

inline constexpr Real kProbabilityFloor = 1e-9;

// Mean negative log-likelihood over the episode's test rows. A true class the
// prediction does not cover contributes -log(1e-9); `unseen` receives the
// number of such rows when non-null.
Tensor nll(const Prediction& pred, const Episode& episode, std::size_t* unseen = nullptr);

// Split position l uniform on [max(2, ceil(n / 10)), n - 2].
std::size_t sample_split(std::size_t n, Rng& rng);

}  // namespace aptab
