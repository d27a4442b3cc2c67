#include "aptab/loss.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

#include "aptab/ops.hpp"

namespace aptab {

Tensor nll(const Prediction& pred, const Episode& episode, std::size_t* unseen) {
  const Dataset& d = episode.data;
  const std::size_t l = episode.split;
  const std::size_t m = episode.test_rows();
  if (pred.rows() != m) {
    throw std::invalid_argument(
        fmt::format("nll: prediction has {} rows, episode has {} test rows", pred.rows(), m));
  }
  if (m == 0) throw std::invalid_argument("nll: episode has no test rows");
  if (pred.task == TaskKind::kRegression) {
    const Tensor y = slice(d.y, 0, l, l + m);
    const Tensor z = div(sub(y, pred.mean), pred.stddev);
    const Tensor per_row = add(log(pred.stddev), add_scalar(scale(square(z), 0.5),
                                                            0.5 * std::log(2 * std::numbers::pi)));
    return mean(per_row);
  }
  const std::size_t c = pred.probs.dim(1);
  std::vector<std::size_t> index;
  index.reserve(m);
  std::size_t missing = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const int label = d.labels.at(l + i);
    if (label < 0) throw std::invalid_argument("nll: test row without a label");
    const auto col = pred.column_of(label);
    if (col < 0) {
      ++missing;
    } else {
      index.push_back(i * c + static_cast<std::size_t>(col));
    }
  }
  if (unseen) *unseen = missing;
  const Real penalty = static_cast<Real>(missing) * -std::log(kProbabilityFloor);
  if (index.empty()) return Tensor::scalar(penalty / static_cast<Real>(m));
  const Tensor picked = clip(gather(pred.probs, index, {index.size()}), kProbabilityFloor, 1);
  return scale(add_scalar(neg(sum(log(picked))), penalty), 1 / static_cast<Real>(m));
}

std::size_t sample_split(std::size_t n, Rng& rng) {
  if (n < 4) throw std::invalid_argument(fmt::format("sample_split: n = {} < 4", n));
  const auto tenth = static_cast<std::size_t>(std::ceil(static_cast<double>(n) / 10.0));
  const std::size_t lo = std::max<std::size_t>(2, tenth);
  return std::uniform_int_distribution<std::size_t>(lo, n - 2)(rng);
}

}  // namespace aptab
