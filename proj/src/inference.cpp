#include "aptab/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "aptab/ops.hpp"
#include "aptab/random.hpp"

namespace aptab {
namespace {

void check_compatible(const Dataset& train, const Dataset& test) {
  if (train.rows() == 0) throw std::invalid_argument("predict: zero training rows");
  if (test.rows() == 0) throw std::invalid_argument("predict: zero test rows");
  if (train.cols() != test.cols()) {
    throw std::invalid_argument(fmt::format("predict: train has {} columns, test has {}",
                                            train.cols(), test.cols()));
  }
}

Prediction constant_prediction(const Prediction& p) {
  Prediction out = p;
  if (out.probs.defined()) out.probs = out.probs.detach();
  if (out.mean.defined()) out.mean = out.mean.detach();
  if (out.stddev.defined()) out.stddev = out.stddev.detach();
  return out;
}

}  // namespace

std::vector<std::size_t> subsample_features(std::size_t d, std::size_t budget, Rng& rng) {
  std::vector<std::size_t> all(d);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (d <= budget) return all;
  std::vector<std::size_t> chosen;
  chosen.reserve(budget);
  std::sample(all.begin(), all.end(), std::back_inserter(chosen), budget, rng);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

BatchPlan make_batch_plan(std::size_t rows, std::size_t cap, std::uint64_t seed) {
  if (rows == 0) throw std::invalid_argument("make_batch_plan: zero rows");
  if (cap == 0) throw std::invalid_argument("make_batch_plan: batch cap must be positive");
  BatchPlan plan;
  plan.order.resize(rows);
  std::iota(plan.order.begin(), plan.order.end(), std::size_t{0});
  if (rows > cap) {
    Rng rng(seed);
    std::shuffle(plan.order.begin(), plan.order.end(), rng);
  }
  for (std::size_t begin = 0; begin < rows; begin += cap) {
    const std::size_t end = std::min(rows, begin + cap);
    plan.ranges.emplace_back(begin, end);
    plan.weights.push_back(static_cast<double>(end - begin) / static_cast<double>(rows));
  }
  return plan;
}

Prediction combine_classification(std::span<const Prediction> parts,
                                  std::span<const double> weights) {
  if (parts.empty() || parts.size() != weights.size()) {
    throw std::invalid_argument("combine_classification: one weight per prediction");
  }
  std::vector<int> classes;
  for (const auto& p : parts) classes.insert(classes.end(), p.classes.begin(), p.classes.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  const std::size_t m = parts.front().rows();
  const std::size_t c = classes.size();
  std::vector<Real> probs(m * c, 0);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& p = parts[k];
    if (p.rows() != m) throw std::invalid_argument("combine_classification: row count mismatch");
    const std::size_t pc = p.classes.size();
    for (std::size_t j = 0; j < pc; ++j) {
      const auto col = static_cast<std::size_t>(
          std::lower_bound(classes.begin(), classes.end(), p.classes[j]) - classes.begin());
      for (std::size_t i = 0; i < m; ++i) {
        probs[i * c + col] += static_cast<Real>(weights[k]) * p.probs[i * pc + j];
      }
    }
  }
  Prediction out;
  out.task = TaskKind::kClassification;
  out.classes = std::move(classes);
  out.probs = Tensor({m, c}, std::move(probs));
  return out;
}

Prediction combine_regression(std::span<const Prediction> parts, std::size_t* floor_dominated) {
  if (parts.empty()) throw std::invalid_argument("combine_regression: no predictions");
  const std::size_t m = parts.front().rows();
  std::vector<Real> mu(m, 0);
  std::vector<Real> sigma(m, 0);
  std::size_t dominated = 0;
  for (std::size_t i = 0; i < m; ++i) {
    double precision = 0;
    double weighted = 0;
    double floor_weight = 0;
    double min_sigma = std::numeric_limits<double>::infinity();
    for (const auto& p : parts) min_sigma = std::min(min_sigma, double(p.stddev[i]));
    for (const auto& p : parts) {
      if (p.rows() != m) throw std::invalid_argument("combine_regression: row count mismatch");
      const double s = p.stddev[i];
      const double w = 1 / (s * s);
      precision += w;
      weighted += w * p.mean[i];
      if (s <= min_sigma && s <= kSigmaFloor * 1.0001) floor_weight += w;
    }
    mu[i] = static_cast<Real>(weighted / precision);
    sigma[i] = static_cast<Real>(1 / std::sqrt(precision));
    if (floor_weight > 0.99 * precision && parts.size() > 1) ++dominated;
  }
  if (floor_dominated) *floor_dominated = dominated;
  Prediction out;
  out.task = TaskKind::kRegression;
  out.mean = Tensor::vector(std::move(mu));
  out.stddev = Tensor::vector(std::move(sigma));
  return out;
}

Prediction predict_single(const Model& model, const Dataset& train, const Dataset& test) {
  check_compatible(train, test);
  NoGradGuard no_grad;
  const std::size_t l = train.rows();
  const std::size_t m = test.rows();
  const ColumnStats stats = fit_column_stats(train, l);

  Episode e;
  Dataset& joint = e.data;
  joint.task = train.task;
  joint.categorical = train.categorical;
  joint.num_classes = train.num_classes;
  const Tensor xtr = apply_column_stats(train, stats);
  const Tensor xte = apply_column_stats(test, stats);
  joint.x = concat(std::vector<Tensor>{xtr, xte}, 0);
  e.split = l;

  std::vector<Real> y(l + m, 0);
  Real y_mean = 0;
  Real y_scale = 1;
  if (train.task == TaskKind::kClassification) {
    joint.labels.assign(l + m, -1);
    for (std::size_t i = 0; i < l; ++i) {
      const int label = train.labels.at(i);
      if (label < 0) throw std::invalid_argument("predict: training row without a label");
      joint.labels[i] = label;
      y[i] = static_cast<Real>(label);
    }
  } else {
    double total = 0;
    for (std::size_t i = 0; i < l; ++i) {
      if (!std::isfinite(train.y[i])) throw std::invalid_argument("predict: non-finite target");
      total += train.y[i];
    }
    y_mean = static_cast<Real>(total / static_cast<double>(l));
    double ss = 0;
    for (std::size_t i = 0; i < l; ++i) ss += (train.y[i] - y_mean) * (train.y[i] - y_mean);
    const double var = ss / static_cast<double>(l);
    y_scale = var > 1e-24 * (1 + y_mean * y_mean) ? static_cast<Real>(std::sqrt(var)) : Real{1};
    for (std::size_t i = 0; i < l; ++i) y[i] = (train.y[i] - y_mean) / y_scale;
  }
  joint.y = Tensor::vector(std::move(y));

  Prediction p = constant_prediction(model.forward(e, {GateMode::kDeterministic, 0}));
  if (p.task == TaskKind::kRegression) {
    std::vector<Real> mu(p.mean.data().begin(), p.mean.data().end());
    std::vector<Real> sd(p.stddev.data().begin(), p.stddev.data().end());
    for (auto& v : mu) v = v * y_scale + y_mean;
    for (auto& v : sd) v *= y_scale;
    p.mean = Tensor::vector(std::move(mu));
    p.stddev = Tensor::vector(std::move(sd));
  }
  return p;
}

Prediction aggregate_classification(const Model& model, const Dataset& train, const Dataset& test,
                                    const BatchPlan& plan) {
  std::vector<Prediction> parts;
  for (const auto& [begin, end] : plan.ranges) {
    const std::span<const std::size_t> rows(plan.order.data() + begin, end - begin);
    parts.push_back(predict_single(model, train.take_rows(rows), test));
  }
  if (parts.size() == 1) return parts.front();
  return combine_classification(parts, plan.weights);
}

Prediction aggregate_regression(const Model& model, const Dataset& train, const Dataset& test,
                                const BatchPlan& plan, std::size_t* floor_dominated) {
  std::vector<Prediction> parts;
  for (const auto& [begin, end] : plan.ranges) {
    const std::span<const std::size_t> rows(plan.order.data() + begin, end - begin);
    parts.push_back(predict_single(model, train.take_rows(rows), test));
  }
  if (parts.size() == 1) {
    if (floor_dominated) *floor_dominated = 0;
    return parts.front();
  }
  return combine_regression(parts, floor_dominated);
}

Prediction predict(const Model& model, const Dataset& train, const Dataset& test,
                   const InferenceOptions& options) {
  check_compatible(train, test);
  Rng rng(derive_seed(options.seed, {key(Stream::kEvaluation), 0}));
  const auto columns = subsample_features(train.cols(), options.feature_budget, rng);
  const Dataset tr = columns.size() == train.cols() ? train : train.take_columns(columns);
  const Dataset te = columns.size() == test.cols() ? test : test.take_columns(columns);
  if (tr.rows() <= options.batch_cap) return predict_single(model, tr, te);
  const BatchPlan plan = make_batch_plan(tr.rows(), options.batch_cap,
                                         derive_seed(options.seed, {key(Stream::kEvaluation), 1}));
  if (tr.task == TaskKind::kClassification) return aggregate_classification(model, tr, te, plan);
  return aggregate_regression(model, tr, te, plan);
}

EnsembleResult permutation_ensemble(const Model& model, const Dataset& train, const Dataset& test,
                                    std::size_t members, const InferenceOptions& options) {
  if (members < 1) throw std::invalid_argument("permutation_ensemble: need at least one member");
  check_compatible(train, test);
  EnsembleResult result;
  std::vector<Prediction> parts;
  const std::size_t d = train.cols();
  for (std::size_t k = 0; k < members; ++k) {
    std::vector<std::size_t> perm(d);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (k > 0) {
      Rng rng(derive_seed(options.seed, {key(Stream::kEvaluation), 2, k}));
      std::shuffle(perm.begin(), perm.end(), rng);
    }
    parts.push_back(k == 0 ? predict(model, train, test, options)
                           : predict(model, train.take_columns(perm), test.take_columns(perm),
                                     options));
    result.permutations.push_back(std::move(perm));
  }

  const double inv = 1.0 / static_cast<double>(members);
  auto variance_across = [&](auto value_of, std::size_t count) {
    double total = 0;
    for (std::size_t e = 0; e < count; ++e) {
      double mean = 0;
      for (const auto& p : parts) mean += value_of(p, e) * inv;
      double ss = 0;
      for (const auto& p : parts) ss += (value_of(p, e) - mean) * (value_of(p, e) - mean);
      total += ss * inv;
    }
    return count ? total / static_cast<double>(count) : 0.0;
  };

  if (parts.front().task == TaskKind::kClassification) {
    const std::vector<double> weights(members, inv);
    result.prediction = combine_classification(parts, weights);
    // Members share the training labels, hence the class columns.
    result.member_variance = variance_across(
        [](const Prediction& p, std::size_t e) { return double(p.probs[e]); },
        parts.front().probs.numel());
  } else {
    const std::size_t m = parts.front().rows();
    std::vector<Real> mu(m, 0);
    std::vector<Real> sd(m, 0);
    for (std::size_t i = 0; i < m; ++i) {
      double mean = 0;
      double second = 0;
      for (const auto& p : parts) {
        mean += p.mean[i] * inv;
        second += (p.stddev[i] * p.stddev[i] + p.mean[i] * p.mean[i]) * inv;
      }
      mu[i] = static_cast<Real>(mean);
      sd[i] = static_cast<Real>(std::sqrt(std::max(second - mean * mean, 0.0)));
    }
    result.prediction.task = TaskKind::kRegression;
    result.prediction.mean = Tensor::vector(std::move(mu));
    result.prediction.stddev = Tensor::vector(std::move(sd));
    result.member_variance = variance_across(
        [](const Prediction& p, std::size_t e) { return double(p.mean[e]); }, m);
  }
  return result;
}

}  // namespace aptab
