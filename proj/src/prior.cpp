#include "aptab/prior.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include <fmt/format.h>

#include "aptab/ops.hpp"

namespace aptab {
namespace {

// Variance below this (relative to the mean's magnitude) counts as constant.
bool negligible_variance(Real var, Real mu) { return var <= Real{1e-24} * (1 + mu * mu); }

std::size_t uniform_size(Rng& rng, IntRange r) {
  return std::uniform_int_distribution<std::size_t>(r.lo, r.hi)(rng);
}

double uniform_real(Rng& rng, RealRange r) {
  if (r.lo == r.hi) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

double log_uniform(Rng& rng, RealRange r) {
  if (r.lo == r.hi) return r.lo;
  return std::exp(uniform_real(rng, RealRange{std::log(r.lo), std::log(r.hi)}));
}

Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng) {
  if (stddev <= 0) return Tensor::zeros(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(dist(rng));
  return Tensor(shape, std::move(v));
}

Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::kTanh: return tanh(x);
    case Activation::kRelu: return relu(x);
    case Activation::kSigmoid: return sigmoid(x);
  }
  return x;
}

void require_range(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(fmt::format("GeneratorHyperSpace: invalid {}", what));
}

struct Quantiles {
  Tensor unnormalized;  // [N - 1], mu + sigma * Q
  bool degenerate = false;
};

Quantiles unnormalized_quantiles(const Tensor& column, const DiscretizerSpec& spec) {
  Quantiles q;
  const Tensor mu = mean(column, 0);
  const Tensor var = variance(column, 0);
  q.degenerate = negligible_variance(var.item(), mu.item());
  if (!q.degenerate) {
    q.unnormalized = add(mul(Tensor::vector(spec.quantiles), sqrt(var)), mu);
  }
  return q;
}

std::vector<std::size_t> positions(std::span<const Real> column, const Quantiles& q,
                                   const DiscretizerSpec& spec) {
  std::vector<std::size_t> pos(column.size());
  if (q.degenerate) {
    const auto k = static_cast<std::size_t>(std::count_if(
        spec.quantiles.begin(), spec.quantiles.end(), [](Real v) { return v <= 0; }));
    std::fill(pos.begin(), pos.end(), k);
    return pos;
  }
  const auto qt = q.unnormalized.data();
  for (std::size_t i = 0; i < column.size(); ++i) {
    pos[i] = static_cast<std::size_t>(
        std::count_if(qt.begin(), qt.end(), [v = column[i]](Real t) { return v >= t; }));
  }
  return pos;
}

}  // namespace

std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::kClassification ? "classification" : "regression";
}

std::string_view to_string(Activation activation) {
  switch (activation) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view text) {
  if (text == "classification") return TaskKind::kClassification;
  if (text == "regression") return TaskKind::kRegression;
  throw std::invalid_argument(fmt::format("unknown task kind '{}'", text));
}

Activation parse_activation(std::string_view text) {
  if (text == "tanh") return Activation::kTanh;
  if (text == "relu") return Activation::kRelu;
  if (text == "sigmoid") return Activation::kSigmoid;
  throw std::invalid_argument(fmt::format("unknown activation '{}'", text));
}

void GeneratorHyperSpace::validate() const {
  auto ordered = [](auto r) { return r.lo <= r.hi; };
  require_range(ordered(layers) && layers.lo >= 1, "layers");
  require_range(ordered(hidden_width) && hidden_width.lo >= 1, "hidden_width");
  require_range(ordered(inputs) && inputs.lo >= 1, "inputs");
  require_range(!activations.empty(), "activations");
  require_range(ordered(dropout) && dropout.lo >= 0 && dropout.hi < 1, "dropout");
  require_range(ordered(noise_std) && noise_std.lo > 0, "noise_std");
  require_range(ordered(weight_scale) && weight_scale.lo > 0, "weight_scale");
  require_range(ordered(features) && features.lo >= 1, "features");
  require_range(ordered(samples) && samples.lo >= 4, "samples");
  require_range(ordered(classes) && classes.lo >= 2, "classes");
  require_range(ordered(categorical_fraction) && categorical_fraction.lo >= 0 &&
                    categorical_fraction.hi <= 1,
                "categorical_fraction");
  require_range(ordered(cardinality) && cardinality.lo >= 2, "cardinality");
  require_range(regression_probability >= 0 && regression_probability <= 1,
                "regression_probability");
  // Every draw must expose enough distinct neurons for d features + response.
  require_range(layers.lo * hidden_width.lo >= features.hi + 1, "layers * hidden_width");
}

void DiscretizerSpec::validate() const {
  if (cardinality < 2) throw std::invalid_argument("DiscretizerSpec: cardinality < 2");
  if (quantiles.size() + 1 != cardinality) {
    throw std::invalid_argument("DiscretizerSpec: need cardinality - 1 quantiles");
  }
  for (std::size_t i = 1; i < quantiles.size(); ++i) {
    if (!(quantiles[i - 1] < quantiles[i])) {
      throw std::invalid_argument("DiscretizerSpec: quantiles not strictly increasing");
    }
  }
  std::vector<std::size_t> sorted = permutation;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != i) throw std::invalid_argument("DiscretizerSpec: permutation not a bijection");
  }
  if (permutation.size() != cardinality) {
    throw std::invalid_argument("DiscretizerSpec: permutation size != cardinality");
  }
  if (!(temperature >= 0)) throw std::invalid_argument("DiscretizerSpec: negative temperature");
}

DiscretizerSpec DiscretizerSpec::sample(std::size_t cardinality, Real temperature, Rng& rng) {
  DiscretizerSpec spec;
  spec.cardinality = cardinality;
  spec.temperature = temperature;
  std::normal_distribution<double> normal;
  do {
    spec.quantiles.resize(cardinality - 1);
    for (auto& q : spec.quantiles) q = static_cast<Real>(normal(rng));
    std::sort(spec.quantiles.begin(), spec.quantiles.end());
  } while (std::adjacent_find(spec.quantiles.begin(), spec.quantiles.end()) !=
           spec.quantiles.end());
  spec.permutation.resize(cardinality);
  std::iota(spec.permutation.begin(), spec.permutation.end(), std::size_t{0});
  std::shuffle(spec.permutation.begin(), spec.permutation.end(), rng);
  return spec;
}

std::vector<Tensor> GeneratorInstance::parameters() const {
  std::vector<Tensor> params;
  params.insert(params.end(), weights.begin(), weights.end());
  params.insert(params.end(), biases.begin(), biases.end());
  return params;
}

void GeneratorInstance::set_requires_grad(bool flag) {
  for (auto& w : weights) w.set_requires_grad(flag);
  for (auto& b : biases) b.set_requires_grad(flag);
}

GeneratorInstance GeneratorInstance::clone() const {
  GeneratorInstance copy = *this;
  for (auto& w : copy.weights) w = w.clone();
  for (auto& b : copy.biases) b = b.clone();
  for (auto& m : copy.masks) m = m.clone();
  return copy;
}

void Dataset::validate() const {
  if (!x.defined() || x.rank() != 2) throw std::invalid_argument("Dataset: x must be rank 2");
  if (!y.defined() || y.rank() != 1 || y.dim(0) != rows()) {
    throw std::invalid_argument("Dataset: y must be rank 1 with one entry per row");
  }
  if (categorical.size() != cols()) {
    throw std::invalid_argument("Dataset: categorical mask must have one entry per column");
  }
  if (!missing.empty() && missing.size() != rows() * cols()) {
    throw std::invalid_argument("Dataset: missing mask must be n * d");
  }
  if (task == TaskKind::kClassification) {
    if (num_classes < 2) throw std::invalid_argument("Dataset: need at least 2 classes");
    if (labels.size() != rows()) throw std::invalid_argument("Dataset: one label per row");
    for (int label : labels) {
      if (label < -1 || label >= static_cast<int>(num_classes)) {
        throw std::invalid_argument(fmt::format("Dataset: label {} outside [0, {})", label,
                                                num_classes));
      }
    }
  }
}

Dataset Dataset::take_rows(std::span<const std::size_t> rows_to_take) const {
  const std::size_t d = cols();
  std::vector<Real> xv;
  std::vector<Real> yv;
  xv.reserve(rows_to_take.size() * d);
  Dataset out;
  out.task = task;
  out.categorical = categorical;
  out.num_classes = num_classes;
  for (std::size_t r : rows_to_take) {
    if (r >= rows()) throw std::out_of_range("Dataset::take_rows: row out of range");
    xv.insert(xv.end(), x.data().begin() + static_cast<std::ptrdiff_t>(r * d),
              x.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    yv.push_back(y.data()[r]);
    if (!labels.empty()) out.labels.push_back(labels[r]);
    if (!missing.empty()) {
      out.missing.insert(out.missing.end(), missing.begin() + static_cast<std::ptrdiff_t>(r * d),
                         missing.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
  }
  out.x = Tensor({rows_to_take.size(), d}, std::move(xv));
  out.y = Tensor::vector(std::move(yv));
  return out;
}

Dataset Dataset::take_columns(std::span<const std::size_t> cols_to_take) const {
  const std::size_t n = rows();
  const std::size_t d = cols();
  const std::size_t k = cols_to_take.size();
  Dataset out = detached();
  std::vector<Real> xv(n * k);
  out.categorical.assign(k, 0);
  if (!missing.empty()) out.missing.assign(n * k, 0);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t c = cols_to_take[j];
    if (c >= d) throw std::out_of_range("Dataset::take_columns: column out of range");
    out.categorical[j] = categorical[c];
    for (std::size_t i = 0; i < n; ++i) {
      xv[i * k + j] = x.data()[i * d + c];
      if (!missing.empty()) out.missing[i * k + j] = missing[i * d + c];
    }
  }
  out.x = Tensor({n, k}, std::move(xv));
  return out;
}

Dataset Dataset::detached() const {
  Dataset out = *this;
  out.x = x.detach();
  out.y = y.detach();
  return out;
}

GeneratorInstance sample_generator(const GeneratorHyperSpace& space, std::uint64_t seed,
                                   Real temperature) {
  space.validate();
  Rng rng(seed);
  GeneratorInstance g;
  const std::size_t layers = uniform_size(rng, space.layers);
  const std::size_t width = uniform_size(rng, space.hidden_width);
  g.activation = space.activations[std::uniform_int_distribution<std::size_t>(
      0, space.activations.size() - 1)(rng)];
  const double dropout = uniform_real(rng, space.dropout);
  const double weight_scale = uniform_real(rng, space.weight_scale);
  g.input_width = uniform_size(rng, space.inputs);
  g.hidden_width = width;
  std::bernoulli_distribution keep(1.0 - dropout);
  std::size_t fan_in = g.input_width;
  for (std::size_t t = 0; t < layers; ++t) {
    const double stddev = weight_scale / std::sqrt(static_cast<double>(fan_in) * (1.0 - dropout));
    g.weights.push_back(normal_tensor({fan_in, width}, stddev, rng));
    g.biases.push_back(normal_tensor({width}, 0.1, rng));
    std::vector<Real> mask(fan_in * width);
    for (auto& m : mask) m = keep(rng) ? Real{1} : Real{0};
    g.masks.emplace_back(Shape{fan_in, width}, std::move(mask));
    g.noise_std.push_back(static_cast<Real>(log_uniform(rng, space.noise_std)));
    fan_in = width;
  }

  const std::size_t d = uniform_size(rng, space.features);
  if (layers * width < d + 1) {
    throw std::invalid_argument("sample_generator: not enough neurons for the feature count");
  }
  std::vector<std::size_t> neurons(layers * width);
  std::iota(neurons.begin(), neurons.end(), std::size_t{0});
  std::shuffle(neurons.begin(), neurons.end(), rng);
  g.predictor_neurons.assign(neurons.begin(), neurons.begin() + static_cast<std::ptrdiff_t>(d));
  g.response_neuron = neurons[d];

  g.task = std::bernoulli_distribution(space.regression_probability)(rng)
               ? TaskKind::kRegression
               : TaskKind::kClassification;
  if (g.task == TaskKind::kClassification) {
    g.num_classes = uniform_size(rng, space.classes);
    g.response_discretizer = DiscretizerSpec::sample(g.num_classes, temperature, rng);
  }
  const double categorical_fraction = uniform_real(rng, space.categorical_fraction);
  std::bernoulli_distribution is_categorical(categorical_fraction);
  g.feature_discretizers.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    if (is_categorical(rng)) {
      g.feature_discretizers[j] =
          DiscretizerSpec::sample(uniform_size(rng, space.cardinality), temperature, rng);
    }
  }
  return g;
}

std::vector<std::size_t> hard_discretize(std::span<const Real> column,
                                         const DiscretizerSpec& spec) {
  NoGradGuard no_grad;
  const Tensor col = Tensor::vector(std::vector<Real>(column.begin(), column.end()));
  const auto pos = positions(column, unnormalized_quantiles(col, spec), spec);
  std::vector<std::size_t> out(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) out[i] = spec.permutation[pos[i]];
  return out;
}

Tensor soft_discretize(const Tensor& column, const DiscretizerSpec& spec) {
  if (column.rank() != 1) throw ShapeError("soft_discretize", "column must be rank 1");
  const std::size_t n = column.numel();
  const Quantiles q = unnormalized_quantiles(column, spec);
  const auto pos = positions(column.data(), q, spec);
  std::vector<Real> base(n);
  for (std::size_t i = 0; i < n; ++i) base[i] = static_cast<Real>(spec.permutation[pos[i]]);
  const Tensor categories = Tensor::vector(std::move(base));
  if (q.degenerate || spec.temperature == 0) return categories;

  // Brackets: [min, Q~(1), ..., Q~(N-1), max]; value with position k lies in
  // [bracket[k], bracket[k + 1]].
  const std::vector<Tensor> parts{reshape(min(column, 0), {1}), q.unnormalized,
                                  reshape(max(column, 0), {1})};
  const Tensor brackets = concat(parts, 0);
  std::vector<std::size_t> upper_index(n);
  for (std::size_t i = 0; i < n; ++i) upper_index[i] = pos[i] + 1;
  const Tensor lower = gather(brackets, pos, {n});
  const Tensor upper = gather(brackets, upper_index, {n});
  const Tensor ratio = div(sub(column, lower), add_scalar(sub(upper, lower), kBracketEps));
  return add(categories, scale(log(add_scalar(ratio, 1)), spec.temperature));
}

Tensor standardize_columns(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("standardize_columns", "x must be rank 2");
  const std::size_t d = x.dim(1);
  const Tensor mu = mean(x, 0);
  const Tensor var = variance(x, 0);
  std::vector<Real> live(d);
  std::vector<Real> dead(d);
  for (std::size_t j = 0; j < d; ++j) {
    live[j] = negligible_variance(var[j], mu[j]) ? Real{0} : Real{1};
    dead[j] = 1 - live[j];
  }
  const Tensor live_mask = Tensor::vector(live);
  // Dead columns divide by sqrt(0 * var + 1) = 1 and are then zeroed, which
  // keeps their gradient finite.
  const Tensor divisor = sqrt(add(mul(var, live_mask), Tensor::vector(dead)));
  const Tensor z = mul(div(sub(x, mu), divisor), live_mask);
  return clip(z, -kClipStd, kClipStd);
}

ColumnStats fit_column_stats(const Dataset& d, std::size_t rows) {
  const std::size_t cols = d.cols();
  ColumnStats stats;
  stats.mean.assign(cols, 0);
  stats.scale.assign(cols, 0);
  for (std::size_t j = 0; j < cols; ++j) {
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      if (d.is_missing(i, j)) continue;
      total += d.value(i, j);
      ++count;
    }
    if (count == 0) continue;
    const double mu = total / static_cast<double>(count);
    double ss = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      if (d.is_missing(i, j)) continue;
      ss += (d.value(i, j) - mu) * (d.value(i, j) - mu);
    }
    const double var = ss / static_cast<double>(count);
    stats.mean[j] = static_cast<Real>(mu);
    stats.scale[j] = negligible_variance(static_cast<Real>(var), static_cast<Real>(mu))
                         ? Real{0}
                         : static_cast<Real>(std::sqrt(var));
  }
  return stats;
}

Tensor apply_column_stats(const Dataset& d, const ColumnStats& stats) {
  const std::size_t n = d.rows();
  const std::size_t cols = d.cols();
  if (stats.mean.size() != cols) throw ShapeError("apply_column_stats", "column count mismatch");
  std::vector<Real> out(n * cols, Real{0});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      if (d.is_missing(i, j) || stats.scale[j] == 0) continue;
      const Real z = (d.value(i, j) - stats.mean[j]) / stats.scale[j];
      out[i * cols + j] = std::clamp(z, -kClipStd, kClipStd);
    }
  }
  return Tensor({n, cols}, std::move(out));
}

Dataset normalize_dataset(const Dataset& d) {
  if (d.rows() < 2) throw std::invalid_argument("normalize_dataset: need at least 2 rows");
  Dataset out = d;
  if (d.missing.empty()) {
    out.x = standardize_columns(d.x);
  } else {
    out.x = apply_column_stats(d, fit_column_stats(d, d.rows()));
  }
  return out;
}

Dataset generate_dataset(const GeneratorInstance& g, std::size_t n, std::uint64_t seed) {
  if (n < 4) throw std::invalid_argument("generate_dataset: n must be at least 4");
  const std::size_t layers = g.num_layers();
  const std::size_t width = g.hidden_width;
  const std::size_t total = layers * width;
  const std::size_t d = g.num_features();
  for (std::size_t attempt = 0; attempt <= kMaxClassResamples; ++attempt) {
    Rng rng(derive_seed(seed, {attempt}));
    Tensor h = normal_tensor({n, g.input_width}, 1.0, rng);
    std::vector<Tensor> outputs;
    outputs.reserve(layers);
    for (std::size_t t = 0; t < layers; ++t) {
      const Tensor pre = add(matmul(h, mul(g.weights[t], g.masks[t])), g.biases[t]);
      h = add(activate(pre, g.activation), normal_tensor({n, width}, g.noise_std[t], rng));
      outputs.push_back(h);
    }
    const Tensor neurons = concat(outputs, 1);

    std::vector<Tensor> columns;
    columns.reserve(d);
    std::vector<std::uint8_t> categorical(d, 0);
    for (std::size_t j = 0; j < d; ++j) {
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i * total + g.predictor_neurons[j];
      Tensor col = gather(neurons, idx, {n});
      if (g.feature_discretizers[j]) {
        col = soft_discretize(col, *g.feature_discretizers[j]);
        categorical[j] = 1;
      }
      columns.push_back(reshape(col, {n, 1}));
    }
    std::vector<std::size_t> ridx(n);
    for (std::size_t i = 0; i < n; ++i) ridx[i] = i * total + g.response_neuron;
    const Tensor response = gather(neurons, ridx, {n});

    Dataset out;
    out.task = g.task;
    out.categorical = std::move(categorical);
    out.x = standardize_columns(concat(columns, 1));
    if (g.task == TaskKind::kClassification) {
      const auto& spec = *g.response_discretizer;
      const auto hard = hard_discretize(response.data(), spec);
      const std::set<std::size_t> distinct(hard.begin(), hard.end());
      if (distinct.size() < 2) continue;
      out.labels.assign(hard.begin(), hard.end());
      out.y = soft_discretize(response, spec);
      out.num_classes = g.num_classes;
    } else {
      out.y = reshape(standardize_columns(reshape(response, {n, 1})), {n});
    }
    return out;
  }
  throw std::runtime_error(fmt::format(
      "generate_dataset: response collapsed to a single class after {} resamples",
      kMaxClassResamples));
}

}  // namespace aptab
