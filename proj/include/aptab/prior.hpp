#pragma once

// Ordinary synthetic data generators: sparsified noisy random MLPs whose
// selected neurons are read out as predictors and response, with ranking
// discretization (hard and soft) and per-dataset normalization.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aptab/random.hpp"
#include "aptab/tensor.hpp"

namespace aptab {

enum class TaskKind { kClassification, kRegression };
enum class Activation { kTanh, kRelu, kSigmoid };

std::string_view to_string(TaskKind kind);
std::string_view to_string(Activation activation);
TaskKind parse_task_kind(std::string_view text);
Activation parse_activation(std::string_view text);

struct IntRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

struct RealRange {
  double lo = 0;
  double hi = 0;
};

struct GeneratorHyperSpace {
  IntRange layers{2, 4};
  IntRange hidden_width{8, 32};
  // Dimension of the standard-normal MLP input.
  IntRange inputs{1, 2};
  std::vector<Activation> activations{Activation::kTanh, Activation::kRelu, Activation::kSigmoid};
  RealRange dropout{0.0, 0.5};
  // Per-layer additive noise standard deviation, drawn log-uniformly.
  RealRange noise_std{1e-3, 0.3};
  // Multiplier on the fan-in scaled weight standard deviation.
  RealRange weight_scale{0.5, 2.0};
  IntRange features{1, 10};
  IntRange samples{50, 200};
  IntRange classes{2, 10};
  RealRange categorical_fraction{0.0, 0.3};
  IntRange cardinality{2, 10};
  // Probability that a sampled mechanism emits a regression task.
  double regression_probability = 0.0;

  // Throws std::invalid_argument on an empty or degenerate range.
  void validate() const;
};

// Ranking discretization of one column into `cardinality` categories.
// Categories are 0-based: a value whose position among the quantiles is k
// maps to permutation[k].
struct DiscretizerSpec {
  std::size_t cardinality = 2;
  std::vector<Real> quantiles;           // cardinality - 1, strictly increasing
  std::vector<std::size_t> permutation;  // bijection on {0, ..., cardinality - 1}
  Real temperature = 0;

  void validate() const;
  // Standard-normal order statistics and a uniform random permutation.
  static DiscretizerSpec sample(std::size_t cardinality, Real temperature, Rng& rng);
};

struct GeneratorInstance {
  TaskKind task = TaskKind::kClassification;
  Activation activation = Activation::kTanh;
  std::size_t input_width = 0;
  std::size_t hidden_width = 0;
  std::vector<Tensor> weights;  // [in, width] per layer
  std::vector<Tensor> biases;   // [width] per layer
  std::vector<Tensor> masks;    // connection masks, fixed at construction
  std::vector<Real> noise_std;
  // Neuron ids index the concatenation of all hidden layer outputs.
  std::vector<std::size_t> predictor_neurons;
  std::size_t response_neuron = 0;
  std::vector<std::optional<DiscretizerSpec>> feature_discretizers;
  std::optional<DiscretizerSpec> response_discretizer;  // classification only
  std::size_t num_classes = 0;

  std::size_t num_features() const { return predictor_neurons.size(); }
  std::size_t num_layers() const { return weights.size(); }
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool flag);
  // Deep copy; Tensor members are otherwise shared handles.
  GeneratorInstance clone() const;
};

struct Dataset {
  TaskKind task = TaskKind::kClassification;
  Tensor x;                                // [n, d]
  Tensor y;                                // [n]; soft label values or regression targets
  std::vector<int> labels;                 // classification: hard labels (-1 = unknown)
  std::vector<std::uint8_t> categorical;   // per column
  std::vector<std::uint8_t> missing;       // n * d row-major, empty when complete
  std::size_t num_classes = 0;

  std::size_t rows() const { return x.dim(0); }
  std::size_t cols() const { return x.dim(1); }
  Real value(std::size_t row, std::size_t col) const { return x.data()[row * cols() + col]; }
  bool is_missing(std::size_t row, std::size_t col) const {
    return !missing.empty() && missing[row * cols() + col] != 0;
  }

  // Throws std::invalid_argument when the invariants do not hold.
  void validate() const;
  // Constant copy of the selected rows, in the given order.
  Dataset take_rows(std::span<const std::size_t> rows) const;
  // Constant copy of the selected columns, in the given order.
  Dataset take_columns(std::span<const std::size_t> cols) const;
  Dataset detached() const;
};

inline constexpr std::size_t kMaxClassResamples = 16;
inline constexpr Real kClipStd = 4;
inline constexpr Real kBracketEps = 1e-12;

GeneratorInstance sample_generator(const GeneratorHyperSpace& space, std::uint64_t seed,
                                   Real temperature = 0);

// Runs n independent standard-normal inputs through the MLP and reads out
// the selected neurons. Classification responses are discretized (softly
// when the response spec has a positive temperature); features with a
// discretizer become categorical. The result is normalized. Pure function of
// (instance, n, seed). When the instance's weights require gradients, x and
// y stay on the tape.
Dataset generate_dataset(const GeneratorInstance& g, std::size_t n, std::uint64_t seed);

// Class index for each value. A zero-variance column maps every value to
// permutation[count of quantiles <= 0].
std::vector<std::size_t> hard_discretize(std::span<const Real> column, const DiscretizerSpec& spec);

// Differentiable relaxation: permutation[k] + tau * log(1 + r), where k is the
// value's position among the unnormalized quantiles and r in [0, 1] its
// interpolation between the bracketing quantiles (column min and max act as
// the outer brackets). column is rank-1.
Tensor soft_discretize(const Tensor& column, const DiscretizerSpec& spec);

// Population-std z-score per column, then clip to [-4, 4]. Zero-variance
// columns become zeros. Stays on the tape.
Tensor standardize_columns(const Tensor& x);

struct ColumnStats {
  std::vector<Real> mean;
  std::vector<Real> scale;  // population std; 0 marks a zero-variance column
};

// Statistics over the first `rows` rows, skipping missing cells.
ColumnStats fit_column_stats(const Dataset& d, std::size_t rows);
// Applies stats to all rows: z-score, clip, zero-variance and missing -> 0.
Tensor apply_column_stats(const Dataset& d, const ColumnStats& stats);

// Normalizes x using the dataset's own statistics; the y column is kept.
Dataset normalize_dataset(const Dataset& d);

}  // namespace aptab
