#pragma once

// Zero-shot prediction on raw datasets: train-statistics normalization,
// feature subsampling, batch aggregation for large training sets and
// feature-permutation ensembles. None of these mutate the model.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "aptab/model.hpp"
#include "aptab/prior.hpp"

namespace aptab {

inline constexpr std::size_t kDefaultFeatureBudget = 100;
inline constexpr std::size_t kDefaultBatchCap = 3000;

struct InferenceOptions {
  std::size_t feature_budget = kDefaultFeatureBudget;
  std::size_t batch_cap = kDefaultBatchCap;
  std::uint64_t seed = 0;
};

// Sorted column indices: all of them when d <= budget, otherwise `budget`
// drawn uniformly without replacement.
std::vector<std::size_t> subsample_features(std::size_t d, std::size_t budget, Rng& rng);

struct BatchPlan {
  std::vector<std::size_t> order;  // shuffled training row indices
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) into order
  std::vector<double> weights;  // batch size / training rows
};

// Seeded shuffle, then contiguous batches of at most `cap` rows.
BatchPlan make_batch_plan(std::size_t rows, std::size_t cap, std::uint64_t seed);

// Weighted mixture of classification predictions over the union of their
// classes.
Prediction combine_classification(std::span<const Prediction> parts,
                                  std::span<const double> weights);
// Inverse-variance combination; the combined sigma is the pooled precision's
// inverse square root. `floor_dominated` counts rows where batches at the
// sigma floor carry more than 99% of the weight.
Prediction combine_regression(std::span<const Prediction> parts,
                              std::size_t* floor_dominated = nullptr);

// One forward pass over (train, test) with train-derived normalization.
// Training rows must carry labels (classification) or finite targets.
Prediction predict_single(const Model& model, const Dataset& train, const Dataset& test);

// predict_single after feature subsampling; training sets above the batch
// cap are split per make_batch_plan and aggregated.
Prediction predict(const Model& model, const Dataset& train, const Dataset& test,
                   const InferenceOptions& options = {});

Prediction aggregate_classification(const Model& model, const Dataset& train, const Dataset& test,
                                    const BatchPlan& plan);
Prediction aggregate_regression(const Model& model, const Dataset& train, const Dataset& test,
                                const BatchPlan& plan, std::size_t* floor_dominated = nullptr);

struct EnsembleResult {
  Prediction prediction;
  double member_variance = 0;  // mean over outputs of the variance across members
  std::vector<std::vector<std::size_t>> permutations;
};

// Member 0 uses the identity column order; others use seeded permutations
// applied to train and test alike.
EnsembleResult permutation_ensemble(const Model& model, const Dataset& train, const Dataset& test,
                                    std::size_t members, const InferenceOptions& options = {});

}  // namespace aptab
