#pragma once

// Evaluation metrics: one-vs-one ROC-AUC, ranks and wins across algorithms,
// and histogram-based diversity diagnostics for dataset collections.

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "aptab/model.hpp"
#include "aptab/prior.hpp"

namespace aptab {

// AUC of `scores` for positives against negatives; ties count one half.
double binary_auc(std::span<const double> positive, std::span<const double> negative);

// Multiclass AUC averaged over unordered pairs of classes present in
// `labels`; each pair averages the two directions (Hand and Till). probs is
// row-major [labels.size(), classes.size()]; a label missing from `classes`
// scores 0. Throws when fewer than two classes are present.
double roc_auc_ovo(std::span<const Real> probs, std::span<const int> classes,
                   std::span<const int> labels);
double roc_auc_ovo(const Prediction& pred, std::span<const int> labels);

double mean_squared_error(std::span<const Real> predicted, std::span<const Real> truth);

struct AlgorithmSummary {
  std::string name;
  double mean_score = 0;
  double std_of_mean = 0;  // std over splits of the across-dataset mean
  double mean_of_std = 0;  // across-dataset mean of the per-dataset std over splits
  double mean_rank = 0;
  double median_rank = 0;
  double min_rank = 0;
  double max_rank = 0;
  std::size_t wins = 0;
};

struct MetricReport {
  std::vector<AlgorithmSummary> algorithms;
  std::vector<std::vector<std::size_t>> ranks;  // [dataset][algorithm]
  std::size_t nan_scores = 0;
};

// Dense ranks per row of scores[dataset][algorithm] (ties share the best
// rank, NaN ranks last); every first place is a win.
std::vector<std::vector<std::size_t>> dense_ranks(const std::vector<std::vector<double>>& scores,
                                                  bool higher_is_better);

// scores[split][dataset][algorithm]. Ranks use the split-averaged score.
MetricReport rank_and_wins(const std::vector<std::vector<std::vector<double>>>& scores,
                           const std::vector<std::string>& names, bool higher_is_better);

// Population standard deviation.
double population_std(std::span<const double> values);

struct Histogram2D {
  std::size_t bins = 64;
  double lo = -4;
  double hi = 4;
  std::vector<double> counts;  // bins * bins, row-major over (first, second)
  std::size_t points = 0;

  Histogram2D(std::size_t bins, double lo, double hi);
  void add(double a, double b);
  bool same_grid(const Histogram2D& other) const;
};

// KL(p || q) between smoothed histogram densities:
// p_i = (c_i + alpha) / (N + alpha * B).
double histogram_kl(const Histogram2D& p, const Histogram2D& q, double alpha = 1e-3);

// Mean absolute Pearson correlation between each feature and the response.
double dataset_pearson(const Dataset& d);

struct DiversityOptions {
  std::size_t bins = 64;
  double lo = -4;
  double hi = 4;
  double alpha = 1e-3;
  std::size_t max_points = 100000;
  bool per_dataset = false;  // average per-dataset KLs instead of pooling
};

struct DiversityReport {
  double kl = 0;
  double pearson_a_mean = 0;
  double pearson_a_std = 0;
  double pearson_b_mean = 0;
  double pearson_b_std = 0;
  std::size_t points_a = 0;
  std::size_t points_b = 0;
  std::vector<double> density_a;  // smoothed, bins * bins
  std::vector<double> density_b;
};

// Datasets must have exactly two feature columns.
Histogram2D pooled_histogram(std::span<const Dataset> collection, const DiversityOptions& options);
DiversityReport prior_diversity_report(std::span<const Dataset> a, std::span<const Dataset> b,
                                       const DiversityOptions& options = {});

}  // namespace aptab
