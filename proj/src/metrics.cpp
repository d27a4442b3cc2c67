#include "aptab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include <fmt/format.h>

namespace aptab {
namespace {

double mean_of(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> smoothed(const Histogram2D& h, double alpha) {
  const double cells = static_cast<double>(h.counts.size());
  const double total = static_cast<double>(h.points) + alpha * cells;
  std::vector<double> p(h.counts.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = (h.counts[i] + alpha) / total;
  return p;
}

void require_two_features(const Dataset& d) {
  if (d.cols() != 2) {
    throw std::invalid_argument(
        fmt::format("diversity report needs two-feature datasets, found {} columns", d.cols()));
  }
}

}  // namespace

double binary_auc(std::span<const double> positive, std::span<const double> negative) {
  const std::size_t np = positive.size();
  const std::size_t nn = negative.size();
  if (np == 0 || nn == 0) throw std::invalid_argument("binary_auc: empty class");
  std::vector<std::pair<double, bool>> all;
  all.reserve(np + nn);
  for (double s : positive) all.emplace_back(s, true);
  for (double s : negative) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  // Twice the positive rank sum, using average ranks for ties.
  double rank_sum2 = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::size_t pos = 0;
    while (j < all.size() && all[j].first == all[i].first) pos += all[j++].second;
    rank_sum2 += static_cast<double>(pos) * static_cast<double>(i + 1 + j);
    i = j;
  }
  const double u2 = rank_sum2 - static_cast<double>(np) * static_cast<double>(np + 1);
  return (u2 / 2) / (static_cast<double>(np) * static_cast<double>(nn));
}

double roc_auc_ovo(std::span<const Real> probs, std::span<const int> classes,
                   std::span<const int> labels) {
  const std::size_t c = classes.size();
  if (probs.size() != labels.size() * c) {
    throw std::invalid_argument("roc_auc_ovo: probability matrix does not match labels");
  }
  const std::set<int> present(labels.begin(), labels.end());
  if (present.size() < 2) throw std::invalid_argument("roc_auc_ovo: need at least two classes");
  auto score = [&](std::size_t row, int cls) -> double {
    const auto it = std::find(classes.begin(), classes.end(), cls);
    if (it == classes.end()) return 0.0;
    return probs[row * c + static_cast<std::size_t>(it - classes.begin())];
  };
  const std::vector<int> cls(present.begin(), present.end());
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < cls.size(); ++a) {
    for (std::size_t b = a + 1; b < cls.size(); ++b) {
      std::vector<double> a_on_a, a_on_b, b_on_a, b_on_b;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == cls[a]) {
          a_on_a.push_back(score(i, cls[a]));
          b_on_a.push_back(score(i, cls[b]));
        } else if (labels[i] == cls[b]) {
          a_on_b.push_back(score(i, cls[a]));
          b_on_b.push_back(score(i, cls[b]));
        }
      }
      total += 0.5 * (binary_auc(a_on_a, a_on_b) + binary_auc(b_on_b, b_on_a));
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

double roc_auc_ovo(const Prediction& pred, std::span<const int> labels) {
  return roc_auc_ovo(pred.probs.data(), pred.classes, labels);
}

double mean_squared_error(std::span<const Real> predicted, std::span<const Real> truth) {
  if (predicted.size() != truth.size() || truth.empty()) {
    throw std::invalid_argument("mean_squared_error: size mismatch");
  }
  double total = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double e = predicted[i] - truth[i];
    total += e * e;
  }
  return total / static_cast<double>(truth.size());
}

double population_std(std::span<const double> values) {
  if (values.empty()) return 0;
  const double mu = mean_of(values);
  double ss = 0;
  for (double v : values) ss += (v - mu) * (v - mu);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

std::vector<std::vector<std::size_t>> dense_ranks(const std::vector<std::vector<double>>& scores,
                                                  bool higher_is_better) {
  std::vector<std::vector<std::size_t>> ranks;
  ranks.reserve(scores.size());
  for (const auto& row : scores) {
    std::vector<double> distinct;
    for (double s : row) {
      if (!std::isnan(s)) distinct.push_back(s);
    }
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (higher_is_better) std::reverse(distinct.begin(), distinct.end());
    std::vector<std::size_t> r(row.size());
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (std::isnan(row[k])) {
        r[k] = distinct.size() + 1;
      } else {
        r[k] = static_cast<std::size_t>(std::find(distinct.begin(), distinct.end(), row[k]) -
                                        distinct.begin()) +
               1;
      }
    }
    ranks.push_back(std::move(r));
  }
  return ranks;
}

MetricReport rank_and_wins(const std::vector<std::vector<std::vector<double>>>& scores,
                           const std::vector<std::string>& names, bool higher_is_better) {
  if (scores.empty() || scores.front().empty()) throw std::invalid_argument("rank_and_wins: no scores");
  const std::size_t splits = scores.size();
  const std::size_t datasets = scores.front().size();
  const std::size_t algs = names.size();
  MetricReport report;
  std::vector<std::vector<double>> averaged(datasets, std::vector<double>(algs, 0));
  for (const auto& split : scores) {
    if (split.size() != datasets) throw std::invalid_argument("rank_and_wins: ragged score matrix");
    for (std::size_t i = 0; i < datasets; ++i) {
      if (split[i].size() != algs) throw std::invalid_argument("rank_and_wins: ragged score matrix");
      for (std::size_t k = 0; k < algs; ++k) {
        if (std::isnan(split[i][k])) ++report.nan_scores;
        averaged[i][k] += split[i][k] / static_cast<double>(splits);
      }
    }
  }
  report.ranks = dense_ranks(averaged, higher_is_better);
  for (std::size_t k = 0; k < algs; ++k) {
    AlgorithmSummary s;
    s.name = names[k];
    std::vector<double> ranks;
    std::vector<double> dataset_scores;
    std::vector<double> per_dataset_std;
    for (std::size_t i = 0; i < datasets; ++i) {
      ranks.push_back(static_cast<double>(report.ranks[i][k]));
      if (report.ranks[i][k] == 1) ++s.wins;
      dataset_scores.push_back(averaged[i][k]);
      std::vector<double> over_splits;
      for (std::size_t t = 0; t < splits; ++t) over_splits.push_back(scores[t][i][k]);
      per_dataset_std.push_back(population_std(over_splits));
    }
    std::vector<double> split_means;
    for (std::size_t t = 0; t < splits; ++t) {
      std::vector<double> row;
      for (std::size_t i = 0; i < datasets; ++i) row.push_back(scores[t][i][k]);
      split_means.push_back(mean_of(row));
    }
    s.mean_score = mean_of(dataset_scores);
    s.std_of_mean = population_std(split_means);
    s.mean_of_std = mean_of(per_dataset_std);
    s.mean_rank = mean_of(ranks);
    s.median_rank = median_of(ranks);
    s.min_rank = *std::min_element(ranks.begin(), ranks.end());
    s.max_rank = *std::max_element(ranks.begin(), ranks.end());
    report.algorithms.push_back(std::move(s));
  }
  return report;
}

Histogram2D::Histogram2D(std::size_t bins_, double lo_, double hi_)
    : bins(bins_), lo(lo_), hi(hi_), counts(bins_ * bins_, 0.0) {
  if (bins == 0 || !(lo < hi)) throw std::invalid_argument("Histogram2D: invalid grid");
}

void Histogram2D::add(double a, double b) {
  auto cell = [&](double v) {
    const double t = (v - lo) / (hi - lo) * static_cast<double>(bins);
    return static_cast<std::size_t>(std::clamp(t, 0.0, static_cast<double>(bins - 1)));
  };
  counts[cell(a) * bins + cell(b)] += 1;
  ++points;
}

bool Histogram2D::same_grid(const Histogram2D& other) const {
  return bins == other.bins && lo == other.lo && hi == other.hi;
}

double histogram_kl(const Histogram2D& p, const Histogram2D& q, double alpha) {
  if (!p.same_grid(q)) throw std::invalid_argument("histogram_kl: grid mismatch");
  if (!(alpha > 0)) throw std::invalid_argument("histogram_kl: smoothing must be positive");
  const auto ps = smoothed(p, alpha);
  const auto qs = smoothed(q, alpha);
  double kl = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) kl += ps[i] * std::log(ps[i] / qs[i]);
  return kl;
}

double dataset_pearson(const Dataset& d) {
  const std::size_t n = d.rows();
  const std::size_t cols = d.cols();
  if (n < 2 || cols == 0) return 0;
  std::vector<double> y(d.y.data().begin(), d.y.data().end());
  const double my = mean_of(y);
  double syy = 0;
  for (double v : y) syy += (v - my) * (v - my);
  double total = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    double mx = 0;
    for (std::size_t i = 0; i < n; ++i) mx += d.value(i, j);
    mx /= static_cast<double>(n);
    double sxx = 0;
    double sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dx = d.value(i, j) - mx;
      sxx += dx * dx;
      sxy += dx * (y[i] - my);
    }
    if (sxx > 0 && syy > 0) total += std::abs(sxy / std::sqrt(sxx * syy));
  }
  return total / static_cast<double>(cols);
}

Histogram2D pooled_histogram(std::span<const Dataset> collection, const DiversityOptions& options) {
  Histogram2D h(options.bins, options.lo, options.hi);
  for (const auto& d : collection) {
    require_two_features(d);
    for (std::size_t i = 0; i < d.rows() && h.points < options.max_points; ++i) {
      h.add(d.value(i, 0), d.value(i, 1));
    }
    if (h.points >= options.max_points) break;
  }
  return h;
}

DiversityReport prior_diversity_report(std::span<const Dataset> a, std::span<const Dataset> b,
                                       const DiversityOptions& options) {
  if (a.empty() || b.empty()) throw std::invalid_argument("diversity report: empty collection");
  DiversityReport report;
  const Histogram2D ha = pooled_histogram(a, options);
  const Histogram2D hb = pooled_histogram(b, options);
  report.points_a = ha.points;
  report.points_b = hb.points;
  report.density_a = smoothed(ha, options.alpha);
  report.density_b = smoothed(hb, options.alpha);
  if (options.per_dataset) {
    const std::size_t pairs = std::min(a.size(), b.size());
    double total = 0;
    for (std::size_t i = 0; i < pairs; ++i) {
      total += histogram_kl(pooled_histogram(a.subspan(i, 1), options),
                            pooled_histogram(b.subspan(i, 1), options), options.alpha);
    }
    report.kl = total / static_cast<double>(pairs);
  } else {
    report.kl = histogram_kl(ha, hb, options.alpha);
  }
  auto summarize = [](std::span<const Dataset> c, double& mean, double& std) {
    std::vector<double> r;
    for (const auto& d : c) r.push_back(dataset_pearson(d));
    mean = mean_of(r);
    std = population_std(r);
  };
  summarize(a, report.pearson_a_mean, report.pearson_a_std);
  summarize(b, report.pearson_b_mean, report.pearson_b_std);
  return report;
}

}  // namespace aptab
