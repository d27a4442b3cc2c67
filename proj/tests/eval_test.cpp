#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "aptab/inference.hpp"
#include "aptab/loss.hpp"
#include "aptab/metrics.hpp"
#include "aptab/ops.hpp"

namespace aptab {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.blocks = 1;
  c.heads = 2;
  c.ff_width = 16;
  c.feature_width = 8;
  return c;
}

Prediction classification(std::vector<int> classes, std::size_t rows, std::vector<Real> probs) {
  Prediction p;
  p.classes = std::move(classes);
  p.probs = Tensor({rows, p.classes.size()}, std::move(probs));
  return p;
}

Prediction gaussian(std::vector<Real> mu, std::vector<Real> sigma) {
  Prediction p;
  p.task = TaskKind::kRegression;
  p.mean = Tensor::vector(std::move(mu));
  p.stddev = Tensor::vector(std::move(sigma));
  return p;
}

Episode labelled_episode(std::vector<int> labels, std::size_t split) {
  Episode e;
  const std::size_t n = labels.size();
  e.data.x = Tensor::zeros({n, 1});
  std::vector<Real> y(labels.begin(), labels.end());
  e.data.y = Tensor::vector(std::move(y));
  e.data.labels = std::move(labels);
  e.data.categorical = {0};
  e.data.num_classes = 4;
  e.split = split;
  return e;
}

Dataset raw_dataset(std::size_t n, std::size_t d, std::uint64_t seed, int classes = 2) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0, 3);
  Dataset out;
  std::vector<Real> x(n * d);
  for (auto& v : x) v = normal(rng) + 10;
  out.x = Tensor({n, d}, std::move(x));
  out.categorical.assign(d, 0);
  out.num_classes = static_cast<std::size_t>(classes);
  std::vector<Real> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = out.x[i * d] > 10 ? 1 : 0;
    out.labels.push_back(classes > 2 ? static_cast<int>(i % static_cast<std::size_t>(classes)) : label);
    y[i] = static_cast<Real>(out.labels.back());
  }
  out.y = Tensor::vector(std::move(y));
  return out;
}

// Exhaustive pairwise counting, independent of the rank-sum formula.
double pairwise_auc_oracle(const std::vector<double>& pos, const std::vector<double>& neg) {
  double count = 0;
  for (double p : pos) {
    for (double q : neg) count += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
  }
  return count / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

TEST(Nll, UniformPredictionIsLogC) {
  const auto e = labelled_episode({0, 1, 2, 0, 1, 2}, 3);
  const auto p = classification({0, 1, 2}, 3, std::vector<Real>(9, 1.0 / 3));
  EXPECT_NEAR(nll(p, e).item(), std::log(3.0), 1e-12);
}

TEST(Nll, CertainTruthIsZero) {
  const auto e = labelled_episode({0, 1, 1, 0}, 2);
  const auto p = classification({0, 1}, 2, {0, 1, 1, 0});
  EXPECT_EQ(nll(p, e).item(), 0);
}

TEST(Nll, UnseenClassUsesFloor) {
  const auto e = labelled_episode({0, 1, 3, 1}, 2);
  const auto p = classification({0, 1}, 2, {0.5, 0.5, 0.25, 0.75});
  std::size_t unseen = 0;
  const double value = nll(p, e, &unseen).item();
  EXPECT_EQ(unseen, 1u);
  EXPECT_NEAR(value, 0.5 * (-std::log(1e-9) - std::log(0.75)), 1e-12);
}

TEST(Nll, MatchesRowwiseOracleOnModelOutput) {
  const Model model(small_config(), 3);
  GeneratorHyperSpace space;
  space.classes = {3, 5};
  const auto g = sample_generator(space, 4);
  Episode e{generate_dataset(g, 40, 5), 25};
  const auto pred = model.forward(e, {GateMode::kSample, 9});
  double oracle = 0;
  const std::size_t c = pred.classes.size();
  for (std::size_t i = 0; i < e.test_rows(); ++i) {
    const int truth = e.data.labels[e.split + i];
    double p = 0;
    for (std::size_t k = 0; k < c; ++k) {
      if (pred.classes[k] == truth) p = pred.probs[i * c + k];
    }
    oracle += -std::log(std::max(p, 1e-9));
  }
  oracle /= static_cast<double>(e.test_rows());
  EXPECT_NEAR(nll(pred, e).item(), oracle, 1e-12);
}

TEST(Nll, GaussianAtModeAndGradient) {
  Episode e;
  e.data.task = TaskKind::kRegression;
  e.data.x = Tensor::zeros({3, 1});
  e.data.y = Tensor::vector({0, 1.5, -0.5});
  e.data.categorical = {0};
  e.split = 1;
  Tensor mu(Shape{2}, {1.5, 0.25}, true);
  Prediction p;
  p.task = TaskKind::kRegression;
  p.mean = mu;
  p.stddev = Tensor::vector({0.5, 2});
  const Tensor loss = nll(p, e);
  const double half_log_2pi = 0.5 * std::log(2 * std::numbers::pi);
  const double expected = 0.5 * ((std::log(0.5) + half_log_2pi) +
                                 (std::log(2.0) + half_log_2pi + 0.5 * std::pow(0.75 / 2, 2)));
  EXPECT_NEAR(loss.item(), expected, 1e-12);
  backward(loss);
  EXPECT_NEAR(mu.grad()[0], 0.0, 1e-12);
  EXPECT_NEAR(mu.grad()[1], 0.5 * (0.25 - (-0.5)) / 4.0, 1e-12);
}

TEST(SampleSplit, BoundsAndUniformity) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_split(4, rng), 2u);
  std::vector<double> counts(99, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto l = sample_split(100, rng);
    ASSERT_GE(l, 10u);
    ASSERT_LE(l, 98u);
    counts[l] += 1;
  }
  const double expected = draws / 89.0;
  double chi2 = 0;
  for (std::size_t l = 10; l <= 98; ++l) chi2 += std::pow(counts[l] - expected, 2) / expected;
  // 99.9th percentile of chi-square with 88 degrees of freedom.
  EXPECT_LT(chi2, 135.0);
  EXPECT_THROW(sample_split(3, rng), std::invalid_argument);
}

TEST(Auc, PerfectSeparationIsOne) {
  const std::vector<int> labels{0, 0, 1, 1, 2};
  const std::vector<Real> probs{0.9, 0.05, 0.05, 0.8, 0.1, 0.1, 0.1, 0.7, 0.2,
                                0.2, 0.6, 0.2, 0.1, 0.1, 0.8};
  EXPECT_DOUBLE_EQ(roc_auc_ovo(probs, std::vector<int>{0, 1, 2}, labels), 1.0);
}

TEST(Auc, RandomScoresNearHalf) {
  Rng rng(7);
  std::uniform_real_distribution<double> u;
  std::vector<Real> probs;
  std::vector<int> labels;
  for (int i = 0; i < 10000; ++i) {
    const double s = u(rng);
    probs.push_back(1 - s);
    probs.push_back(s);
    labels.push_back(u(rng) < 0.5 ? 0 : 1);
  }
  EXPECT_NEAR(roc_auc_ovo(probs, std::vector<int>{0, 1}, labels), 0.5, 0.05);
}

TEST(Auc, MatchesPairwiseOracleOnSmallFixtures) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    std::uniform_int_distribution<int> coarse(0, 4);  // coarse scores force ties
    const std::size_t n = 12;
    std::vector<Real> probs(n * 3);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0;
      for (std::size_t k = 0; k < 3; ++k) total += probs[i * 3 + k] = coarse(rng) + 1;
      for (std::size_t k = 0; k < 3; ++k) probs[i * 3 + k] /= total;
      labels[i] = static_cast<int>(i % 3);
    }
    std::shuffle(labels.begin(), labels.end(), rng);
    double oracle = 0;
    for (int a = 0; a < 3; ++a) {
      for (int b = a + 1; b < 3; ++b) {
        std::vector<double> sa_a, sa_b, sb_a, sb_b;
        for (std::size_t i = 0; i < n; ++i) {
          if (labels[i] == a) {
            sa_a.push_back(probs[i * 3 + a]);
            sb_a.push_back(probs[i * 3 + b]);
          }
          if (labels[i] == b) {
            sa_b.push_back(probs[i * 3 + a]);
            sb_b.push_back(probs[i * 3 + b]);
          }
        }
        oracle += 0.5 * (pairwise_auc_oracle(sa_a, sa_b) + pairwise_auc_oracle(sb_b, sb_a));
      }
    }
    oracle /= 3;
    EXPECT_EQ(roc_auc_ovo(probs, std::vector<int>{0, 1, 2}, labels), oracle) << "seed " << seed;
  }
}

TEST(Auc, SingleClassIsAnError) {
  EXPECT_THROW(roc_auc_ovo(std::vector<Real>{0.5, 0.5}, std::vector<int>{0, 1}, std::vector<int>{1}),
               std::invalid_argument);
}

TEST(Ranks, SharedFirstPlaceGivesTwoWins) {
  const auto report = rank_and_wins({{{0.9, 0.9, 0.8}}}, {"a", "b", "c"}, true);
  EXPECT_EQ(report.ranks[0], (std::vector<std::size_t>{1, 1, 2}));
  EXPECT_EQ(report.algorithms[0].wins, 1u);
  EXPECT_EQ(report.algorithms[1].wins, 1u);
  EXPECT_EQ(report.algorithms[2].wins, 0u);
}

TEST(Ranks, StrictOrderGivesPermutations) {
  const std::vector<std::vector<double>> scores{{0.1, 0.7, 0.4}, {0.9, 0.2, 0.5}, {0.3, 0.6, 0.8}};
  for (const auto& r : dense_ranks(scores, true)) {
    std::vector<std::size_t> sorted = r;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<std::size_t>{1, 2, 3}));
  }
}

TEST(Ranks, MatchesSortOracle) {
  Rng rng(11);
  std::uniform_int_distribution<int> coarse(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> scores(5, std::vector<double>(4));
    for (auto& row : scores) {
      for (auto& s : row) s = coarse(rng) * 0.25;
    }
    const auto ranks = dense_ranks(scores, true);
    for (std::size_t i = 0; i < 5; ++i) {
      std::vector<double> order = scores[i];
      std::sort(order.begin(), order.end(), std::greater<>());
      order.erase(std::unique(order.begin(), order.end()), order.end());
      for (std::size_t k = 0; k < 4; ++k) {
        std::size_t expected = 1;
        while (order[expected - 1] != scores[i][k]) ++expected;
        EXPECT_EQ(ranks[i][k], expected);
      }
    }
    const auto report = rank_and_wins({scores}, {"a", "b", "c", "d"}, true);
    for (std::size_t k = 0; k < 4; ++k) {
      std::size_t wins = 0;
      for (std::size_t i = 0; i < 5; ++i) {
        wins += scores[i][k] == *std::max_element(scores[i].begin(), scores[i].end());
      }
      EXPECT_EQ(report.algorithms[k].wins, wins);
    }
  }
}

TEST(Ranks, NanRanksLastAndLowerIsBetter) {
  const auto r = dense_ranks({{0.3, std::nan(""), 0.1}}, false);
  EXPECT_EQ(r[0], (std::vector<std::size_t>{2, 3, 1}));
}

TEST(Ranks, BothStdStyles) {
  // Two splits, two datasets, one algorithm.
  const std::vector<std::vector<std::vector<double>>> scores{{{0.8}, {0.6}}, {{0.6}, {0.6}}};
  const auto report = rank_and_wins(scores, {"a"}, true);
  const auto& s = report.algorithms[0];
  EXPECT_NEAR(s.mean_score, 0.65, 1e-12);
  EXPECT_NEAR(s.std_of_mean, 0.05, 1e-12);  // split means 0.7 and 0.6
  EXPECT_NEAR(s.mean_of_std, 0.05, 1e-12);  // per-dataset stds 0.1 and 0
}

TEST(Diversity, IdenticalCollectionsHaveZeroKl) {
  GeneratorHyperSpace space;
  space.features = {2, 2};
  std::vector<Dataset> a;
  for (std::uint64_t s = 0; s < 20; ++s) a.push_back(generate_dataset(sample_generator(space, s), 60, s));
  EXPECT_EQ(prior_diversity_report(a, a).kl, 0);
}

TEST(Diversity, KlIsAsymmetric) {
  Histogram2D p(8, -4, 4);
  Histogram2D q(8, -4, 4);
  for (int i = 0; i < 100; ++i) p.add(0.1, 0.1);
  for (int i = 0; i < 50; ++i) q.add(0.1, 0.1);
  for (int i = 0; i < 50; ++i) q.add(-2, 3);
  EXPECT_GT(std::abs(histogram_kl(p, q) - histogram_kl(q, p)), 1e-3);
  Histogram2D r(16, -4, 4);
  EXPECT_THROW(histogram_kl(p, r), std::invalid_argument);
}

TEST(Diversity, HistogramKlMatchesGaussianClosedForm) {
  // N(0, 0.8^2 I) against N((0.5, -0.3), diag(1.2^2, 1.1^2)); q covers p, otherwise
  // empty q cells under tiny smoothing bias the plug-in estimate upward.
  const std::size_t n = 100000;
  Rng rng(5);
  std::normal_distribution<double> z;
  Histogram2D p(64, -4, 4);
  Histogram2D q(64, -4, 4);
  for (std::size_t i = 0; i < n; ++i) p.add(0.8 * z(rng), 0.8 * z(rng));
  for (std::size_t i = 0; i < n; ++i) q.add(0.5 + 1.2 * z(rng), -0.3 + 1.1 * z(rng));
  auto kl_1d = [](double m0, double s0, double m1, double s1) {
    return std::log(s1 / s0) + (s0 * s0 + (m0 - m1) * (m0 - m1)) / (2 * s1 * s1) - 0.5;
  };
  const double exact = kl_1d(0, 0.8, 0.5, 1.2) + kl_1d(0, 0.8, -0.3, 1.1);
  EXPECT_NEAR(histogram_kl(p, q), exact, 0.15 * exact);
}

TEST(Diversity, PearsonOfPerfectlyCorrelatedData) {
  Dataset d;
  d.x = Tensor({4, 2}, {1, -1, 2, -2, 3, -3, 4, -4});
  d.y = Tensor::vector({1, 2, 3, 4});
  d.categorical = {0, 0};
  EXPECT_NEAR(dataset_pearson(d), 1.0, 1e-12);
}

TEST(Subsample, BudgetBoundaryAndDeterminism) {
  Rng rng(1);
  const auto all = subsample_features(100, 100, rng);
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(all.back(), 99u);
  Rng a(9);
  Rng b(9);
  const auto s1 = subsample_features(150, 100, a);
  const auto s2 = subsample_features(150, 100, b);
  EXPECT_EQ(s1, s2);
  EXPECT_EQ(std::set<std::size_t>(s1.begin(), s1.end()).size(), 100u);
  EXPECT_LT(s1.back(), 150u);
}

TEST(Aggregate, HandMixture) {
  const std::vector<Prediction> parts{classification({0, 1}, 1, {1, 0}),
                                      classification({0, 1}, 1, {0, 1})};
  const std::vector<double> w{2.0 / 3, 1.0 / 3};
  const auto out = combine_classification(parts, w);
  EXPECT_NEAR(out.probs[0], 2.0 / 3, 1e-15);
  EXPECT_NEAR(out.probs[1], 1.0 / 3, 1e-15);
}

TEST(Aggregate, IdenticalBatchesAreAFixedPoint) {
  const auto p = classification({1, 4}, 2, {0.3, 0.7, 0.9, 0.1});
  const std::vector<Prediction> parts{p, p};
  const auto out = combine_classification(parts, std::vector<double>{0.5, 0.5});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.probs[i], p.probs[i], 1e-15);
}

TEST(Aggregate, InverseVariance) {
  const std::vector<Prediction> hand{gaussian({0}, {1}), gaussian({5}, {2})};
  EXPECT_NEAR(combine_regression(hand).mean[0], 1.0, 1e-12);
  const std::vector<Prediction> equal{gaussian({1, 2}, {3, 3}), gaussian({4, 8}, {3, 3})};
  const auto e = combine_regression(equal);
  EXPECT_NEAR(e.mean[0], 2.5, 1e-12);
  EXPECT_NEAR(e.mean[1], 5.0, 1e-12);
  const std::vector<Prediction> one{gaussian({7}, {0.5})};
  EXPECT_EQ(combine_regression(one).mean[0], 7);
  std::size_t dominated = 0;
  const std::vector<Prediction> floor{gaussian({1}, {kSigmaFloor}), gaussian({9}, {1})};
  combine_regression(floor, &dominated);
  EXPECT_EQ(dominated, 1u);
}

TEST(Aggregate, EstimateWithinRangeOfMeans) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-5, 5);
  std::uniform_real_distribution<double> s(0.1, 3);
  for (int t = 0; t < 100; ++t) {
    std::vector<Prediction> parts;
    double lo = 1e9;
    double hi = -1e9;
    for (int k = 0; k < 4; ++k) {
      const double mu = u(rng);
      lo = std::min(lo, mu);
      hi = std::max(hi, mu);
      parts.push_back(gaussian({mu}, {s(rng)}));
    }
    const double est = combine_regression(parts).mean[0];
    EXPECT_GE(est, lo - 1e-12);
    EXPECT_LE(est, hi + 1e-12);
  }
}

TEST(BatchPlanTest, WeightsProportionalToSizes) {
  const auto plan = make_batch_plan(7000, 3000, 4);
  ASSERT_EQ(plan.ranges.size(), 3u);
  EXPECT_NEAR(plan.weights[0], 3000.0 / 7000, 1e-15);
  EXPECT_NEAR(plan.weights[2], 1000.0 / 7000, 1e-15);
  EXPECT_NEAR(std::accumulate(plan.weights.begin(), plan.weights.end(), 0.0), 1.0, 1e-12);
  std::vector<std::size_t> sorted = plan.order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) ASSERT_EQ(sorted[i], i);
}

TEST(Predict, LeavesParametersUntouched) {
  const Model model(small_config(), 5);
  const auto before = model.checksum();
  const auto train = raw_dataset(40, 3, 1);
  const auto test = raw_dataset(10, 3, 2);
  const auto p = predict(model, train, test);
  EXPECT_EQ(model.checksum(), before);
  EXPECT_EQ(p.probs.dim(0), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(p.probs[i * 2] + p.probs[i * 2 + 1], 1, 1e-12);
}

TEST(Predict, DuplicateRowChangesOnlyThroughAttention) {
  const Model model(small_config(), 5);
  const auto train = raw_dataset(20, 2, 3);
  const auto test = raw_dataset(5, 2, 4);
  std::vector<std::size_t> rows(20);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  rows.push_back(0);
  const auto before = model.checksum();
  const auto a = predict(model, train, test);
  const auto b = predict(model, train.take_rows(rows), test);
  EXPECT_EQ(model.checksum(), before);
  double diff = 0;
  for (std::size_t i = 0; i < a.probs.numel(); ++i) diff += std::abs(a.probs[i] - b.probs[i]);
  EXPECT_GT(diff, 0);
}

TEST(Predict, SingleClassTrainingSet) {
  const Model model(small_config(), 6);
  auto train = raw_dataset(15, 2, 5);
  std::fill(train.labels.begin(), train.labels.end(), 1);
  const auto p = predict(model, train, raw_dataset(4, 2, 6));
  ASSERT_EQ(p.classes, (std::vector<int>{1}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.probs[i], 1);
}

TEST(Predict, ZeroTrainingRowsIsAnError) {
  const Model model(small_config(), 6);
  const auto test = raw_dataset(4, 2, 6);
  const auto empty = test.take_rows(std::vector<std::size_t>{});
  EXPECT_THROW(predict(model, empty, test), std::invalid_argument);
}

TEST(Predict, WideInputIsSubsampled) {
  const Model model(small_config(), 6);
  const auto train = raw_dataset(20, 150, 7);
  const auto p = predict(model, train, raw_dataset(3, 150, 8));
  EXPECT_EQ(p.probs.dim(0), 3u);
}

TEST(Predict, SingleBatchPlanEqualsPlainPredict) {
  const Model model(small_config(), 7);
  const auto train = raw_dataset(30, 2, 9);
  const auto test = raw_dataset(6, 2, 10);
  const auto plain = predict_single(model, train, test);
  const auto agg = aggregate_classification(model, train, test, make_batch_plan(30, 3000, 1));
  for (std::size_t i = 0; i < plain.probs.numel(); ++i) EXPECT_EQ(plain.probs[i], agg.probs[i]);
}

TEST(Predict, BatchedClassificationRowsAreSimplex) {
  const Model model(small_config(), 7);
  const auto train = raw_dataset(90, 2, 11, 3);
  const auto test = raw_dataset(6, 2, 12);
  const auto before = model.checksum();
  InferenceOptions options;
  options.batch_cap = 40;
  const auto p = predict(model, train, test, options);
  EXPECT_EQ(model.checksum(), before);
  const std::size_t c = p.classes.size();
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0;
    for (std::size_t k = 0; k < c; ++k) total += p.probs[i * c + k];
    EXPECT_NEAR(total, 1, 1e-6);
  }
}

TEST(Predict, RegressionOutputsInTargetUnits) {
  const Model model(small_config(), 8);
  auto train = raw_dataset(30, 2, 13);
  train.task = TaskKind::kRegression;
  train.labels.clear();
  std::vector<Real> y(30);
  for (std::size_t i = 0; i < 30; ++i) y[i] = 100 + train.value(i, 0);
  train.y = Tensor::vector(y);
  auto test = raw_dataset(5, 2, 14);
  test.task = TaskKind::kRegression;
  test.labels.clear();
  InferenceOptions options;
  options.batch_cap = 12;
  const auto p = predict(model, train, test, options);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_GT(p.mean[i], 80);
    EXPECT_LT(p.mean[i], 120);
    EXPECT_GT(p.stddev[i], 0);
  }
}

TEST(Ensemble, SingleMemberEqualsPredict) {
  const Model model(small_config(), 9);
  const auto train = raw_dataset(25, 4, 15);
  const auto test = raw_dataset(5, 4, 16);
  const auto plain = predict(model, train, test);
  const auto ens = permutation_ensemble(model, train, test, 1);
  for (std::size_t i = 0; i < plain.probs.numel(); ++i) {
    EXPECT_EQ(plain.probs[i], ens.prediction.probs[i]);
  }
  EXPECT_EQ(ens.member_variance, 0);
}

TEST(Ensemble, SeededAndReproducible) {
  const Model model(small_config(), 9);
  const auto train = raw_dataset(25, 4, 15);
  const auto test = raw_dataset(5, 4, 16);
  const auto before = model.checksum();
  InferenceOptions options;
  options.seed = 3;
  const auto a = permutation_ensemble(model, train, test, 4, options);
  const auto b = permutation_ensemble(model, train, test, 4, options);
  EXPECT_EQ(model.checksum(), before);
  EXPECT_EQ(a.permutations, b.permutations);
  for (std::size_t i = 0; i < a.prediction.probs.numel(); ++i) {
    EXPECT_EQ(a.prediction.probs[i], b.prediction.probs[i]);
  }
  EXPECT_GE(a.member_variance, 0);
}

}  // namespace
}  // namespace aptab
