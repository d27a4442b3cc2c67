#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "aptab/ops.hpp"
#include "aptab/model.hpp"

namespace aptab {
namespace {

ModelConfig tiny_config(HeadKind head = HeadKind::kMixture,
                        EmbeddingKind embedding = EmbeddingKind::kDense) {
  ModelConfig c;
  c.d_model = 16;
  c.blocks = 2;
  c.heads = 2;
  c.ff_width = 24;
  c.feature_width = 6;
  c.head = head;
  c.embedding = embedding;
  c.max_classes = 5;
  return c;
}

Episode make_episode(std::uint64_t seed, std::size_t n = 30, std::size_t classes_hi = 4) {
  GeneratorHyperSpace space;
  space.features = {2, 5};
  space.classes = {2, classes_hi};
  const auto g = sample_generator(space, seed);
  Episode e;
  e.data = generate_dataset(g, n, seed + 1).detached();
  e.split = n * 2 / 3;
  return e;
}

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> dist;
  std::vector<Real> v(rows * cols);
  for (auto& x : v) x = dist(rng);
  return Tensor({rows, cols}, std::move(v));
}

double max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i] - b[i])));
  return worst;
}

void expect_simplex_rows(const Prediction& p) {
  const std::size_t m = p.probs.dim(0);
  const std::size_t c = p.probs.dim(1);
  for (std::size_t i = 0; i < m; ++i) {
    double total = 0;
    for (std::size_t k = 0; k < c; ++k) {
      EXPECT_GE(p.probs[i * c + k], 0);
      total += p.probs[i * c + k];
    }
    EXPECT_NEAR(total, 1, 1e-6);
  }
}

TEST(Config, HeadsMustDivideWidth) {
  ModelConfig c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(Model(c, 1), std::invalid_argument);
  c = tiny_config();
  c.feature_width = 0;
  EXPECT_THROW(Model(c, 1), std::invalid_argument);
}

TEST(Embed, NarrowInputIsZeroPadded) {
  const Model model(tiny_config(), 3);
  const Tensor x = random_matrix(5, 2, 1);
  const Tensor padded = pad_last(x, 4);
  EXPECT_EQ(max_abs_diff(model.embed_features(x).data(), model.embed_features(padded).data()), 0);
}

TEST(Embed, IdenticalRowsGiveIdenticalTokens) {
  const Model model(tiny_config(), 3);
  const Tensor x({3, 2}, {0.5, -1, 0.5, -1, 2, 2});
  const Tensor tokens = model.embed(x, Tensor::vector({1, 1}), 2);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(tokens[k], tokens[16 + k]);
}

TEST(Embed, TestTokenIgnoresTestLabels) {
  const Model model(tiny_config(), 4);
  auto e = make_episode(5);
  const auto before = model.forward(e);
  auto y = e.data.y.mutable_data();
  for (std::size_t i = e.split; i < e.data.rows(); ++i) y[i] += 3;
  for (std::size_t i = e.split; i < e.data.rows(); ++i) e.data.labels[i] = 0;
  const auto after = model.forward(e);
  EXPECT_EQ(max_abs_diff(before.probs.data(), after.probs.data()), 0);
}

TEST(Embed, NoFeaturesIsAnError) {
  const Model model(tiny_config(), 4);
  EXPECT_THROW(model.embed_features(Tensor::zeros({3, 0})), ShapeError);
}

TEST(PatchEmbed, SinglePatchMatchesOneTokenAttention) {
  const Model model(tiny_config(HeadKind::kMixture, EmbeddingKind::kPatch), 6);
  const Tensor x = random_matrix(4, 6, 2);
  auto p = [&](const char* name) -> const Tensor& {
    for (const auto& t : model.named_parameters()) {
      if (t.name == name) return t.value;
    }
    throw std::logic_error(name);
  };
  auto lin = [&](const Tensor& v, const std::string& prefix) {
    return add(matmul(v, p((prefix + ".w").c_str())), p((prefix + ".b").c_str()));
  };
  // One token: attention weight is 1, so the block adds o(v(t)).
  const Tensor t = lin(x, "feature");
  const Tensor expected = add(mul(layer_norm(add(t, lin(lin(t, "patch.v"), "patch.o")), 1e-5),
                                  p("patch.ln.g")),
                              p("patch.ln.b"));
  EXPECT_LT(max_abs_diff(model.patch_embed(x).data(), expected.data()), 1e-12);
}

TEST(PatchEmbed, ZeroSecondPatchMatchesPaddedInput) {
  const Model model(tiny_config(HeadKind::kMixture, EmbeddingKind::kPatch), 6);
  const Tensor x = random_matrix(4, 7, 2);  // second patch is x[:, 6] plus zero padding
  const Tensor explicit_zeros = pad_last(x, 12);
  EXPECT_EQ(max_abs_diff(model.patch_embed(x).data(), model.patch_embed(explicit_zeros).data()), 0);
}

TEST(PatchEmbed, PatchOrderInvariantWithinPatchOrderMatters) {
  const Model model(tiny_config(HeadKind::kMixture, EmbeddingKind::kPatch), 8);
  const Tensor x = random_matrix(3, 12, 4);
  const Tensor swapped_patches =
      concat(std::vector<Tensor>{slice(x, 1, 6, 12), slice(x, 1, 0, 6)}, 1);
  EXPECT_LT(max_abs_diff(model.patch_embed(x).data(), model.patch_embed(swapped_patches).data()),
            1e-12);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j : {1, 0, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}) idx.push_back(i * 12 + j);
  }
  const Tensor swapped_features = gather(x, idx, {3, 12});
  EXPECT_GT(max_abs_diff(model.patch_embed(x).data(), model.patch_embed(swapped_features).data()),
            1e-6);
}

TEST(MaskedTransformer, TestRowPermutationEquivariance) {
  const Model model(tiny_config(), 9);
  const Tensor tokens = random_matrix(10, 16, 5);
  const std::size_t split = 6;
  std::vector<std::size_t> order{0, 1, 2, 3, 4, 5, 9, 7, 6, 8};
  std::vector<std::size_t> idx;
  for (std::size_t r : order) {
    for (std::size_t k = 0; k < 16; ++k) idx.push_back(r * 16 + k);
  }
  const Tensor out = model.encode(tokens, split);
  const Tensor permuted = model.encode(gather(tokens, idx, {10, 16}), split);
  EXPECT_LT(max_abs_diff(gather(out, idx, {10, 16}).data(), permuted.data()), 1e-9);
}

TEST(MaskedTransformer, AddingTestRowLeavesOthersUnchanged) {
  const Model model(tiny_config(), 9);
  const Tensor tokens = random_matrix(10, 16, 5);
  const Tensor extra = concat(std::vector<Tensor>{tokens, random_matrix(1, 16, 6)}, 0);
  const Tensor a = model.encode(tokens, 6);
  const Tensor b = slice(model.encode(extra, 6), 0, 0, 10);
  EXPECT_LT(max_abs_diff(a.data(), b.data()), 1e-9);
}

TEST(MaskedTransformer, TrainingTokensInfluenceTestRows) {
  const Model model(tiny_config(), 9);
  const Tensor tokens = random_matrix(10, 16, 5);
  Tensor zeroed = tokens.clone();
  std::fill_n(zeroed.mutable_data().begin(), 16, Real{0});
  const Tensor a = slice(model.encode(tokens, 6), 0, 6, 10);
  const Tensor b = slice(model.encode(zeroed, 6), 0, 6, 10);
  EXPECT_GT(max_abs_diff(a.data(), b.data()), 1e-6);
  EXPECT_THROW(model.encode(tokens, 0), ShapeError);
}

TEST(Mixture, OpenGatesUniformWeightsGiveFrequencies) {
  const Model model(tiny_config(), 10);
  const Tensor train = random_matrix(5, 16, 7);
  const Tensor test = Tensor::zeros({3, 16});
  const std::vector<int> labels{2, 0, 2, 2, 1};
  const auto p = model.mixture_block(test, train, labels, {GateMode::kOpen, 0});
  EXPECT_EQ(p.classes, (std::vector<int>{0, 1, 2}));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(p.probs[i * 3 + 0], 0.2, 1e-12);
    EXPECT_NEAR(p.probs[i * 3 + 1], 0.2, 1e-12);
    EXPECT_NEAR(p.probs[i * 3 + 2], 0.6, 1e-12);
  }
}

TEST(Mixture, SingleTrainingRowIsCertain) {
  const Model model(tiny_config(), 10);
  const auto p = model.mixture_block(random_matrix(4, 16, 1), random_matrix(1, 16, 2),
                                     std::vector<int>{3}, {});
  ASSERT_EQ(p.classes, (std::vector<int>{3}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.probs[i], 1);
}

TEST(Mixture, FiveClassesGiveSimplexRows) {
  const Model model(tiny_config(), 11);
  std::vector<int> labels;
  for (int i = 0; i < 20; ++i) labels.push_back(i % 5);
  for (auto mode : {GateMode::kSample, GateMode::kDeterministic, GateMode::kOpen}) {
    const auto p = model.mixture_block(random_matrix(6, 16, 3), random_matrix(20, 16, 4), labels,
                                       {mode, 17});
    EXPECT_EQ(p.probs.dim(1), 5u);
    expect_simplex_rows(p);
  }
}

TEST(Mixture, LabelAlphabetPermutationPermutesColumns) {
  const Model model(tiny_config(), 12);
  const Tensor train = random_matrix(12, 16, 8);
  const Tensor test = random_matrix(5, 16, 9);
  const std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3, 3, 3, 1, 0};
  const std::vector<int> sigma{2, 0, 3, 1};
  std::vector<int> relabeled;
  for (int y : labels) relabeled.push_back(sigma[static_cast<std::size_t>(y)]);
  const auto a = model.mixture_block(test, train, labels, {});
  const auto b = model.mixture_block(test, train, relabeled, {});
  for (std::size_t i = 0; i < 5; ++i) {
    for (int y = 0; y < 4; ++y) {
      // Row totals are summed in column order, which the relabeling changes.
      EXPECT_NEAR(a.probs[i * 4 + static_cast<std::size_t>(a.column_of(y))],
                  b.probs[i * 4 + static_cast<std::size_t>(b.column_of(sigma[static_cast<std::size_t>(y)]))],
                  1e-12);
    }
  }
}

TEST(Mixture, ClosedGatesFallBackToWeights) {
  Model model(tiny_config(), 13);
  for (const auto& p : model.named_parameters()) {
    if (p.name == "mixture.gate_bias") Tensor(p.value).mutable_data()[0] = -1e4;
  }
  const Tensor train = random_matrix(6, 16, 1);
  const Tensor test = random_matrix(3, 16, 2);
  const std::vector<int> labels{0, 1, 0, 1, 1, 0};
  const auto closed = model.mixture_block(test, train, labels, {});
  const auto open = model.mixture_block(test, train, labels, {GateMode::kOpen, 0});
  EXPECT_EQ(closed.fallback_rows, 3u);
  EXPECT_LT(max_abs_diff(closed.probs.data(), open.probs.data()), 1e-12);
}

TEST(Mixture, SampledGatesReproducible) {
  const Model model(tiny_config(), 14);
  const auto e = make_episode(21);
  const auto a = model.forward(e, {GateMode::kSample, 5});
  const auto b = model.forward(e, {GateMode::kSample, 5});
  EXPECT_EQ(max_abs_diff(a.probs.data(), b.probs.data()), 0);
}

TEST(Mixture, NoParameterDependsOnClassCount) {
  auto c3 = tiny_config();
  c3.max_classes = 3;
  auto c9 = tiny_config();
  c9.max_classes = 9;
  const Model a(c3, 1);
  const Model b(c9, 1);
  ASSERT_EQ(a.named_parameters().size(), b.named_parameters().size());
  for (std::size_t i = 0; i < a.named_parameters().size(); ++i) {
    EXPECT_EQ(a.named_parameters()[i].value.shape(), b.named_parameters()[i].value.shape());
  }
}

TEST(DenseHead, FullSoftmaxAndCap) {
  const Model model(tiny_config(HeadKind::kDense), 15);
  const auto p = model.dense_head(random_matrix(4, 16, 3), 5);
  EXPECT_EQ(p.probs.dim(1), 5u);
  expect_simplex_rows(p);
  try {
    model.dense_head(random_matrix(4, 16, 3), 6);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find('6'), std::string::npos);
    EXPECT_NE(what.find('5'), std::string::npos);
  }
}

TEST(DenseHead, EqualLogitsGiveUniform) {
  const Model model(tiny_config(HeadKind::kDense), 15);
  const auto p = model.dense_head(Tensor::zeros({2, 16}), 4);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(p.probs[i], 0.25);
}

TEST(GaussianHead, SigmaPositive) {
  const Model model(tiny_config(), 16);
  Tensor extreme = random_matrix(6, 16, 4);
  for (auto& v : extreme.mutable_data()) v *= 1e3;
  const auto p = model.gaussian_head(extreme);
  for (Real s : p.stddev.data()) EXPECT_GE(s, kSigmaFloor);
}

TEST(Forward, ClassificationRowsAreSimplex) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (auto head : {HeadKind::kMixture, HeadKind::kDense}) {
      const Model model(tiny_config(head), seed);
      const auto e = make_episode(seed * 7 + 1);
      expect_simplex_rows(model.forward(e, {GateMode::kSample, seed}));
    }
  }
}

TEST(Checkpoint, BitExactRoundTrip) {
  const Model model(tiny_config(HeadKind::kMixture, EmbeddingKind::kPatch), 77);
  const auto path = std::filesystem::temp_directory_path() / "aptab_model_test.ckpt";
  model.save(path);
  const Model back = Model::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(model.checksum(), back.checksum());
  ASSERT_EQ(model.named_parameters().size(), back.named_parameters().size());
  for (std::size_t i = 0; i < model.named_parameters().size(); ++i) {
    const auto& a = model.named_parameters()[i];
    const auto& b = back.named_parameters()[i];
    EXPECT_EQ(a.name, b.name);
    EXPECT_EQ(max_abs_diff(a.value.data(), b.value.data()), 0);
  }
  EXPECT_EQ(back.config().embedding, EmbeddingKind::kPatch);
  const auto e = make_episode(3);
  EXPECT_EQ(max_abs_diff(model.forward(e).probs.data(), back.forward(e).probs.data()), 0);
}

TEST(Checkpoint, CloneIsIndependent) {
  const Model model(tiny_config(), 5);
  Model copy = model.clone();
  EXPECT_EQ(copy.checksum(), model.checksum());
  Tensor(copy.named_parameters()[0].value).mutable_data()[0] += 1;
  EXPECT_NE(copy.checksum(), model.checksum());
}

}  // namespace
}  // namespace aptab
