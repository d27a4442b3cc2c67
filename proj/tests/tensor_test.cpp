#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "aptab/ops.hpp"
#include "aptab/optim.hpp"
#include "aptab/tensor.hpp"
#include "support/finite_diff.hpp"

namespace aptab {
namespace {

using testing::kGradientRelTolerance;
using testing::max_relative_error;
using testing::numeric_gradient;

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, bool requires_grad = true,
                     double lo = -1.5, double hi = 1.5) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

Shape random_shape(std::mt19937_64& rng, std::size_t min_rank = 1) {
  std::uniform_int_distribution<std::size_t> rank_dist(min_rank, 3);
  std::uniform_int_distribution<std::size_t> extent(1, 4);
  Shape s(rank_dist(rng));
  for (auto& e : s) e = extent(rng);
  return s;
}

// Checks d(sum(w * f(inputs)))/d(inputs) against central differences.
void expect_gradients_match(std::vector<Tensor> inputs,
                            const std::function<Tensor(const std::vector<Tensor>&)>& f,
                            std::mt19937_64& rng, const char* label) {
  const Tensor probe = f(inputs);
  const Tensor weights = random_tensor(probe.shape(), rng, false);
  auto objective = [&] { return sum(mul(f(inputs), weights)); };
  for (auto& in : inputs) in.zero_grad();
  backward(objective());
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    const auto numeric = numeric_gradient(in, [&] {
      NoGradGuard guard;
      return static_cast<double>(objective().item());
    });
    EXPECT_LE(max_relative_error(in.grad(), numeric), kGradientRelTolerance)
        << label << " input shape " << shape_to_string(in.shape());
  }
}

TEST(TensorTest, DataLengthMatchesShape) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<Real>(5)), ShapeError);
  const Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(Tensor::scalar(2.0).numel(), 1u);
}

TEST(ForwardOps, MatmulIdentityPadded) {
  const Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor eye(Shape{3, 2}, {1, 0, 0, 1, 0, 0});
  const Tensor c = matmul(a, eye);
  ASSERT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<Real>(c.data().begin(), c.data().end()), (std::vector<Real>{1, 2, 4, 5}));
}

TEST(ForwardOps, SoftmaxOfEqualLogitsIsUniform) {
  const Tensor p = softmax(Tensor::full({4}, 3.7));
  for (Real v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(ForwardOps, ScatterAddSumsPerIndex) {
  const Tensor values = Tensor::vector({0.2, 0.3, 0.5});
  const std::vector<std::size_t> index{1, 1, 0};
  const Tensor out = scatter_add(values, index, {2});
  EXPECT_DOUBLE_EQ(out[0], 0.5);
  EXPECT_DOUBLE_EQ(out[1], 0.5);
}

TEST(ForwardOps, ShapeMismatchNamesPrimitiveAndShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.primitive(), "matmul");
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor::zeros({3, 2}), Tensor::zeros({3})), ShapeError);
  EXPECT_NO_THROW(add(Tensor::zeros({3, 2}), Tensor::zeros({2})));
}

TEST(ForwardOps, ClipAndReductions) {
  const Tensor x = Tensor::vector({-5, 0.5, 9});
  const Tensor c = clip(x, -4, 4);
  EXPECT_EQ(c[0], -4);
  EXPECT_EQ(c[1], 0.5);
  EXPECT_EQ(c[2], 4);
  const Tensor m(Shape{2, 2}, {0, 10, 2, 4});
  const Tensor var = variance(m, 0);
  EXPECT_DOUBLE_EQ(var[0], 1.0);
  EXPECT_DOUBLE_EQ(var[1], 9.0);
  EXPECT_DOUBLE_EQ(min(m, 0)[1], 4.0);
  EXPECT_DOUBLE_EQ(max(m, 1)[0], 10.0);
}

TEST(Backward, SumOfSquares) {
  Tensor x = Tensor::vector({1, 2}, true);
  backward(sum(square(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, LogSoftmaxPickGradient) {
  Tensor z = Tensor::vector({0.3, -1.2, 2.0, 0.1}, true);
  const std::size_t k = 2;
  const std::vector<std::size_t> idx{k};
  // -log softmax(z)[k] has gradient softmax(z) - onehot(k).
  backward(neg(gather(log(softmax(z)), idx, {})));
  const Tensor p = softmax(z.detach());
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(z.grad()[i], p[i] - (i == k ? 1.0 : 0.0), 1e-12);
  }
}

TEST(Backward, RejectsNonScalarRootAndOffTapeRoot) {
  Tensor x = Tensor::vector({1, 2}, true);
  EXPECT_THROW(backward(square(x)), GradientError);
  EXPECT_THROW(backward(sum(Tensor::vector({1, 2}))), GradientError);
}

TEST(Backward, NonFiniteGradientNamesPrimitive) {
  Tensor x = Tensor::vector({0.0, 1.0}, true);
  try {
    backward(sum(sqrt(x)));
    FAIL() << "expected GradientError";
  } catch (const GradientError& e) {
    EXPECT_EQ(e.primitive(), "sqrt");
  }
}

TEST(Backward, GradientsMatchFiniteDifferencesPerPrimitive) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 12; ++trial) {
    const Shape s = random_shape(rng);
    const Shape tail(s.begin() + 1, s.end());
    auto x = random_tensor(s, rng);
    auto y = random_tensor(s, rng);
    auto t = random_tensor(tail.empty() ? Shape{} : tail, rng);
    auto pos = random_tensor(s, rng, true, 0.3, 2.0);
    expect_gradients_match({x, y}, [](auto& in) { return add(in[0], in[1]); }, rng, "add");
    expect_gradients_match({x, y}, [](auto& in) { return sub(in[0], in[1]); }, rng, "sub");
    expect_gradients_match({x, t}, [](auto& in) { return mul(in[0], in[1]); }, rng, "mul");
    expect_gradients_match({x, pos}, [](auto& in) { return div(in[0], in[1]); }, rng, "div");
    expect_gradients_match({x}, [](auto& in) { return scale(add_scalar(in[0], 0.3), -1.7); }, rng,
                           "affine");
    expect_gradients_match({x}, [](auto& in) { return exp(in[0]); }, rng, "exp");
    expect_gradients_match({pos}, [](auto& in) { return log(in[0]); }, rng, "log");
    expect_gradients_match({pos}, [](auto& in) { return sqrt(in[0]); }, rng, "sqrt");
    expect_gradients_match({x}, [](auto& in) { return tanh(in[0]); }, rng, "tanh");
    expect_gradients_match({x}, [](auto& in) { return sigmoid(in[0]); }, rng, "sigmoid");
    expect_gradients_match({x}, [](auto& in) { return gelu(in[0]); }, rng, "gelu");
    expect_gradients_match({x}, [](auto& in) { return softplus(in[0]); }, rng, "softplus");
    expect_gradients_match({x}, [](auto& in) { return square(in[0]); }, rng, "square");
    expect_gradients_match({x}, [](auto& in) { return softmax(in[0]); }, rng, "softmax");
    expect_gradients_match({x}, [](auto& in) { return log_softmax(in[0]); }, rng, "log_softmax");
    expect_gradients_match({x}, [](auto& in) { return layer_norm(in[0], 1e-5); }, rng,
                           "layer_norm");
    expect_gradients_match({x}, [](auto& in) { return mean(in[0]); }, rng, "mean");
    for (std::size_t axis = 0; axis < s.size(); ++axis) {
      expect_gradients_match({x}, [axis](auto& in) { return sum(in[0], axis); }, rng, "sum_axis");
      expect_gradients_match({x}, [axis](auto& in) { return variance(in[0], axis); }, rng,
                             "variance");
      expect_gradients_match({x}, [axis](auto& in) { return max(in[0], axis); }, rng, "max");
      expect_gradients_match({x}, [axis](auto& in) { return min(in[0], axis); }, rng, "min");
      const std::size_t e = s[axis];
      expect_gradients_match({x}, [axis, e](auto& in) { return slice(in[0], axis, e / 2, e); },
                             rng, "slice");
      expect_gradients_match(
          {x, y}, [axis](auto& in) { return concat(std::vector<Tensor>{in[0], in[1]}, axis); },
          rng, "concat");
    }
    expect_gradients_match({x}, [](auto& in) { return pad_last(in[0], 3); }, rng, "pad_last");
    expect_gradients_match(
        {x}, [](auto& in) { return reshape(in[0], {in[0].numel()}); }, rng, "reshape");
    if (s.size() >= 2) {
      expect_gradients_match({x}, [](auto& in) { return transpose(in[0]); }, rng, "transpose");
    }
    if (s.size() == 3) {
      expect_gradients_match({x}, [](auto& in) { return swap_leading(in[0]); }, rng,
                             "swap_leading");
    }
    if (s.size() >= 1) {
      const Shape rows(s.begin(), s.end() - 1);
      auto r = random_tensor(rows, rng);
      expect_gradients_match({x, r}, [](auto& in) { return scale_rows(in[0], in[1]); }, rng,
                             "scale_rows");
    }
  }
}

TEST(Backward, ClipGradientIsZeroOutsideRange) {
  Tensor x = Tensor::vector({-5, 0.5, 9}, true);
  backward(sum(clip(x, -4, 4)));
  EXPECT_EQ(x.grad()[0], 0);
  EXPECT_EQ(x.grad()[1], 1);
  EXPECT_EQ(x.grad()[2], 0);
}

TEST(Backward, MatmulGradientsAllLayouts) {
  std::mt19937_64 rng(3);
  auto a2 = random_tensor({3, 4}, rng);
  auto b2 = random_tensor({4, 2}, rng);
  auto a3 = random_tensor({2, 3, 4}, rng);
  auto b3 = random_tensor({2, 4, 5}, rng);
  expect_gradients_match({a2, b2}, [](auto& in) { return matmul(in[0], in[1]); }, rng, "mm");
  expect_gradients_match({a3, b3}, [](auto& in) { return matmul(in[0], in[1]); }, rng, "bmm");
  expect_gradients_match({a3, b2}, [](auto& in) { return matmul(in[0], in[1]); }, rng, "bcast");
}

TEST(Backward, GatherAndScatterGradients) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({3, 4}, rng);
  const std::vector<std::size_t> gidx{0, 5, 5, 11, 2};
  expect_gradients_match({x}, [&](auto& in) { return gather(in[0], gidx, {5}); }, rng, "gather");
  auto v = random_tensor({6}, rng);
  const std::vector<std::size_t> sidx{3, 0, 3, 1, 2, 0};
  expect_gradients_match({v}, [&](auto& in) { return scatter_add(in[0], sidx, {2, 2}); }, rng,
                         "scatter_add");
}

TEST(Backward, ScatterAddRoutesGradientsToSources) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 9;
    const std::size_t slots = 4;
    std::uniform_int_distribution<std::size_t> pick(0, slots - 1);
    std::vector<std::size_t> index(k);
    for (auto& i : index) i = pick(rng);
    Tensor values = random_tensor({k}, rng);
    const Tensor upstream = random_tensor({slots}, rng, false);
    backward(sum(mul(scatter_add(values, index, {slots}), upstream)));
    for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(values.grad()[i], upstream[index[i]]);
  }
}

TEST(Backward, AccumulationIsAdditive) {
  std::mt19937_64 rng(13);
  Tensor w = random_tensor({3, 3}, rng);
  const Tensor x = random_tensor({4, 3}, rng, false);
  const Tensor loss = sum(tanh(matmul(x, w)));
  auto tape = Tape::record(loss);
  tape.backward();
  tape.backward();
  const std::vector<Real> twice(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(loss, 2.0);
  for (std::size_t i = 0; i < twice.size(); ++i) EXPECT_NEAR(twice[i], w.grad()[i], 1e-14);
}

TEST(Tape, ConsumersPrecedeProducersAndClearFreesIntermediates) {
  std::mt19937_64 rng(17);
  Tensor w = random_tensor({3, 2}, rng);
  const Tensor x = random_tensor({2, 3}, rng, false);
  Tensor loss;
  std::weak_ptr<detail::Node> intermediate;
  {
    const Tensor h = tanh(matmul(x, w));
    intermediate = h.node_ptr();
    loss = sum(add(h, square(h)));
  }
  auto tape = Tape::record(loss);
  const auto& nodes = tape.nodes();
  ASSERT_FALSE(nodes.empty());
  EXPECT_EQ(nodes.front().get(), loss.node());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& parent : nodes[i]->parents) {
      if (!parent->requires_grad) continue;
      const auto pos = std::find(nodes.begin(), nodes.end(), parent) - nodes.begin();
      EXPECT_GT(static_cast<std::size_t>(pos), i);
    }
  }
  EXPECT_FALSE(intermediate.expired());
  tape.clear();
  EXPECT_TRUE(intermediate.expired());
  EXPECT_TRUE(loss.node()->parents.empty());
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::vector({1, 2}, true);
  NoGradGuard guard;
  const Tensor y = square(x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(AscendStep, SingleArithmeticStep) {
  std::vector<Tensor> p{Tensor::scalar(1.0, true)};
  p[0].mutable_grad()[0] = 2.0;
  ascend_step(p, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p[0].item(), 1.2);
}

TEST(AscendStep, DecayOnly) {
  std::vector<Tensor> p{Tensor::scalar(1.0, true)};
  p[0].zero_grad();
  ascend_step(p, 0.1, 0.5);
  EXPECT_DOUBLE_EQ(p[0].item(), 0.95);
}

TEST(AscendStep, MissingGradientIsAnError) {
  std::vector<Tensor> p{Tensor::scalar(1.0, true)};
  EXPECT_THROW(ascend_step(p, 0.1, 0.0), std::logic_error);
}

TEST(AscendStep, CombinedDescentAndAscentFromOneBackward) {
  // theta: "model" layer, eta: "generator" layer; loss depends on both.
  std::mt19937_64 rng(21);
  Tensor eta = random_tensor({3, 3}, rng);
  Tensor theta = random_tensor({3, 1}, rng);
  const Tensor z = random_tensor({5, 3}, rng, false);
  auto loss_fn = [&] { return mean(square(matmul(tanh(matmul(z, eta)), theta))); };

  // Reference: two separate backward passes, one per parameter group.
  Tensor eta_ref = eta.clone();
  Tensor theta_ref = theta.clone();
  {
    Tensor eta_c = eta.clone();
    Tensor theta_c = theta.clone().set_requires_grad(false);
    backward(mean(square(matmul(tanh(matmul(z, eta_c)), theta_c))));
    std::vector<Tensor> g{eta_c};
    ascend_step(g, 0.05, 1e-3);
    eta_ref = eta_c;
    Tensor eta_d = eta.clone().set_requires_grad(false);
    Tensor theta_d = theta.clone();
    backward(mean(square(matmul(tanh(matmul(z, eta_d)), theta_d))));
    std::vector<Tensor> h{theta_d};
    descend_step(h, 0.01);
    theta_ref = theta_d;
  }

  eta.zero_grad();
  theta.zero_grad();
  backward(loss_fn());
  std::vector<Tensor> agent{eta};
  std::vector<Tensor> model{theta};
  ascend_step(agent, 0.05, 1e-3);
  descend_step(model, 0.01);
  EXPECT_TRUE(all_finite(eta.data()));
  EXPECT_TRUE(all_finite(theta.data()));
  for (std::size_t i = 0; i < eta.numel(); ++i) EXPECT_NEAR(eta[i], eta_ref[i], 1e-14);
  for (std::size_t i = 0; i < theta.numel(); ++i) EXPECT_NEAR(theta[i], theta_ref[i], 1e-14);
}

TEST(Adam, MovesAgainstGradientByLearningRateOnFirstStep) {
  Tensor p = Tensor::vector({1.0, -1.0}, true);
  Adam adam({p}, AdamConfig{.lr = 0.1});
  p.mutable_grad()[0] = 3.0;
  p.mutable_grad()[1] = -0.5;
  adam.step();
  EXPECT_NEAR(p[0], 0.9, 1e-8);
  EXPECT_NEAR(p[1], -0.9, 1e-7);
}

}  // namespace
}  // namespace aptab
