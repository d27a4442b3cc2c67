#include "aptab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <unordered_set>
#include <utility>

#include <fmt/format.h>

namespace aptab {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ", "));
}

ShapeError::ShapeError(std::string primitive, const Shape& a, const Shape& b)
    : std::invalid_argument(fmt::format("{}: incompatible shapes {} and {}", primitive,
                                        shape_to_string(a), shape_to_string(b))),
      primitive_(std::move(primitive)) {}

ShapeError::ShapeError(std::string primitive, const std::string& detail)
    : std::invalid_argument(fmt::format("{}: {}", primitive, detail)),
      primitive_(std::move(primitive)) {}

GradientError::GradientError(std::string primitive, const std::string& what)
    : std::runtime_error(what), primitive_(std::move(primitive)) {}

namespace detail {

std::vector<Real>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), Real{0});
  return grad;
}

void Node::accumulate_grad(std::span<const Real> g) {
  auto& buffer = grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buffer[i] += g[i];
}

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<Real> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor", fmt::format("shape {} holds {} values, got {}",
                                           shape_to_string(shape), shape_numel(shape),
                                           data.size()));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, Real{0}, requires_grad);
}

Tensor Tensor::full(const Shape& shape, Real value, bool requires_grad) {
  return Tensor(shape, std::vector<Real>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<Real> values, bool requires_grad) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("dim", fmt::format("axis {} out of range for shape {}", axis,
                                        shape_to_string(shape())));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const Real> Tensor::data() const { return node_->data; }

std::span<Real> Tensor::mutable_data() { return node_->data; }

Real Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item", fmt::format("tensor of shape {} is not a scalar",
                                         shape_to_string(shape())));
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const Real> Tensor::grad() const { return node_->grad; }

std::span<Real> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), Real{0}); }

bool Tensor::is_leaf() const { return node_->is_leaf(); }

const char* Tensor::op() const { return node_->op; }

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

Tensor Tensor::clone() const { return Tensor(shape(), node_->data, requires_grad()); }

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

bool all_finite(std::span<const Real> values) {
  return std::all_of(values.begin(), values.end(), [](Real v) { return std::isfinite(v); });
}

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.defined()) return tape;
  // Iterative post-order DFS; post-order lists producers before consumers.
  std::vector<std::shared_ptr<detail::Node>> post;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(root.node_ptr(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
      continue;
    }
    post.push_back(node);
    stack.pop_back();
  }
  tape.order_.assign(post.rbegin(), post.rend());
  return tape;
}

void Tape::backward(Real upstream, const BackwardOptions& options) {
  if (order_.empty()) throw GradientError("", "backward: empty tape");
  auto& root = *order_.front();
  if (root.data.size() != 1) {
    throw GradientError("", fmt::format("backward: root must be a scalar, got shape {}",
                                        shape_to_string(root.shape)));
  }
  if (!root.requires_grad) {
    throw GradientError("", "backward: root is not on the tape (no input requires grad)");
  }
  root.grad_buffer()[0] += upstream;
  for (const auto& node : order_) {
    if (node->is_leaf()) continue;
    if (!node->grad.empty()) {
      node->backward(*node);
      if (options.check_finite) {
        for (const auto& parent : node->parents) {
          if (parent->requires_grad && !all_finite(parent->grad)) {
            throw GradientError(node->op,
                                fmt::format("backward: non-finite gradient produced by '{}'",
                                            node->op));
          }
        }
      }
    }
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

void Tape::clear() {
  for (const auto& node : order_) {
    if (node->is_leaf()) continue;
    node->backward = nullptr;
    node->parents.clear();
    node->grad.clear();
  }
  order_.clear();
}

void backward(const Tensor& loss, Real upstream, const BackwardOptions& options) {
  if (!loss.defined()) throw GradientError("", "backward: undefined root");
  Tape::record(loss).backward(upstream, options);
}

}  // namespace aptab
