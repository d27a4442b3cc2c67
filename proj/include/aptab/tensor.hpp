#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a reference-counted handle onto a graph node. Copying a Tensor
// shares the node (like a torch.Tensor); use clone() for an independent copy.
// Operations on tensors that require gradients record their inputs and a
// backward closure on the result node, so the graph rooted at a loss is the
// tape. Tape::record() linearizes it into reverse topological order.
//
// A graph and its tensors belong to one thread. Independent graphs may be
// built and differentiated on different threads concurrently.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aptab {

#ifdef APTAB_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Raised when operand shapes do not conform for a primitive.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string primitive, const Shape& a, const Shape& b);
  explicit ShapeError(std::string primitive, const std::string& detail);

  const std::string& primitive() const { return primitive_; }

 private:
  std::string primitive_;
};

// Raised by backward() on a malformed root or a non-finite gradient.
class GradientError : public std::runtime_error {
 public:
  GradientError(std::string primitive, const std::string& what);

  // The primitive whose backward rule produced the problem ("" if none).
  const std::string& primitive() const { return primitive_; }

 private:
  std::string primitive_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward;

  bool is_leaf() const { return !backward; }
  void accumulate_grad(std::span<const Real> g);
  std::vector<Real>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);
  static Tensor vector(std::vector<Real> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> data() const;
  // Writable view of the values. Only meaningful on leaves; writing into an
  // interior node does not update its consumers.
  std::span<Real> mutable_data();
  Real item() const;
  Real operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  // Sets the gradient buffer to zeros (allocating it if absent).
  void zero_grad();

  bool is_leaf() const;
  const char* op() const;

  // New constant leaf holding a copy of the values.
  Tensor detach() const;
  // New leaf holding a copy of the values and the requires_grad flag.
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Thread-local switch for graph recording. When disabled, operations produce
// constants even when their inputs require gradients.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct BackwardOptions {
  // Throw GradientError naming the primitive that first yields a non-finite
  // gradient. Training loops disable this and inspect parameter gradients.
  bool check_finite = true;
};

// Ordered record of the operations reachable from a scalar root. nodes()
// lists every node before all of the nodes it consumes, so replaying it front
// to back visits each node after all of its consumers.
class Tape {
 public:
  static Tape record(const Tensor& root);

  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

  // Seeds d(root)/d(root) = upstream and propagates to every leaf that
  // requires gradients. Interior gradients are released afterwards, so the
  // same tape may be replayed again and leaf gradients accumulate.
  void backward(Real upstream = 1, const BackwardOptions& options = {});

  // Drops saved intermediates and parent links of every interior node.
  void clear();

 private:
  std::vector<std::shared_ptr<detail::Node>> order_;
};

void backward(const Tensor& loss, Real upstream = 1, const BackwardOptions& options = {});

bool all_finite(std::span<const Real> values);

}  // namespace aptab
