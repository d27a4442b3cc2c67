#include "aptab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include <Eigen/Core>
#include <fmt/format.h>

namespace aptab {
namespace {

using detail::Node;
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

using BackwardFn = std::function<void(const Node&)>;

Tensor make_result(Shape shape, std::vector<Real> data, const char* op,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward_fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!GradMode::enabled()) return out;
  const bool tracked =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
  if (!tracked) return out;
  Node* node = out.node();
  node->requires_grad = true;
  node->op = op;
  for (const Tensor* t : inputs) node->parents.push_back(t->node_ptr());
  node->backward = std::move(backward_fn);
  return out;
}

// Parent gradient buffer, or nullptr when that parent is a constant.
std::vector<Real>* grad_of(const Node& self, std::size_t parent) {
  Node& p = *self.parents[parent];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const std::vector<Real>& data_of(const Node& self, std::size_t parent) {
  return self.parents[parent]->data;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename F, typename D>
Tensor unary(const Tensor& a, const char* name, F f, D dfdx) {
  const auto x = a.data();
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(a.shape(), std::move(y), name, {&a}, [dfdx](const Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& x = data_of(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += self.grad[i] * dfdx(x[i], self.data[i]);
  });
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const bool b_small = is_suffix(b.shape(), a.shape());
  const bool a_small = is_suffix(a.shape(), b.shape());
  if (!a_small && !b_small) throw ShapeError(name, a.shape(), b.shape());
  const Shape& out_shape = b_small ? a.shape() : b.shape();
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t na = av.size();
  const std::size_t nb = bv.size();
  const std::size_t n = shape_numel(out_shape);
  std::vector<Real> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real p = av[i % na];
    const Real q = bv[i % nb];
    switch (kind) {
      case BinaryKind::kAdd: y[i] = p + q; break;
      case BinaryKind::kSub: y[i] = p - q; break;
      case BinaryKind::kMul: y[i] = p * q; break;
      case BinaryKind::kDiv: y[i] = p / q; break;
    }
  }
  return make_result(out_shape, std::move(y), name, {&a, &b}, [kind](const Node& self) {
    auto* ga = grad_of(self, 0);
    auto* gb = grad_of(self, 1);
    const auto& av = data_of(self, 0);
    const auto& bv = data_of(self, 1);
    const std::size_t na = av.size();
    const std::size_t nb = bv.size();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const Real g = self.grad[i];
      const Real p = av[i % na];
      const Real q = bv[i % nb];
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga) (*ga)[i % na] += g;
          if (gb) (*gb)[i % nb] += g;
          break;
        case BinaryKind::kSub:
          if (ga) (*ga)[i % na] += g;
          if (gb) (*gb)[i % nb] -= g;
          break;
        case BinaryKind::kMul:
          if (ga) (*ga)[i % na] += g * q;
          if (gb) (*gb)[i % nb] += g * p;
          break;
        case BinaryKind::kDiv:
          if (ga) (*ga)[i % na] += g / q;
          if (gb) (*gb)[i % nb] -= g * p / (q * q);
          break;
      }
    }
  });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* name) {
  if (axis >= shape.size()) {
    throw ShapeError(name, fmt::format("axis {} out of range for shape {}", axis,
                                       shape_to_string(shape)));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

std::size_t last_extent(const Tensor& a, const char* name) {
  if (a.rank() == 0) throw ShapeError(name, "requires rank >= 1");
  return a.shape().back();
}

Real sigmoid_value(Real x) {
  if (x >= 0) return Real{1} / (Real{1} + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real{1} + e);
}

template <bool kMax>
Tensor extreme(const Tensor& a, std::size_t axis, const char* name) {
  const auto s = split_axis(a.shape(), axis, name);
  if (s.len == 0) throw ShapeError(name, "empty axis");
  const auto x = a.data();
  std::vector<Real> y(s.outer * s.inner);
  std::vector<std::size_t> arg(y.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.len * s.inner + i;
      for (std::size_t k = 1; k < s.len; ++k) {
        const std::size_t idx = (o * s.len + k) * s.inner + i;
        if (kMax ? x[idx] > x[best] : x[idx] < x[best]) best = idx;
      }
      y[o * s.inner + i] = x[best];
      arg[o * s.inner + i] = best;
    }
  }
  return make_result(drop_axis(a.shape(), axis), std::move(y), name, {&a},
                     [arg = std::move(arg)](const Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t j = 0; j < arg.size(); ++j) (*gx)[arg[j]] += self.grad[j];
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kDiv, "div"); }

Tensor add_scalar(const Tensor& a, Real value) {
  return unary(
      a, "add_scalar", [value](Real x) { return x + value; }, [](Real, Real) { return Real{1}; });
}

Tensor scale(const Tensor& a, Real factor) {
  return unary(
      a, "scale", [factor](Real x) { return x * factor; }, [factor](Real, Real) { return factor; });
}

Tensor neg(const Tensor& a) {
  return unary(
      a, "neg", [](Real x) { return -x; }, [](Real, Real) { return Real{-1}; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](Real x) { return std::log(x); }, [](Real x, Real) { return Real{1} / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, "sqrt", [](Real x) { return std::sqrt(x); }, [](Real, Real y) { return Real{0.5} / y; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, "square", [](Real x) { return x * x; }, [](Real x, Real) { return 2 * x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](Real x) { return std::tanh(x); }, [](Real, Real y) { return 1 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, "sigmoid", sigmoid_value, [](Real, Real y) { return y * (1 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](Real x) { return x > 0 ? x : Real{0}; },
      [](Real x, Real) { return x > 0 ? Real{1} : Real{0}; });
}

Tensor gelu(const Tensor& a) {
  constexpr Real kInvSqrt2 = Real{1} / std::numbers::sqrt2_v<Real>;
  constexpr Real kInvSqrt2Pi = std::numbers::inv_sqrtpi_v<Real> * kInvSqrt2;
  return unary(
      a, "gelu", [](Real x) { return Real{0.5} * x * (1 + std::erf(x * kInvSqrt2)); },
      [](Real x, Real) {
        const Real cdf = Real{0.5} * (1 + std::erf(x * kInvSqrt2));
        return cdf + x * kInvSqrt2Pi * std::exp(Real{-0.5} * x * x);
      });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, "softplus",
      [](Real x) { return std::max(x, Real{0}) + std::log1p(std::exp(-std::abs(x))); },
      [](Real x, Real) { return sigmoid_value(x); });
}

Tensor clip(const Tensor& a, Real lo, Real hi) {
  if (lo > hi) throw ShapeError("clip", fmt::format("empty range [{}, {}]", lo, hi));
  return unary(
      a, "clip", [lo, hi](Real x) { return std::clamp(x, lo, hi); },
      [lo, hi](Real x, Real) { return (x >= lo && x <= hi) ? Real{1} : Real{0}; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa.size() > 3 || sb.size() > 3 ||
      sa.back() != sb[sb.size() - 2] || (sb.size() == 3 && (sa.size() != 3 || sa[0] != sb[0]))) {
    throw ShapeError("matmul", sa, sb);
  }
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  // A rank-2 right operand shares across the batch, so the left operand can be
  // flattened to one tall matrix.
  const bool batched = sb.size() == 3;
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t m = batched ? sa[1] : a.numel() / k;
  Shape out_shape = sa;
  out_shape.back() = n;
  std::vector<Real> y(batch * m * n);
  for (std::size_t p = 0; p < batch; ++p) {
    ConstMatrixMap am(a.data().data() + p * m * k, m, k);
    ConstMatrixMap bm(b.data().data() + p * k * n, k, n);
    MatrixMap ym(y.data() + p * m * n, m, n);
    ym.noalias() = am * bm;
  }
  return make_result(std::move(out_shape), std::move(y), "matmul", {&a, &b},
                     [batch, m, k, n](const Node& self) {
                       auto* ga = grad_of(self, 0);
                       auto* gb = grad_of(self, 1);
                       const auto& av = data_of(self, 0);
                       const auto& bv = data_of(self, 1);
                       for (std::size_t p = 0; p < batch; ++p) {
                         ConstMatrixMap gm(self.grad.data() + p * m * n, m, n);
                         if (ga) {
                           ConstMatrixMap bm(bv.data() + p * k * n, k, n);
                           MatrixMap gam(ga->data() + p * m * k, m, k);
                           gam.noalias() += gm * bm.transpose();
                         }
                         if (gb) {
                           ConstMatrixMap am(av.data() + p * m * k, m, k);
                           MatrixMap gbm(gb->data() + p * k * n, k, n);
                           gbm.noalias() += am.transpose() * gm;
                         }
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2 && a.rank() != 3) throw ShapeError("transpose", "requires rank 2 or 3");
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t rows = a.shape()[a.rank() - 2];
  const std::size_t cols = a.shape().back();
  Shape out_shape = a.shape();
  std::swap(out_shape[a.rank() - 2], out_shape[a.rank() - 1]);
  const auto x = a.data();
  std::vector<Real> y(x.size());
  for (std::size_t p = 0; p < batch; ++p) {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        y[p * rows * cols + j * rows + i] = x[p * rows * cols + i * cols + j];
      }
    }
  }
  return make_result(std::move(out_shape), std::move(y), "transpose", {&a},
                     [batch, rows, cols](const Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t p = 0; p < batch; ++p) {
                         for (std::size_t i = 0; i < rows; ++i) {
                           for (std::size_t j = 0; j < cols; ++j) {
                             (*gx)[p * rows * cols + i * cols + j] +=
                                 self.grad[p * rows * cols + j * rows + i];
                           }
                         }
                       }
                     });
}

Tensor swap_leading(const Tensor& a) {
  if (a.rank() != 3) throw ShapeError("swap_leading", "requires rank 3");
  const std::size_t p = a.dim(0);
  const std::size_t q = a.dim(1);
  const std::size_t r = a.dim(2);
  const auto x = a.data();
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      std::copy_n(x.data() + (i * q + j) * r, r, y.data() + (j * p + i) * r);
    }
  }
  return make_result(Shape{q, p, r}, std::move(y), "swap_leading", {&a},
                     [p, q, r](const Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t i = 0; i < p; ++i) {
                         for (std::size_t j = 0; j < q; ++j) {
                           for (std::size_t c = 0; c < r; ++c) {
                             (*gx)[(i * q + j) * r + c] += self.grad[(j * p + i) * r + c];
                           }
                         }
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  std::vector<Real> y(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(y), "reshape", {&a}, [](const Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
    }
  });
}

Tensor softmax(const Tensor& a) {
  const std::size_t c = last_extent(a, "softmax");
  const std::size_t rows = c == 0 ? 0 : a.numel() / c;
  const auto x = a.data();
  std::vector<Real> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * c;
    Real* yr = y.data() + r * c;
    const Real peak = *std::max_element(xr, xr + c);
    Real total = 0;
    for (std::size_t j = 0; j < c; ++j) total += (yr[j] = std::exp(xr[j] - peak));
    for (std::size_t j = 0; j < c; ++j) yr[j] /= total;
  }
  return make_result(a.shape(), std::move(y), "softmax", {&a}, [rows, c](const Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* yr = self.data.data() + r * c;
      const Real* gr = self.grad.data() + r * c;
      Real dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < c; ++j) (*gx)[r * c + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t c = last_extent(a, "log_softmax");
  const std::size_t rows = c == 0 ? 0 : a.numel() / c;
  const auto x = a.data();
  std::vector<Real> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * c;
    const Real peak = *std::max_element(xr, xr + c);
    Real total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(xr[j] - peak);
    const Real lse = peak + std::log(total);
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = xr[j] - lse;
  }
  return make_result(a.shape(), std::move(y), "log_softmax", {&a}, [rows, c](const Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* yr = self.data.data() + r * c;
      const Real* gr = self.grad.data() + r * c;
      Real total = 0;
      for (std::size_t j = 0; j < c; ++j) total += gr[j];
      for (std::size_t j = 0; j < c; ++j) (*gx)[r * c + j] += gr[j] - std::exp(yr[j]) * total;
    }
  });
}

Tensor layer_norm(const Tensor& a, Real eps) {
  const std::size_t c = last_extent(a, "layer_norm");
  const std::size_t rows = c == 0 ? 0 : a.numel() / c;
  const auto x = a.data();
  std::vector<Real> y(x.size());
  std::vector<Real> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * c;
    Real mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<Real>(c);
    Real var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<Real>(c);
    inv_std[r] = Real{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = (xr[j] - mu) * inv_std[r];
  }
  return make_result(
      a.shape(), std::move(y), "layer_norm", {&a},
      [rows, c, inv_std = std::move(inv_std)](const Node& self) {
        auto* gx = grad_of(self, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* yr = self.data.data() + r * c;
          const Real* gr = self.grad.data() + r * c;
          Real g_mean = 0;
          Real gy_mean = 0;
          for (std::size_t j = 0; j < c; ++j) {
            g_mean += gr[j];
            gy_mean += gr[j] * yr[j];
          }
          g_mean /= static_cast<Real>(c);
          gy_mean /= static_cast<Real>(c);
          for (std::size_t j = 0; j < c; ++j) {
            (*gx)[r * c + j] += inv_std[r] * (gr[j] - g_mean - yr[j] * gy_mean);
          }
        }
      });
}

Tensor sum(const Tensor& a) {
  Real total = 0;
  for (Real v : a.data()) total += v;
  return make_result(Shape{}, {total}, "sum", {&a}, [](const Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    for (Real& g : *gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const Real n = static_cast<Real>(a.numel());
  Real total = 0;
  for (Real v : a.data()) total += v;
  return make_result(Shape{}, {total / n}, "mean", {&a}, [n](const Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    for (Real& g : *gx) g += self.grad[0] / n;
  });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "sum");
  const auto x = a.data();
  std::vector<Real> y(s.outer * s.inner, Real{0});
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i)
        y[o * s.inner + i] += x[(o * s.len + k) * s.inner + i];
  return make_result(drop_axis(a.shape(), axis), std::move(y), "sum", {&a}, [s](const Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.len; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          (*gx)[(o * s.len + k) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "mean");
  return scale(sum(a, axis), Real{1} / static_cast<Real>(s.len));
}

Tensor variance(const Tensor& a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "variance");
  const Real len = static_cast<Real>(s.len);
  const auto x = a.data();
  std::vector<Real> mu(s.outer * s.inner, Real{0});
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) mu[o * s.inner + i] += x[(o * s.len + k) * s.inner + i];
  for (Real& m : mu) m /= len;
  std::vector<Real> y(mu.size(), Real{0});
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const Real d = x[(o * s.len + k) * s.inner + i] - mu[o * s.inner + i];
        y[o * s.inner + i] += d * d;
      }
  for (Real& v : y) v /= len;
  return make_result(drop_axis(a.shape(), axis), std::move(y), "variance", {&a},
                     [s, len, mu = std::move(mu)](const Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       const auto& x = data_of(self, 0);
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t k = 0; k < s.len; ++k)
                           for (std::size_t i = 0; i < s.inner; ++i) {
                             const std::size_t idx = (o * s.len + k) * s.inner + i;
                             const std::size_t r = o * s.inner + i;
                             (*gx)[idx] += self.grad[r] * 2 * (x[idx] - mu[r]) / len;
                           }
                     });
}

Tensor min(const Tensor& a, std::size_t axis) { return extreme<false>(a, axis, "min"); }
Tensor max(const Tensor& a, std::size_t axis) { return extreme<true>(a, axis, "max"); }

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  const std::size_t c = last_extent(x, "scale_rows");
  const Shape expected(x.shape().begin(), x.shape().end() - 1);
  if (s.shape() != expected) throw ShapeError("scale_rows", x.shape(), s.shape());
  const std::size_t rows = s.numel();
  const auto xv = x.data();
  const auto sv = s.data();
  std::vector<Real> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = xv[r * c + j] * sv[r];
  return make_result(x.shape(), std::move(y), "scale_rows", {&x, &s}, [rows, c](const Node& self) {
    auto* gx = grad_of(self, 0);
    auto* gs = grad_of(self, 1);
    const auto& xv = data_of(self, 0);
    const auto& sv = data_of(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      Real acc = 0;
      for (std::size_t j = 0; j < c; ++j) {
        const Real g = self.grad[r * c + j];
        if (gx) (*gx)[r * c + j] += g * sv[r];
        acc += g * xv[r * c + j];
      }
      if (gs) (*gs)[r] += acc;
    }
  });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw ShapeError("gather", fmt::format("{} indices cannot fill shape {}", index.size(),
                                           shape_to_string(out_shape)));
  }
  const auto x = a.data();
  std::vector<Real> y(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.size()) {
      throw ShapeError("gather", fmt::format("index {} out of range for {} elements", index[i],
                                             x.size()));
    }
    y[i] = x[index[i]];
  }
  return make_result(std::move(out_shape), std::move(y), "gather", {&a},
                     [idx = std::vector<std::size_t>(index.begin(), index.end())](const Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t i = 0; i < idx.size(); ++i) (*gx)[idx[i]] += self.grad[i];
                     });
}

Tensor scatter_add(const Tensor& values, std::span<const std::size_t> index, Shape out_shape) {
  if (index.size() != values.numel()) {
    throw ShapeError("scatter_add", fmt::format("{} indices for {} values", index.size(),
                                                values.numel()));
  }
  const std::size_t n = shape_numel(out_shape);
  const auto v = values.data();
  std::vector<Real> y(n, Real{0});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) {
      throw ShapeError("scatter_add",
                       fmt::format("index {} out of range for {} slots", index[i], n));
    }
    y[index[i]] += v[i];
  }
  return make_result(std::move(out_shape), std::move(y), "scatter_add", {&values},
                     [idx = std::vector<std::size_t>(index.begin(), index.end())](const Node& self) {
                       auto* gv = grad_of(self, 0);
                       if (!gv) return;
                       for (std::size_t i = 0; i < idx.size(); ++i) (*gv)[i] += self.grad[idx[i]];
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = split_axis(a.shape(), axis, "slice");
  if (begin > end || end > s.len) {
    throw ShapeError("slice", fmt::format("range [{}, {}) invalid for extent {}", begin, end, s.len));
  }
  const std::size_t width = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = width;
  const auto x = a.data();
  std::vector<Real> y(s.outer * width * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data() + (o * s.len + begin) * s.inner, width * s.inner,
                y.data() + o * width * s.inner);
  }
  return make_result(std::move(out_shape), std::move(y), "slice", {&a},
                     [s, begin, width](const Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t j = 0; j < width * s.inner; ++j)
                           (*gx)[(o * s.len + begin) * s.inner + j] +=
                               self.grad[o * width * s.inner + j];
                     });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& first = parts[0].shape();
  const auto s0 = split_axis(first, axis, "concat");
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape();
    Shape b = first;
    if (a.size() != b.size()) throw ShapeError("concat", first, p.shape());
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat", first, p.shape());
    lens.push_back(p.shape()[axis]);
    total += p.shape()[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<Real> y(s0.outer * total * s0.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t o = 0; o < s0.outer; ++o) {
      std::copy_n(x.data() + o * lens[k] * s0.inner, lens[k] * s0.inner,
                  y.data() + (o * total + offset) * s0.inner);
    }
    offset += lens[k];
  }
  Tensor out(std::move(out_shape), std::move(y));
  if (!GradMode::enabled()) return out;
  if (std::none_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); }))
    return out;
  Node* node = out.node();
  node->requires_grad = true;
  node->op = "concat";
  for (const auto& p : parts) node->parents.push_back(p.node_ptr());
  const std::size_t outer = s0.outer;
  const std::size_t inner = s0.inner;
  node->backward = [lens, total, outer, inner](const Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      if (auto* gx = grad_of(self, k)) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < lens[k] * inner; ++j)
            (*gx)[o * lens[k] * inner + j] += self.grad[(o * total + offset) * inner + j];
      }
      offset += lens[k];
    }
  };
  return out;
}

Tensor pad_last(const Tensor& a, std::size_t width) {
  const std::size_t c = last_extent(a, "pad_last");
  const std::size_t rows = c == 0 ? 0 : a.numel() / c;
  const std::size_t keep = std::min(c, width);
  Shape out_shape = a.shape();
  out_shape.back() = width;
  const auto x = a.data();
  std::vector<Real> y(rows * width, Real{0});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * c, keep, y.data() + r * width);
  return make_result(std::move(out_shape), std::move(y), "pad_last", {&a},
                     [rows, c, width, keep](const Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < keep; ++j)
                           (*gx)[r * c + j] += self.grad[r * width + j];
                     });
}

}  // namespace aptab
