#pragma once

// Differentiable primitives.
//
// Broadcasting is limited to leading dimensions: in a binary elementwise op
// the smaller operand's shape must equal the trailing dimensions of the
// larger one (a rank-0 scalar conforms with anything). Softmax, log-softmax
// and layer-norm act on the last axis. Gather and scatter-add address the
// flattened tensor.

#include <cstddef>
#include <span>
#include <vector>

#include "aptab/tensor.hpp"

namespace aptab {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, Real value);
Tensor scale(const Tensor& a, Real factor);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softplus(const Tensor& a);
// Identity on [lo, hi] (inclusive) with unit gradient, constant outside with
// zero gradient.
Tensor clip(const Tensor& a, Real lo, Real hi);

// [m,k]x[k,n], [b,m,k]x[b,k,n], or [b,m,k]x[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& a);
// [p,q,r] -> [q,p,r].
Tensor swap_leading(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
// Normalizes the last axis to zero mean and unit (population) variance.
Tensor layer_norm(const Tensor& a, Real eps);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Reductions over one axis; the axis is removed from the result shape.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor variance(const Tensor& a, std::size_t axis);  // population (1/n)
Tensor min(const Tensor& a, std::size_t axis);
Tensor max(const Tensor& a, std::size_t axis);

// x[..., c] * s[...]: scales each last-axis row by the matching entry of s.
Tensor scale_rows(const Tensor& x, const Tensor& s);

// out[i] = a.flat[index[i]], reshaped to out_shape.
Tensor gather(const Tensor& a, std::span<const std::size_t> index, Shape out_shape);
// out.flat[index[i]] += values.flat[i], out initialised to zeros(out_shape).
Tensor scatter_add(const Tensor& values, std::span<const std::size_t> index, Shape out_shape);

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Zero-pads or truncates the last axis to width.
Tensor pad_last(const Tensor& a, std::size_t width);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, Real v) { return add_scalar(a, v); }
inline Tensor operator-(const Tensor& a, Real v) { return add_scalar(a, -v); }
inline Tensor operator*(const Tensor& a, Real v) { return scale(a, v); }
inline Tensor operator*(Real v, const Tensor& a) { return scale(a, v); }

}  // namespace aptab
