#pragma once

#include <cstddef>
#include <vector>

#include "geclip/tensor/tensor.h"

// Differentiable operations. Every op records itself on the active tape when
// at least one input requires gradients. Shapes must match exactly; the only
// implicit expansions are scalar-tensor and per-row bias.
namespace geclip::ops {

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] . [n x k]^T -> [m x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x . W^T + b with x [m x in], W [out x in], b [out] (bias may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// [m x n] + [n] added to every row.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real value);
// Multiplies / divides every element by a one-element tensor.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor div_scalar(const Tensor& a, const Tensor& s);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
// Values clamped into [lo, hi]; gradient is zero where clamping is active.
Tensor clamp(const Tensor& a, Real lo, Real hi);
Tensor quick_gelu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// [m x n] -> [n], summing over rows.
Tensor sum_rows(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
// Normalizes along the last axis; eps is added to the variance inside the
// square root.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Real eps = 1e-5);
// Unit L2 norm along the last axis.
Tensor l2_normalize(const Tensor& x, Real eps = 1e-12);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// table[ids[i]] for each i -> [ids.size() x table.cols]
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);

// Dot product of two equal-shape tensors as a scalar.
Tensor dot(const Tensor& a, const Tensor& b);
// cos(a, b) for equal-length vectors; zero vectors raise NumericError.
Tensor cosine(const Tensor& a, const Tensor& b);

}  // namespace geclip::ops
