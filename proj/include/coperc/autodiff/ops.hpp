#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "coperc/autodiff/tape.hpp"
#include "coperc/autodiff/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the tape of its
// tracked inputs; when no input is tracked it only computes values and saves
// nothing. Elementwise binary ops require identical shapes: use broadcast()
// explicitly.
namespace coperc::ad {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// scale * x + shift
Tensor affine(const Tensor& x, double scale, double shift = 0.0);

/// (n, k) x (k, m) -> (n, m)
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// log(sigmoid(x)), stable for large |x|.
Tensor log_sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::int64_t axis);
Tensor mean(const Tensor& x);
Tensor softmax(const Tensor& x, std::int64_t axis);

struct MaxResult {
  Tensor values;
  /// Winning position along the reduced axis for every output element.
  std::vector<std::int64_t> argmax;
};

/// Maximum along `axis`; ties resolve to the lowest index and the gradient
/// flows to the winner only.
MaxResult max(const Tensor& x, std::int64_t axis);

/// Concatenation along the leading axis.
Tensor concat(std::span<const Tensor> parts);
/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);

/// Gathers rows (slices along axis 0). Index -1 yields a zero row.
Tensor index_select(const Tensor& x, std::span<const std::int64_t> rows);
/// out[rows[i]] += src[i] over leading-axis slices; out has `n_rows` rows.
/// Index -1 drops the row.
Tensor scatter_add(const Tensor& src, std::span<const std::int64_t> rows,
                   std::int64_t n_rows);

/// Prepends leading axes and expands size-1 axes to reach `shape`.
Tensor broadcast(const Tensor& x, const Shape& shape);
Tensor reshape(const Tensor& x, Shape shape);

}  // namespace coperc::ad
