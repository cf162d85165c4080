#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "xmd/tensor.hpp"

namespace xmd {

// Dense forward kernels. All functions are pure; operands are validated and
// shape mismatches throw DimensionError. Reverse-mode wrappers live in
// tape.hpp and reuse these kernels.

// Standard matrix product, rank-2 operands with matching inner extents.
Tensor matmul(const Tensor& a, const Tensor& b);

// Valid (no padding) cross-correlation. x is [c_in x L] (rank-1 treated as
// [1 x L]); kernels is [c_out x c_in x k] (rank-1 treated as [1 x 1 x k]).
// Output length L' = floor((L - k) / stride) + 1; rank-1 in, rank-1 out.
Tensor conv1d(const Tensor& x, const Tensor& kernels, std::size_t stride);

// Normalizes the last axis to mean 0 / variance 1 (biased variance, eps in
// the denominator), then applies gain and bias. x is rank 1 or 2.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);

// Max-subtracted softmax over the last axis. x is rank 1 or 2.
Tensor softmax(const Tensor& x);

// Exact GELU: x * Phi(x) with the Gaussian CDF via erf.
Tensor gelu(const Tensor& x);

// Mean / sum along `axis`, removing that axis. Rank 1 gives a rank-0 scalar;
// rank 2 gives a rank-1 vector. Empty axis is an error.
Tensor reduce_mean(const Tensor& x, std::size_t axis);
Tensor reduce_sum(const Tensor& x, std::size_t axis);

Tensor transpose(const Tensor& x);

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor sin(const Tensor& x);
Tensor exp(const Tensor& x);

// x is [m x n], b is [n]; adds b to every row.
Tensor add_rowvec(const Tensor& x, const Tensor& b);

// Column / row windows of a rank-2 tensor.
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t len);
Tensor concat_cols(std::span<const Tensor> parts);

// Stacks rank-1 vectors of equal width into a [B x d] matrix.
Tensor stack_rows(std::span<const Tensor> rows);

// Pairwise cosine similarities: out[i][j] = cos(a_i, b_j) for rows of the
// [B x d] operands. A zero-norm row is a degenerate-embedding error.
Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b);

// Mean softmax cross-entropy of logits [B x C] against integer targets:
// (1/B) sum_i (logsumexp(row_i) - row_i[t_i]).
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

namespace detail {
double gelu_scalar(double v);
double gelu_grad_scalar(double v);
// Output length of a valid conv window, or throws DimensionError.
std::size_t conv_out_len(std::size_t input_len, std::size_t kernel,
                         std::size_t stride);
}  // namespace detail

}  // namespace xmd
