// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adafuse/autodiff/tensor.hpp"
#include "adafuse/rng.hpp"

// Differentiable primitives. Every op records itself on the active tape when
// at least one input requires grad; otherwise it is a plain computation.
// Ops with a "[...x d]" operand treat all leading extents as rows.
namespace adafuse::ad {

enum class Activation { relu, leaky_relu, swish, gelu };

struct Nonlinearity {
  Activation kind = Activation::relu;
  double leaky_slope = 0.01;
};

/// Accepts "relu", "leakyrelu" (or "leaky_relu"), "swish", "gelu".
Activation parse_activation(std::string_view text);
std::string to_string(Activation kind);

/// [... x k] * [k x n] -> [... x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [... x k] * [n x k]^T -> [... x n]
Tensor matmul_transposed(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Adds a [d] vector to every row of [... x d].
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x * w + b
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Max-subtracted exponential normalization along `axis` (negative counts
/// from the back). Throws NumericError on non-finite input.
Tensor softmax(const Tensor& x, int axis = -1);

/// Per-row standardization over the last dim, then gain * xhat + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor nonlinearity(const Tensor& x, Nonlinearity kind);
inline Tensor nonlinearity(const Tensor& x, Activation kind) {
  return nonlinearity(x, Nonlinearity{kind, 0.01});
}

/// Mean negative log-softmax of the labelled class. Labels outside [0, c)
/// raise DataError.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Rows of x (viewed as [R x d]) at `rows`, giving [n x d].
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor reshape(const Tensor& x, Shape shape);

/// Dot product of matching rows: [... x d], [... x d] -> [... x 1].
Tensor row_dot(const Tensor& a, const Tensor& b);
/// Concatenate along the last dim; leading extents must agree.
Tensor concat_last(std::span<const Tensor> parts);
/// Column `index` of the last dim: [... x n] -> [... x 1].
Tensor select_last(const Tensor& x, std::size_t index);
/// x[..., j] * w[..., 0]: [... x d], [... x 1] -> [... x d].
Tensor mul_broadcast_last(const Tensor& x, const Tensor& w);

/// Inverted dropout; returns x unchanged when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

/// Multi-head scaled dot-product attention over q, k, v of shape [b x t x d].
/// Keys at positions >= lengths[batch] are masked out. When `probs` is given
/// it receives the attention weights [b x heads x t x t] (not differentiable).
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads, std::span<const std::size_t> lengths,
                            Tensor* probs = nullptr);

/// Elementwise op with caller-supplied value and derivative. Used to build
/// test programs, including deliberately wrong ones.
Tensor custom_elementwise(const Tensor& x, std::function<double(double)> value,
                          std::function<double(double)> derivative,
                          std::string op_name = "custom");

}  // namespace adafuse::ad
