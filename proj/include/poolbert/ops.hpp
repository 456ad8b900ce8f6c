#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "poolbert/rng.hpp"
#include "poolbert/tensor.hpp"

// Differentiable tensor operations. Every op records its backward closure on
// the active Tape (see tensor.hpp) when one of its inputs requires a gradient.
namespace poolbert::ops {

/// [m x k] * [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Per-batch product: [B x m x k] * [B x k x n] -> [B x m x n]. With
/// transpose_b the right operand is [B x n x k] and is used transposed.
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// x[..., in] * weight[out x in]^T + bias[out]. bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, real factor);
Tensor log(const Tensor& x);

/// Sum / mean of all elements, as a [1] tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Softmax along `axis`. The per-slice maximum is subtracted first.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalises over the last axis, then applies gamma/beta of that size.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps);

enum class GeluKind { tanh_approx, exact_erf };
Tensor gelu(const Tensor& x, GeluKind kind = GeluKind::tanh_approx);

/// Inverted dropout. Identity when !training or rate == 0.
Tensor dropout(const Tensor& x, real rate, bool training, Rng& rng);

/// Row lookup: output shape is index_shape + [H]. Every id must be < table rows.
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& index_shape);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, std::span<const std::size_t> order);

/// scores[B, heads, Tq, Tk]: positions whose key_mask[b * Tk + k] == 0 are
/// replaced by `fill`; their gradient is dropped.
Tensor mask_keys(const Tensor& scores, std::span<const std::uint8_t> key_mask, real fill = -real(1e9));

/// x[B, T, H] -> x[:, position, :].
Tensor select_position(const Tensor& x, std::size_t position);

/// Elementwise max / mean over positions t with mask[b * T + t] != 0.
/// Rows with no valid position raise InputError.
Tensor masked_max(const Tensor& x, std::span<const std::uint8_t> mask);
Tensor masked_mean(const Tensor& x, std::span<const std::uint8_t> mask);

/// Concatenation along the last axis; leading dims must agree.
Tensor concat_last(std::span<const Tensor> parts);

/// x[M, H] -> x[rows, H].
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Mean over rows of -log softmax(logits)[target].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

/// Sigmoid + binary cross-entropy against one-hot targets, averaged over all
/// B*K entries (the usual BCE-with-logits reduction).
Tensor bce_with_logits(const Tensor& logits, std::span<const std::int32_t> targets);

}  // namespace poolbert::ops

namespace poolbert::kernels {

/// c[m x n] (+)= a[m x k] * b[k x n]; row-major, rows may run in parallel.
void gemm(std::span<const real> a, std::span<const real> b, std::span<real> c, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate);

/// out[cols x rows] = in[rows x cols]^T.
void transpose(std::span<const real> in, std::span<real> out, std::size_t rows, std::size_t cols);

/// Softmax of one contiguous row (used by evaluation code that runs off-tape).
void softmax_row(std::span<const real> in, std::span<real> out);

}  // namespace poolbert::kernels
