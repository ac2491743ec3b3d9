#pragma once

#include <vector>

#include "satrack/tensor.hpp"

namespace satrack {

// Elementwise arithmetic. Operands must have identical shapes; there is no
// implicit broadcasting anywhere in this library. The only shape-mixing
// rules are the explicitly named ops below (add_rowwise, add_broadcast_batch).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);

/// Sum of all elements, returned as a [1] tensor.
Tensor sum(const Tensor& x);

/// x: [R x C] plus a row vector b: [C] added to every row.
Tensor add_rowwise(const Tensor& x, const Tensor& b);
/// x: [B x N x C] plus p: [N x C] added to every batch element.
Tensor add_broadcast_batch(const Tensor& x, const Tensor& p);

/// Standard matrix product [M x K] * [K x P] -> [M x P].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched matrix product [G x M x K] * [G x K x P] -> [G x M x P].
Tensor bmm(const Tensor& a, const Tensor& b);

/// Transposes the last two axes of a 2-d or 3-d tensor.
Tensor transpose_last2(const Tensor& x);
/// Returns a copy with a new shape of equal element count.
Tensor reshape(const Tensor& x, Shape new_shape);
/// [A x B x C x D] -> [A x C x B x D]; self-inverse.
Tensor permute_0213(const Tensor& x);

/// Rows of x selected by index, [R x C] -> [K x C]. Indices may repeat.
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows);
/// Column slice [R x C] -> [R x len] starting at c0.
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t len);
/// Stacks K tensors of shape [C] into [K x C].
Tensor stack_rows(const std::vector<Tensor>& rows);
/// Concatenates along the channel axis: [B x C1 x H x W] + [B x C2 x H x W].
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// x viewed as [rows x in] times w [in x out] plus optional bias [out],
/// applied over the trailing axis; leading axes are preserved.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor linear(const Tensor& x, const Tensor& w);

/// General 2-d convolution, x: [B x Cin x H x W], w: [Cout x Cin x k x k],
/// zero padding `pad`, square stride. Out-of-bounds taps read zero and are
/// still counted as MACs, matching the analytic k^2*Cin*Cout*Hout*Wout form.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int pad);

/// Depthwise 3x3-style convolution: x [B x C x H x W], kernel [C x k x k],
/// bias [C], stride 1, zero same-padding; k must be odd.
Tensor conv2d_depthwise(const Tensor& x, const Tensor& kernel,
                        const Tensor& bias);

/// Pointwise (1x1) convolution: x [B x Cin x H x W], w [Cout x Cin].
Tensor conv2d_pointwise(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Softmax over the trailing axis, max-shifted for stability.
Tensor softmax_rows(const Tensor& x);

/// Layer normalization over the trailing axis with affine parameters.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Per-row cross entropy -log softmax(logits)[target], logits [R x K],
/// targets holding R class indices; returns [R].
Tensor cross_entropy_rows(const Tensor& logits,
                          const std::vector<int64_t>& targets);

} // namespace satrack
