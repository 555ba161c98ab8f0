#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "casam/tensor/tensor.hpp"

// Differentiable primitives. Shapes follow the NCHW convention: feature maps
// are [B,C,h,w], vectors are [B,D]. Every op checks its operand shapes and
// throws DimensionError on mismatch.

namespace casam::tensor {

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float value);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

/// a [B, ...rest] + b [...rest], b broadcast over the leading axis.
Tensor add_broadcast(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, Shape shape);

// Reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [B, ...] -> [B], summing everything but the leading axis.
Tensor sum_per_sample(const Tensor& a);

// Layers
/// x [B,in] * W[out,in]^T + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Cross-correlation. weight [Cout,Cin,k,k], bias [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);
/// Adjoint of conv2d. weight [Cin,Cout,k,k]; out = (in-1)*stride - 2*padding + k.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride, std::size_t padding);
/// Per-sample 1-D convolution along the channel axis of d [B,C] with a
/// [1,1,k] kernel, zero padding (k-1)/2, no bias.
Tensor conv1d_channel(const Tensor& d, const Tensor& weight);
/// Normalizes each (sample, position) across channels, then gain/bias per channel.
Tensor layer_norm_2d(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-6f);
/// [B,C,h,w] -> [B,C] spatial mean.
Tensor global_avg_pool(const Tensor& x);
/// u [B,C,h,w] * gate [B,C] broadcast over (h,w).
Tensor channel_scale(const Tensor& u, const Tensor& gate);
/// Concatenate [B,C1,h,w] and [B,C2,h,w] along channels.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Attention-weighted spatial sum: alpha = softmax(scores [B,h*w]) over
/// positions, out[b,c] = sum_p alpha[b,p] * x[b,c,p].
Tensor softmax_pool(const Tensor& x, const Tensor& scores);
/// scores[b,p] = sum_c query[c] * x[b,c,p] * factor.
Tensor channel_dot(const Tensor& x, const Tensor& query, float factor);

// Losses (scalar results)
/// Mean binary cross-entropy on logits against {0,1} targets.
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);
/// Mean over samples of 1 - (2*sum(p*y)+1)/(sum(p)+sum(y)+1), p = sigmoid(logits).
Tensor soft_dice_loss(const Tensor& logits, const Tensor& target);
/// Mean squared difference against a constant target.
Tensor mse(const Tensor& a, const Tensor& target);
/// Mean cross-entropy of logits [B,N] against class labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
/// 1 - cos(key, query); gradient flows into key only.
Tensor cosine_distance(const Tensor& key, std::span<const float> query);
/// sum_i fisher_i * (param_i - reference_i)^2.
Tensor weighted_sq_diff(const Tensor& param, std::span<const float> reference,
                        std::span<const float> fisher);

}  // namespace casam::tensor
