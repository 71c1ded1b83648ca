#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dnas/tensor.hpp"

// Differentiable primitives. Image tensors are NCHW.

namespace dnas::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product; `b` may also be a single-element tensor broadcast over `a`.
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var matmul(Var a, Var b);

/// Dense convolution with "same" zero padding (k/2). weight: [Cout, Cin, k, k], k odd.
Var conv2d(Var x, Var weight, int stride = 1);
/// Per-channel convolution, stride 1, same padding. weight: [C, 1, k, k].
Var depthwise_conv2d(Var x, Var weight);
/// x: [N, C, H, W], bias: [C].
Var add_channel_bias(Var x, Var bias);

/// Bilinear interpolation with half-pixel centers (align_corners = false).
Var resize_bilinear(Var x, std::int64_t out_h, std::int64_t out_w);
/// Non-overlapping k x k average pooling.
Var avg_pool2d(Var x, int k);
Var relu(Var x);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

/// Training mode normalizes with batch statistics and updates `stats`
/// (running variance uses the unbiased estimate); otherwise uses `stats`.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training,
               double momentum = 0.1, double eps = 1e-5);

Var softmax(Var x, int axis = -1);
Var log_softmax(Var x, int axis = -1);
Var log(Var x);
Var sum(Var x);
Var mean(Var x);

Var concat(std::span<const Var> xs, int axis);
/// Multiplies channel c by mask[c].
Var mask_channels(Var x, std::span<const double> mask);
Var gather_channels(Var x, std::span<const std::int64_t> channels);
/// Copy of `base` with channels `channels[i]` replaced by channel i of `replacement`.
Var merge_channels(Var base, Var replacement, std::span<const std::int64_t> channels);
/// 1-D gather.
Var select(Var x, std::span<const std::int64_t> index);
/// sum_i weights[i] * xs[i]; weights is 1-D with xs.size() entries.
Var mix(std::span<const Var> xs, Var weights);

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Mean softmax cross-entropy over labelled pixels of logits [N, C, H, W].
/// Labels are N*H*W class ids; pixels equal to `ignore` are skipped. A batch
/// with no labelled pixel yields 0 and a zero gradient.
Var cross_entropy(Var logits, std::span<const std::uint8_t> labels, std::uint8_t ignore = kIgnoreLabel);

}  // namespace dnas::ops
