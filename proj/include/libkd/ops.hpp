// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <vector>

#include "libkd/tensor.hpp"

// Differentiable primitives. Each records a backward rule on the active tape
// when an input requires grad. Unless noted, inputs must share dtype.

namespace libkd {

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// x + bias broadcast along every axis except `axis` (bias has x.size(axis) elements).
Tensor add_bias(const Tensor& x, const Tensor& bias, std::size_t axis);

/// Repeats a [1, ...] tensor `batch` times along axis 0.
Tensor broadcast_batch(const Tensor& x, std::size_t batch);

/// Multiplies sample b (axis 0) by the constant factors[b].
Tensor scale_samples(const Tensor& x, std::span<const double> factors);

Tensor relu(const Tensor& x);
/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
Tensor gelu(const Tensor& x);

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
Tensor concat(std::span<const Tensor> xs, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);

// ---- linear algebra -------------------------------------------------------

/// [m x k] * [k x n], or batched [B x m x k] * [B x k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[..., in] * w^T + bias, with w laid out [out x in]. bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// ---- normalization --------------------------------------------------------

/// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

/// Normalizes over every axis but 1 of x[B x C x ...]. In training mode the
/// running statistics are updated in place (unbiased variance, PyTorch style).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

// ---- softmax family and losses --------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Mean over the batch of -sum_c q_c log softmax(logits)_c, where q is the
/// one-hot target smoothed to (1 - s) onehot + s / C.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     double label_smoothing = 0.0);
/// Same with a soft target matrix whose rows are distributions.
Tensor cross_entropy(const Tensor& logits, const Tensor& target_probs, double label_smoothing = 0.0);

/// Mean over the batch of sum_c p log(p / q), with 0 log 0 := 0.
Tensor kl_divergence(const Tensor& p, const Tensor& q);

/// KL(p || softmax(logits)) evaluated through log_softmax, so it never
/// divides by an underflowed probability.
Tensor kl_divergence_logits(const Tensor& p, const Tensor& logits);

// ---- spatial operators ----------------------------------------------------

enum class PadMode { zeros, circular };

struct Conv2dOptions {
  std::size_t stride = 1;
  /// Defaults to kernel_size / 2 ("same" padding for stride 1).
  std::optional<std::size_t> padding;
  std::size_t groups = 1;
  PadMode pad_mode = PadMode::zeros;
};

/// x[B x Ci x H x W], w[Co x Ci/groups x K x K], bias[Co] or undefined.
/// Each output sums channel-major, then kernel row, then kernel column.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dOptions& opt = {});

/// Involution with externally generated per-pixel kernels:
/// x[B x C x H x W], kernels[B x (G*K*K) x H' x W'] laid out group-major.
/// Channel c uses kernel group c / (C / G). Zero "same" padding.
Tensor involution2d(const Tensor& x, const Tensor& kernels, std::size_t kernel_size,
                    std::size_t groups, std::size_t stride = 1);

/// Non-overlapping k x k average pooling; H and W must be divisible by k.
Tensor avg_pool2d(const Tensor& x, std::size_t k);

/// [B x C x H x W] -> [B x C].
Tensor global_avg_pool(const Tensor& x);

/// Parameter-free residual shortcut: spatial subsampling by `stride` and zero
/// channels appended up to out_channels.
Tensor shortcut_pad(const Tensor& x, std::size_t stride, std::size_t out_channels);

}  // namespace libkd
