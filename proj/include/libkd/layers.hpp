// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "libkd/ops.hpp"
#include "libkd/rng.hpp"
#include "libkd/tensor.hpp"

namespace libkd {

/// weight: trained with weight decay; no_decay: trained without it (biases,
/// norm scales, tokens, positional embeddings); buffer: not trained (running stats).
enum class ParamKind : std::uint8_t { weight, no_decay, buffer };

struct Param {
  std::string name;
  Tensor value;
  ParamKind kind;
};

/// Ordered, uniquely named collection of a model's tensors. Layers keep
/// aliases of the tensors registered here, so in-place updates through the
/// store (optimizer steps, checkpoint loads) are seen by the layers.
class ParamStore {
 public:
  explicit ParamStore(DType dtype = DType::f32) : dtype_(dtype) {}

  Tensor add(const std::string& name, Tensor value, ParamKind kind);

  DType dtype() const { return dtype_; }
  const std::vector<Param>& items() const { return items_; }
  const Param* find(const std::string& name) const;
  Tensor get(const std::string& name) const;
  /// Tensors of kind weight or no_decay, in registration order.
  std::vector<Tensor> trainable() const;
  /// Element count of trainable tensors.
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  DType dtype_;
  std::vector<Param> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Mode flags threaded through a forward pass. rng drives stochastic depth
/// and is only consulted in training mode.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

namespace nn {

/// Kaiming-normal (fan-out, ReLU gain) initialized convolution with odd kernel.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, std::size_t in_channels, std::size_t out_channels,
         std::size_t kernel_size, std::size_t stride, std::size_t groups, bool bias, Rng& rng);

  Tensor forward(const Tensor& x) const;

  std::size_t in_channels = 0, out_channels = 0, kernel_size = 0;
  Conv2dOptions options;
  Tensor weight, bias;
};

/// Convolution whose groups equal its channel count; each filter sees one channel.
Tensor depthwise_conv2d(const Tensor& x, const Conv2d& filter);

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& store, const std::string& name, std::size_t channels);

  Tensor forward(const Tensor& x, bool training) const;

  double momentum = 0.1, eps = 1e-5;
  Tensor gamma, beta, running_mean, running_var;
};

enum class LinearInit { trunc_normal, fan_in_uniform, zeros };

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in_features, std::size_t out_features,
         LinearInit init, Rng& rng);

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }

  Tensor weight, bias;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t dim);

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

  double eps = 1e-6;
  Tensor gamma, beta;
};

/// Involution with a per-pixel kernel generator: 1x1 reduce (C -> C/r),
/// batch norm, ReLU, 1x1 span (C/r -> K*K*G). For stride > 1 the generator
/// reads the average-pooled input so kernels align with output pixels.
class Involution2d {
 public:
  Involution2d() = default;
  Involution2d(ParamStore& store, const std::string& name, std::size_t channels, std::size_t kernel_size,
               std::size_t group_channels, std::size_t reduction_ratio, std::size_t stride, Rng& rng);

  /// Generated kernels [B x (G*K*K) x H' x W'].
  Tensor kernels(const Tensor& x, bool training) const;
  Tensor forward(const Tensor& x, bool training) const;

  std::size_t channels = 0, kernel_size = 0, groups = 0, stride = 1;
  Conv2d reduce, span;
  BatchNorm2d norm;
};

/// Multi-head self-attention with separate Q, K, V projections and an
/// output projection; scores are scaled by 1/sqrt(d / h).
class Mhsa {
 public:
  Mhsa() = default;
  Mhsa(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads, Rng& rng);

  /// y[B x M x d] -> [B x M x d]. When attention is non-null it receives the
  /// weights [B*h x M x M].
  Tensor forward(const Tensor& y, Tensor* attention = nullptr) const;

  std::size_t dim = 0, heads = 0;
  Linear q, k, v, proj;
};

/// Non-overlapping p x p patches, each flattened channel-major and linearly
/// projected; tokens in row-major patch order.
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(ParamStore& store, const std::string& name, std::size_t in_channels, std::size_t patch_size,
             std::size_t embed_dim, Rng& rng);

  Tensor forward(const Tensor& x) const;

  std::size_t in_channels = 0, patch_size = 0, embed_dim = 0;
  Tensor weight, bias;
};

/// Per-sample stochastic depth: in training mode each sample's branch is
/// dropped with probability `rate` and survivors are scaled by 1/(1-rate).
Tensor drop_path(const Tensor& x, double rate, const ForwardContext& ctx);

class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng);
  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  Linear fc1, fc2;
};

/// Pre-norm transformer block: x + dp(attn(ln1(x))), then x + dp(mlp(ln2(x))).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                   double mlp_ratio, double drop_path_rate, Rng& rng);

  Tensor forward(const Tensor& x, const ForwardContext& ctx) const;

  double drop_path_rate = 0.0;
  LayerNorm ln1, ln2;
  Mhsa attn;
  Mlp mlp;
};

enum class SpatialOp { convolution, involution };
enum class Shortcut { projection, zero_pad };

struct BottleneckConfig {
  std::size_t in_channels = 0, width = 0, expansion = 4, stride = 1, kernel_size = 3;
  SpatialOp op = SpatialOp::convolution;
  Shortcut shortcut = Shortcut::projection;
  std::size_t group_channels = 16, reduction_ratio = 4;
};

/// 1x1 reduce, K x K spatial operator (convolution or involution) carrying
/// the stride, 1x1 expand, each followed by batch norm; residual add, ReLU.
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(ParamStore& store, const std::string& name, const BottleneckConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
  std::size_t out_channels() const { return cfg.width * cfg.expansion; }

  BottleneckConfig cfg;
  Conv2d conv1, conv2, conv3, down;
  Involution2d inv;
  BatchNorm2d bn1, bn2, bn3, down_bn;
  bool has_down = false, pad_shortcut = false;
};

}  // namespace nn
}  // namespace libkd
