// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include "libkd/layers.hpp"

#include <cmath>

namespace libkd {

// ---- ParamStore -----------------------------------------------------------

Tensor ParamStore::add(const std::string& name, Tensor value, ParamKind kind) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  if (value.dtype() != dtype_) value = value.to(dtype_);
  if (kind != ParamKind::buffer) value.set_requires_grad(true);
  index_.emplace(name, items_.size());
  items_.push_back(Param{name, value, kind});
  return value;
}

const Param* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second];
}

Tensor ParamStore::get(const std::string& name) const {
  const Param* p = find(name);
  if (!p) throw ConfigError("unknown parameter '" + name + "'");
  return p->value;
}

std::vector<Tensor> ParamStore::trainable() const {
  std::vector<Tensor> out;
  for (const Param& p : items_) {
    if (p.kind != ParamKind::buffer) out.push_back(p.value);
  }
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const Param& p : items_) {
    if (p.kind != ParamKind::buffer) n += p.value.numel();
  }
  return n;
}

void ParamStore::zero_grad() {
  for (Param& p : items_) p.value.zero_grad();
}

namespace nn {

namespace {

Tensor trunc_normal(Shape shape, double stddev, Rng& rng, DType dt) {
  Tensor t = Tensor::zeros(std::move(shape), dt);
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, rng.trunc_normal(stddev));
  return t;
}

std::string join(const std::string& a, const char* b) { return a.empty() ? b : a + "." + b; }

}  // namespace

// ---- Conv2d ---------------------------------------------------------------

Conv2d::Conv2d(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
               std::size_t stride, std::size_t groups, bool has_bias, Rng& rng)
    : in_channels(in), out_channels(out), kernel_size(k) {
  if (k % 2 == 0) throw ConfigError(name + ": kernel size must be odd, got " + std::to_string(k));
  if (groups == 0 || in % groups != 0 || out % groups != 0) {
    throw ConfigError(name + ": channels " + std::to_string(in) + "->" + std::to_string(out) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (stride == 0) throw ConfigError(name + ": stride must be positive");
  options.stride = stride;
  options.groups = groups;
  const double stddev = std::sqrt(2.0 / static_cast<double>(out * k * k));
  weight = store.add(join(name, "weight"), Tensor::randn({out, in / groups, k, k}, rng, stddev, store.dtype()),
                     ParamKind::weight);
  if (has_bias) bias = store.add(join(name, "bias"), Tensor::zeros({out}, store.dtype()), ParamKind::no_decay);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, options); }

Tensor depthwise_conv2d(const Tensor& x, const Conv2d& f) {
  if (f.options.groups != f.in_channels || f.in_channels != f.out_channels) {
    throw ConfigError("depthwise_conv2d: filter groups must equal its channel count");
  }
  return f.forward(x);
}

// ---- BatchNorm2d ----------------------------------------------------------

BatchNorm2d::BatchNorm2d(ParamStore& store, const std::string& name, std::size_t c) {
  const DType dt = store.dtype();
  gamma = store.add(join(name, "weight"), Tensor::ones({c}, dt), ParamKind::no_decay);
  beta = store.add(join(name, "bias"), Tensor::zeros({c}, dt), ParamKind::no_decay);
  running_mean = store.add(join(name, "running_mean"), Tensor::zeros({c}, dt), ParamKind::buffer);
  running_var = store.add(join(name, "running_var"), Tensor::ones({c}, dt), ParamKind::buffer);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) const {
  Tensor rm = running_mean;
  Tensor rv = running_var;
  return batch_norm(x, gamma, beta, rm, rv, training, momentum, eps);
}

// ---- Linear / LayerNorm ---------------------------------------------------

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, LinearInit init,
               Rng& rng) {
  const DType dt = store.dtype();
  Tensor w, b;
  switch (init) {
    case LinearInit::trunc_normal:
      w = trunc_normal({out, in}, 0.02, rng, dt);
      b = Tensor::zeros({out}, dt);
      break;
    case LinearInit::fan_in_uniform: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      w = Tensor::uniform({out, in}, rng, -bound, bound, dt);
      b = Tensor::uniform({out}, rng, -bound, bound, dt);
      break;
    }
    case LinearInit::zeros:
      w = Tensor::zeros({out, in}, dt);
      b = Tensor::zeros({out}, dt);
      break;
  }
  weight = store.add(join(name, "weight"), w, ParamKind::weight);
  bias = store.add(join(name, "bias"), b, ParamKind::no_decay);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t dim) {
  gamma = store.add(join(name, "weight"), Tensor::ones({dim}, store.dtype()), ParamKind::no_decay);
  beta = store.add(join(name, "bias"), Tensor::zeros({dim}, store.dtype()), ParamKind::no_decay);
}

// ---- Involution2d ---------------------------------------------------------

Involution2d::Involution2d(ParamStore& store, const std::string& name, std::size_t c, std::size_t k,
                           std::size_t group_channels, std::size_t r, std::size_t s, Rng& rng)
    : channels(c), kernel_size(k), stride(s) {
  if (k % 2 == 0) throw ConfigError(name + ": kernel size must be odd, got " + std::to_string(k));
  if (group_channels == 0 || c % group_channels != 0) {
    throw ConfigError(name + ": " + std::to_string(c) + " channels not divisible by group width " +
                      std::to_string(group_channels));
  }
  if (r == 0 || c % r != 0) {
    throw ConfigError(name + ": " + std::to_string(c) + " channels not divisible by reduction ratio " +
                      std::to_string(r));
  }
  if (s == 0) throw ConfigError(name + ": stride must be positive");
  groups = c / group_channels;
  reduce = Conv2d(store, join(name, "reduce"), c, c / r, 1, 1, 1, false, rng);
  norm = BatchNorm2d(store, join(name, "reduce_bn"), c / r);
  span = Conv2d(store, join(name, "span"), c / r, k * k * groups, 1, 1, 1, true, rng);
}

Tensor Involution2d::kernels(const Tensor& x, bool training) const {
  Tensor src = x;
  if (stride > 1) {
    if (x.size(2) % stride != 0 || x.size(3) % stride != 0) {
      throw DimensionError("involution: input " + shape_str(x.shape()) + " not divisible by stride");
    }
    src = avg_pool2d(x, stride);
  }
  return span.forward(relu(norm.forward(reduce.forward(src), training)));
}

Tensor Involution2d::forward(const Tensor& x, bool training) const {
  if (x.dim() != 4 || x.size(1) != channels) {
    throw ConfigError("involution: expected " + std::to_string(channels) + " channels, got input " +
                      shape_str(x.shape()));
  }
  return involution2d(x, kernels(x, training), kernel_size, groups, stride);
}

// ---- attention ------------------------------------------------------------

Mhsa::Mhsa(ParamStore& store, const std::string& name, std::size_t d, std::size_t h, Rng& rng)
    : dim(d), heads(h) {
  if (h == 0 || d % h != 0) {
    throw ConfigError(name + ": model dim " + std::to_string(d) + " not divisible by " + std::to_string(h) +
                      " heads");
  }
  q = Linear(store, join(name, "q"), d, d, LinearInit::trunc_normal, rng);
  k = Linear(store, join(name, "k"), d, d, LinearInit::trunc_normal, rng);
  v = Linear(store, join(name, "v"), d, d, LinearInit::trunc_normal, rng);
  proj = Linear(store, join(name, "proj"), d, d, LinearInit::trunc_normal, rng);
}

Tensor Mhsa::forward(const Tensor& y, Tensor* attention) const {
  if (y.dim() != 3 || y.size(2) != dim) {
    throw DimensionError("mhsa: expected [B x M x " + std::to_string(dim) + "], got " + shape_str(y.shape()));
  }
  const std::size_t B = y.size(0), M = y.size(1), dh = dim / heads;
  auto split_heads = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {B, M, heads, dh}), {0, 2, 1, 3}), {B * heads, M, dh});
  };
  Tensor qh = split_heads(q.forward(y));
  Tensor kh = split_heads(k.forward(y));
  Tensor vh = split_heads(v.forward(y));
  Tensor scores = scale(matmul(qh, transpose(kh, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores, 2);
  if (attention) *attention = attn;
  Tensor ctx = matmul(attn, vh);
  Tensor merged = reshape(permute(reshape(ctx, {B, heads, M, dh}), {0, 2, 1, 3}), {B, M, dim});
  return proj.forward(merged);
}

// ---- patch embedding ------------------------------------------------------

PatchEmbed::PatchEmbed(ParamStore& store, const std::string& name, std::size_t c, std::size_t p, std::size_t d,
                       Rng& rng)
    : in_channels(c), patch_size(p), embed_dim(d) {
  if (p == 0) throw ConfigError(name + ": patch size must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(c * p * p));
  weight = store.add(join(name, "weight"), Tensor::uniform({d, c, p, p}, rng, -bound, bound, store.dtype()),
                     ParamKind::weight);
  bias = store.add(join(name, "bias"), Tensor::uniform({d}, rng, -bound, bound, store.dtype()),
                   ParamKind::no_decay);
}

Tensor PatchEmbed::forward(const Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != in_channels) {
    throw ConfigError("patch_embed: expected " + std::to_string(in_channels) + " channels, got " +
                      shape_str(x.shape()));
  }
  const std::size_t B = x.size(0), H = x.size(2), W = x.size(3);
  if (H % patch_size != 0 || W % patch_size != 0) {
    throw ConfigError("patch_embed: image " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by patch size " + std::to_string(patch_size));
  }
  Conv2dOptions opt;
  opt.stride = patch_size;
  opt.padding = 0;
  Tensor maps = conv2d(x, weight, bias, opt);  // [B x d x H/p x W/p]
  const std::size_t T = (H / patch_size) * (W / patch_size);
  return permute(reshape(maps, {B, embed_dim, T}), {0, 2, 1});
}

// ---- transformer ----------------------------------------------------------

Tensor drop_path(const Tensor& x, double rate, const ForwardContext& ctx) {
  if (!ctx.training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("drop_path: rate must be below 1");
  if (!ctx.rng) throw ContractError("drop_path: training mode requires an rng");
  std::vector<double> f(x.size(0));
  for (double& v : f) v = ctx.rng->bernoulli(1.0 - rate) ? 1.0 / (1.0 - rate) : 0.0;
  return scale_samples(x, f);
}

Mlp::Mlp(ParamStore& store, const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng) {
  fc1 = Linear(store, join(name, "fc1"), dim, hidden, LinearInit::trunc_normal, rng);
  fc2 = Linear(store, join(name, "fc2"), hidden, dim, LinearInit::trunc_normal, rng);
}

TransformerBlock::TransformerBlock(ParamStore& store, const std::string& name, std::size_t dim,
                                   std::size_t heads, double mlp_ratio, double rate, Rng& rng)
    : drop_path_rate(rate) {
  const auto hidden = static_cast<std::size_t>(std::lround(static_cast<double>(dim) * mlp_ratio));
  if (hidden == 0) throw ConfigError(name + ": mlp hidden size must be positive");
  ln1 = LayerNorm(store, join(name, "norm1"), dim);
  attn = Mhsa(store, join(name, "attn"), dim, heads, rng);
  ln2 = LayerNorm(store, join(name, "norm2"), dim);
  mlp = Mlp(store, join(name, "mlp"), dim, hidden, rng);
}

Tensor TransformerBlock::forward(const Tensor& x, const ForwardContext& ctx) const {
  Tensor h = add(x, drop_path(attn.forward(ln1.forward(x)), drop_path_rate, ctx));
  return add(h, drop_path(mlp.forward(ln2.forward(h)), drop_path_rate, ctx));
}

// ---- residual bottleneck --------------------------------------------------

Bottleneck::Bottleneck(ParamStore& store, const std::string& name, const BottleneckConfig& c, Rng& rng)
    : cfg(c) {
  const std::size_t out = out_channels();
  conv1 = Conv2d(store, join(name, "conv1"), c.in_channels, c.width, 1, 1, 1, false, rng);
  bn1 = BatchNorm2d(store, join(name, "bn1"), c.width);
  if (c.op == SpatialOp::convolution) {
    conv2 = Conv2d(store, join(name, "conv2"), c.width, c.width, c.kernel_size, c.stride, 1, false, rng);
  } else {
    inv = Involution2d(store, join(name, "conv2"), c.width, c.kernel_size, c.group_channels, c.reduction_ratio,
                       c.stride, rng);
  }
  bn2 = BatchNorm2d(store, join(name, "bn2"), c.width);
  conv3 = Conv2d(store, join(name, "conv3"), c.width, out, 1, 1, 1, false, rng);
  bn3 = BatchNorm2d(store, join(name, "bn3"), out);
  if (c.stride != 1 || c.in_channels != out) {
    if (c.shortcut == Shortcut::projection) {
      has_down = true;
      down = Conv2d(store, join(name, "downsample.conv"), c.in_channels, out, 1, c.stride, 1, false, rng);
      down_bn = BatchNorm2d(store, join(name, "downsample.bn"), out);
    } else {
      if (out < c.in_channels) throw ConfigError(name + ": zero-pad shortcut cannot reduce channels");
      pad_shortcut = true;
    }
  }
}

Tensor Bottleneck::forward(const Tensor& x, const ForwardContext& ctx) const {
  const bool tr = ctx.training;
  Tensor h = relu(bn1.forward(conv1.forward(x), tr));
  h = cfg.op == SpatialOp::convolution ? conv2.forward(h) : inv.forward(h, tr);
  h = relu(bn2.forward(h, tr));
  h = bn3.forward(conv3.forward(h), tr);
  Tensor identity = x;
  if (has_down) {
    identity = down_bn.forward(down.forward(x), tr);
  } else if (pad_shortcut) {
    identity = shortcut_pad(x, cfg.stride, out_channels());
  }
  return relu(add(h, identity));
}

}  // namespace nn
}  // namespace libkd
