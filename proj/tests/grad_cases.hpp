// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "libkd/ops.hpp"
#include "test_util.hpp"

namespace libkd::testing {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Case {
  const char* name;
  Fn f;
  std::function<std::vector<Tensor>(Rng&)> make;
};

inline Shape random_shape(Rng& rng, std::size_t rank) {
  Shape s(rank);
  for (auto& d : s) d = 1 + rng.uniform_index(6);
  return s;
}

/// Every differentiable primitive as a scalar function of random float64
/// inputs, for central finite-difference checks.
inline std::vector<Case> primitive_cases() {
  std::vector<Case> cases;
  auto two_same = [](Rng& rng) {
    Shape s = random_shape(rng, 2);
    return std::vector<Tensor>{randn64(s, rng), randn64(s, rng)};
  };
  auto one = [](Rng& rng) { return std::vector<Tensor>{randn64(random_shape(rng, 2), rng)}; };
  auto one3 = [](Rng& rng) { return std::vector<Tensor>{randn64(random_shape(rng, 3), rng)}; };
  cases.push_back({"add", [](auto& in) { return weighted_sum(add(in[0], in[1])); }, two_same});
  cases.push_back({"sub", [](auto& in) { return weighted_sum(sub(in[0], in[1])); }, two_same});
  cases.push_back({"mul", [](auto& in) { return weighted_sum(mul(in[0], in[1])); }, two_same});
  cases.push_back({"shared_input", [](auto& in) { return weighted_sum(mul(in[0], add(in[0], in[0]))); }, one});
  cases.push_back({"scale", [](auto& in) { return weighted_sum(scale(in[0], -1.7)); }, one});
  cases.push_back({"relu", [](auto& in) { return weighted_sum(relu(in[0])); },
                   [](Rng& rng) { return std::vector<Tensor>{randn64_nonzero(random_shape(rng, 2), rng)}; }});
  cases.push_back({"gelu", [](auto& in) { return weighted_sum(gelu(in[0])); }, one});
  cases.push_back({"add_bias",
                   [](auto& in) { return weighted_sum(add_bias(in[0], in[1], 1)); },
                   [](Rng& rng) {
                     Shape s = random_shape(rng, 3);
                     return std::vector<Tensor>{randn64(s, rng), randn64({s[1]}, rng)};
                   }});
  cases.push_back({"broadcast_batch", [](auto& in) { return weighted_sum(broadcast_batch(in[0], 3)); },
                   [](Rng& rng) { return std::vector<Tensor>{randn64({1, 2 + rng.uniform_index(4)}, rng)}; }});
  cases.push_back({"scale_samples",
                   [](auto& in) {
                     std::vector<double> f(in[0].size(0));
                     for (std::size_t i = 0; i < f.size(); ++i) f[i] = 0.5 + static_cast<double>(i);
                     return weighted_sum(scale_samples(in[0], f));
                   },
                   one3});
  cases.push_back({"reshape",
                   [](auto& in) { return weighted_sum(reshape(in[0], {in[0].numel()})); }, one3});
  cases.push_back({"permute", [](auto& in) { return weighted_sum(permute(in[0], {2, 0, 1})); }, one3});
  cases.push_back({"transpose", [](auto& in) { return weighted_sum(transpose(in[0], 0, 1)); }, one});
  cases.push_back({"concat",
                   [](auto& in) { return weighted_sum(concat({in[0], in[1]}, 1)); },
                   [](Rng& rng) {
                     const std::size_t r = 1 + rng.uniform_index(6);
                     return std::vector<Tensor>{randn64({r, 1 + rng.uniform_index(6)}, rng),
                                                randn64({r, 1 + rng.uniform_index(6)}, rng)};
                   }});
  cases.push_back({"slice",
                   [](auto& in) {
                     const std::size_t n = in[0].size(1);
                     return weighted_sum(slice(in[0], 1, n / 2, n - n / 2));
                   },
                   one3});
  cases.push_back({"sum_all", [](auto& in) { return sum(in[0]); }, one3});
  cases.push_back({"mean_all", [](auto& in) { return mean(in[0]); }, one3});
  cases.push_back({"sum_axis", [](auto& in) { return weighted_sum(sum(in[0], 1)); }, one3});
  cases.push_back({"mean_axis", [](auto& in) { return weighted_sum(mean(in[0], 2, true)); }, one3});
  cases.push_back({"matmul",
                   [](auto& in) { return weighted_sum(matmul(in[0], in[1])); },
                   [](Rng& rng) {
                     Shape s = random_shape(rng, 3);
                     return std::vector<Tensor>{randn64({s[0], s[1]}, rng), randn64({s[1], s[2]}, rng)};
                   }});
  cases.push_back({"linear",
                   [](auto& in) { return weighted_sum(linear(in[0], in[1], in[2])); },
                   [](Rng& rng) {
                     Shape s = random_shape(rng, 3);
                     return std::vector<Tensor>{randn64({s[0], s[1]}, rng), randn64({s[2], s[1]}, rng),
                                                randn64({s[2]}, rng)};
                   }});
  cases.push_back({"layer_norm",
                   [](auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2], 1e-6)); },
                   [](Rng& rng) {
                     Shape s = random_shape(rng, 2);
                     s[1] += 1;
                     return std::vector<Tensor>{randn64(s, rng), randn64({s[1]}, rng), randn64({s[1]}, rng)};
                   }});
  auto bn = [](bool training) {
    return [training](const std::vector<Tensor>& in) {
      const std::size_t C = in[0].size(1);
      Tensor rm = Tensor::zeros({C}, DType::f64);
      Tensor rv = Tensor::ones({C}, DType::f64);
      return weighted_sum(batch_norm(in[0], in[1], in[2], rm, rv, training));
    };
  };
  auto bn_inputs = [](Rng& rng) {
    Shape s{2 + rng.uniform_index(3), 1 + rng.uniform_index(4), 1 + rng.uniform_index(3)};
    return std::vector<Tensor>{randn64(s, rng), randn64({s[1]}, rng), randn64({s[1]}, rng)};
  };
  cases.push_back({"batch_norm_train", bn(true), bn_inputs});
  cases.push_back({"batch_norm_eval", bn(false), bn_inputs});
  cases.push_back({"softmax", [](auto& in) { return weighted_sum(softmax(in[0], 1)); }, one3});
  cases.push_back({"log_softmax", [](auto& in) { return weighted_sum(log_softmax(in[0], 0)); }, one3});
  cases.push_back({"cross_entropy_index",
                   [](auto& in) {
                     std::vector<std::size_t> y(in[0].size(0));
                     for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % in[0].size(1);
                     return cross_entropy(in[0], y, 0.1);
                   },
                   one});
  cases.push_back({"cross_entropy_soft",
                   [](auto& in) { return cross_entropy(in[0], softmax(in[1], 1), 0.1); },
                   two_same});
  cases.push_back({"kl_divergence",
                   [](auto& in) { return kl_divergence(softmax(in[0], 1), softmax(in[1], 1)); }, two_same});
  cases.push_back({"kl_divergence_logits",
                   [](auto& in) { return kl_divergence_logits(softmax(in[0], 1), in[1]); }, two_same});
  // Spatial operators on small images.
  cases.push_back({"conv2d",
                   [](auto& in) { return weighted_sum(conv2d(in[0], in[1], in[2])); },
                   [](Rng& rng) {
                     return std::vector<Tensor>{randn64({2, 3, 5, 4}, rng), randn64({2, 3, 3, 3}, rng),
                                                randn64({2}, rng)};
                   }});
  cases.push_back({"conv2d_strided_grouped_circular",
                   [](auto& in) {
                     Conv2dOptions o;
                     o.stride = 2;
                     o.groups = 2;
                     o.pad_mode = PadMode::circular;
                     return weighted_sum(conv2d(in[0], in[1], Tensor(), o));
                   },
                   [](Rng& rng) {
                     return std::vector<Tensor>{randn64({2, 4, 5, 5}, rng), randn64({4, 2, 3, 3}, rng)};
                   }});
  cases.push_back({"depthwise_conv2d",
                   [](auto& in) {
                     Conv2dOptions o;
                     o.groups = 3;
                     return weighted_sum(conv2d(in[0], in[1], in[2], o));
                   },
                   [](Rng& rng) {
                     return std::vector<Tensor>{randn64({2, 3, 4, 5}, rng), randn64({3, 1, 3, 3}, rng),
                                                randn64({3}, rng)};
                   }});
  cases.push_back({"involution2d",
                   [](auto& in) { return weighted_sum(involution2d(in[0], in[1], 3, 2)); },
                   [](Rng& rng) {
                     return std::vector<Tensor>{randn64({2, 4, 4, 5}, rng), randn64({2, 18, 4, 5}, rng)};
                   }});
  cases.push_back({"involution2d_strided",
                   [](auto& in) { return weighted_sum(involution2d(in[0], in[1], 3, 2, 2)); },
                   [](Rng& rng) {
                     return std::vector<Tensor>{randn64({2, 4, 5, 5}, rng), randn64({2, 18, 3, 3}, rng)};
                   }});
  cases.push_back({"avg_pool2d", [](auto& in) { return weighted_sum(avg_pool2d(in[0], 2)); },
                   [](Rng& rng) { return std::vector<Tensor>{randn64({2, 3, 4, 6}, rng)}; }});
  cases.push_back({"global_avg_pool", [](auto& in) { return weighted_sum(global_avg_pool(in[0])); },
                   [](Rng& rng) { return std::vector<Tensor>{randn64({2, 3, 3, 5}, rng)}; }});
  cases.push_back({"shortcut_pad", [](auto& in) { return weighted_sum(shortcut_pad(in[0], 2, 5)); },
                   [](Rng& rng) { return std::vector<Tensor>{randn64({2, 3, 5, 4}, rng)}; }});
  return cases;
}


}  // namespace libkd::testing
