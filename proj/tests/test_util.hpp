// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "libkd/ops.hpp"
#include "libkd/rng.hpp"
#include "libkd/tensor.hpp"

namespace libkd::testing {

inline Tensor randn64(Shape shape, Rng& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), rng, stddev, DType::f64);
}

/// Normal draws pushed away from zero, for checks across ReLU-like kinks.
inline Tensor randn64_nonzero(Shape shape, Rng& rng, double margin = 0.05) {
  Tensor t = randn64(std::move(shape), rng);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double v = t.at(i);
    if (std::abs(v) < margin) t.set(i, v < 0 ? v - margin : v + margin);
  }
  return t;
}

/// Random probability rows [B x C] with every entry positive.
inline Tensor random_probs(std::size_t B, std::size_t C, Rng& rng, DType dt = DType::f64) {
  std::vector<double> v(B * C);
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += v[b * C + c] = 0.05 + rng.uniform();
    for (std::size_t c = 0; c < C; ++c) v[b * C + c] /= s;
  }
  Tensor t = Tensor::from({B, C}, v);
  return dt == DType::f64 ? t : t.to(dt);
}

/// sum(out * w) for fixed pseudo-random weights w, turning any output into a
/// scalar whose gradient exercises every output element.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = Tensor::randn(out.shape(), rng, 1.0, out.dtype());
  return sum(mul(out, w));
}

/// Relative error with an absolute floor, so gradients that are zero up to
/// finite-difference noise compare as equal.
inline double rel_error(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between tape gradients and central differences of
/// the scalar f(inputs). `probe` limits the number of checked elements per
/// input (0 means all of them), chosen with a fixed stride.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> inputs, double h = 1e-5, std::size_t probe = 0) {
  for (Tensor& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  {
    Tape tape;
    Tape::Recording rec(tape);
    Tensor loss = f(inputs);
    tape.backward(loss);
  }
  double worst = 0.0;
  for (Tensor& t : inputs) {
    const Tensor g = t.grad();
    const std::size_t n = t.numel();
    const std::size_t step = probe == 0 || probe >= n ? 1 : n / probe;
    for (std::size_t j = 0; j < n; j += step) {
      const double orig = t.at(j);
      t.set(j, orig + h);
      const double fp = f(inputs).item();
      t.set(j, orig - h);
      const double fm = f(inputs).item();
      t.set(j, orig);
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = g.defined() ? g.at(j) : 0.0;
      worst = std::max(worst, rel_error(analytic, numeric));
    }
  }
  return worst;
}

/// Checks `count` randomly chosen scalar entries across `params` against
/// central differences of the scalar loss(). Returns the largest relative error.
inline double grad_check_sampled(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                                 std::size_t count, Rng& rng, double h = 1e-5) {
  std::vector<Tensor> ps = params;
  for (Tensor& t : ps) t.zero_grad();
  {
    Tape tape;
    Tape::Recording rec(tape);
    tape.backward(loss());
  }
  std::size_t total = 0;
  for (const Tensor& t : ps) total += t.numel();
  double worst = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t flat = rng.uniform_index(total), which = 0;
    while (flat >= ps[which].numel()) flat -= ps[which++].numel();
    Tensor& t = ps[which];
    const double orig = t.at(flat);
    t.set(flat, orig + h);
    const double fp = loss().item();
    t.set(flat, orig - h);
    const double fm = loss().item();
    t.set(flat, orig);
    const Tensor g = t.grad();
    worst = std::max(worst, rel_error(g.defined() ? g.at(flat) : 0.0, (fp - fm) / (2.0 * h)));
  }
  return worst;
}

}  // namespace libkd::testing
