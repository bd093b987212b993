// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "libkd/models.hpp"
#include "libkd/tensor.hpp"

namespace libkd {

// ---- CKA ----------------------------------------------------------------------

/// K = act act^T for activations [m x p] (m >= 2), float64, accumulated in
/// ascending feature order.
Tensor gram_linear(const Tensor& act);

/// Biased HSIC: trace(K H L H) / (m - 1)^2 with H = I - 11^T / m.
/// Throws ContractError if K or L is not symmetric (1e-6 relative) or sizes differ.
double hsic(const Tensor& K, const Tensor& L);

/// Linear CKA = HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)) on the Grams of the
/// two activations. Throws NumericalError if either self-HSIC is zero.
double cka(const Tensor& act_a, const Tensor& act_b);

struct CkaMatrix {
  std::vector<std::string> names_a, names_b;
  std::vector<double> values;  // row-major [names_a x names_b]

  std::size_t rows() const { return names_a.size(); }
  std::size_t cols() const { return names_b.size(); }
  double at(std::size_t i, std::size_t j) const { return values[i * cols() + j]; }
  /// Mean over entries with i != j.
  double mean_off_diagonal() const;

  /// Header "layer," + names_b; each row: name_a, values (round-trip precision).
  std::string to_csv() const;
  /// Binary PGM (P5), one pixel per entry, round(255 * value) clamped to [0,255].
  std::vector<std::uint8_t> to_pgm() const;
  void write_csv(const std::filesystem::path& path) const;
  void write_pgm(const std::filesystem::path& path) const;
};

/// Pairwise CKA between two activation lists (same sample count).
CkaMatrix cka_matrix(std::span<const NamedActivation> a, std::span<const NamedActivation> b);

/// CKA between every block of two models on a probe batch (>= 16 images,
/// already normalized for the models).
CkaMatrix cka_heatmap(const Model& a, const Model& b, const Tensor& probe);

// ---- disagreement ---------------------------------------------------------------

/// Fraction of positions where the label vectors differ.
double disagreement_rate(std::span<const std::size_t> a, std::span<const std::size_t> b);

// ---- ensemble KL minimizer -----------------------------------------------------------

struct KlMinimizerOptions {
  /// Stop once the Frank-Wolfe gap, an upper bound on objective suboptimality,
  /// falls below this.
  double gap_tolerance = 1e-12;
  std::size_t max_iterations = 100000;
};

struct KlMinimizerResult {
  std::vector<double> probs;
  double objective = 0.0;
  double gap = 0.0;  // certified bound on objective - min
  std::size_t iterations = 0;
  // Closed-form candidates and how far the numerical minimizer is from each.
  std::vector<double> arithmetic_mean, geometric_mean;
  double objective_arithmetic = 0.0, objective_geometric = 0.0;
  double linf_to_arithmetic = 0.0, linf_to_geometric = 0.0;
};

/// sum_i lambda_i KL(q_i || p), with 0 log 0 = 0 and +inf where p_c = 0 < q_ic.
double ensemble_kl_objective(std::span<const std::vector<double>> q, std::span<const double> lambda,
                             std::span<const double> p);

/// Minimizes ensemble_kl_objective over the probability simplex by
/// exponentiated-gradient descent with backtracking, from the uniform point.
/// Throws ConfigError on invalid inputs and NumericalError if the gap
/// tolerance is not reached within the iteration budget.
KlMinimizerResult ensemble_kl_minimizer(std::span<const std::vector<double>> q, std::span<const double> lambda,
                                        const KlMinimizerOptions& opt = {});

}  // namespace libkd
