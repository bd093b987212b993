// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include "libkd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "binio.hpp"

namespace libkd {

// ---- CKA ----------------------------------------------------------------------

Tensor gram_linear(const Tensor& act) {
  if (act.dim() != 2) throw DimensionError("gram_linear: expected [m x p], got " + shape_str(act.shape()));
  const std::size_t m = act.size(0), p = act.size(1);
  if (m < 2) throw ContractError("gram_linear: need at least 2 samples (HSIC is undefined for m < 2)");
  std::vector<double> a(m * p);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = act.at(i);
  std::vector<double> k(m * m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      double s = 0.0;
      for (std::size_t f = 0; f < p; ++f) s += a[i * p + f] * a[j * p + f];
      k[i * m + j] = k[j * m + i] = s;
    }
  }
  return Tensor::from({m, m}, k);
}

namespace {

std::vector<double> centered(const Tensor& K, const char* what) {
  if (K.dim() != 2 || K.size(0) != K.size(1)) throw DimensionError(std::string(what) + ": Gram must be square");
  const std::size_t m = K.size(0);
  if (m < 2) throw ContractError(std::string(what) + ": need m >= 2");
  std::vector<double> k(m * m);
  double scale = 0.0;
  for (std::size_t i = 0; i < m * m; ++i) scale = std::max(scale, std::abs(k[i] = K.at(i)));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      if (std::abs(k[i * m + j] - k[j * m + i]) > 1e-6 * std::max(scale, 1.0)) {
        throw ContractError(std::string(what) + ": Gram matrix is not symmetric");
      }
    }
  }
  // H K H: subtract row means, column means, add back the grand mean.
  std::vector<double> row(m, 0.0), col(m, 0.0);
  double all = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      row[i] += k[i * m + j];
      col[j] += k[i * m + j];
    }
  }
  for (std::size_t i = 0; i < m; ++i) all += row[i];
  const double md = static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) k[i * m + j] += all / (md * md) - row[i] / md - col[j] / md;
  }
  return k;
}

// trace(Kc Lc) / (m-1)^2 for centered symmetric Grams.
double hsic_centered(const std::vector<double>& kc, const std::vector<double>& lc, std::size_t m) {
  double s = 0.0;
  for (std::size_t i = 0; i < m * m; ++i) s += kc[i] * lc[i];
  const double d = static_cast<double>(m - 1);
  return s / (d * d);
}

struct CenteredGram {
  std::vector<double> k;
  double self = 0.0;
};

CenteredGram centered_gram(const Tensor& act, const std::string& name) {
  CenteredGram g;
  g.k = centered(gram_linear(act), "cka");
  g.self = hsic_centered(g.k, g.k, act.size(0));
  if (!(g.self > 0.0)) {
    throw NumericalError("cka: representation '" + name + "' is constant across samples (zero self-HSIC)");
  }
  return g;
}

double cka_from(const CenteredGram& a, const CenteredGram& b, std::size_t m) {
  return hsic_centered(a.k, b.k, m) / std::sqrt(a.self * b.self);
}

}  // namespace

double hsic(const Tensor& K, const Tensor& L) {
  if (K.shape() != L.shape()) {
    throw DimensionError("hsic: " + shape_str(K.shape()) + " vs " + shape_str(L.shape()));
  }
  return hsic_centered(centered(K, "hsic"), centered(L, "hsic"), K.size(0));
}

double cka(const Tensor& act_a, const Tensor& act_b) {
  if (act_a.dim() != 2 || act_b.dim() != 2 || act_a.size(0) != act_b.size(0)) {
    throw DimensionError("cka: activations " + shape_str(act_a.shape()) + " and " + shape_str(act_b.shape()) +
                         " must be [m x p] with equal m");
  }
  return cka_from(centered_gram(act_a, "a"), centered_gram(act_b, "b"), act_a.size(0));
}

double CkaMatrix::mean_off_diagonal() const {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < rows(); ++i) {
    for (std::size_t j = 0; j < cols(); ++j) {
      if (i == j) continue;
      s += at(i, j);
      ++n;
    }
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

std::string CkaMatrix::to_csv() const {
  std::ostringstream out;
  out << "layer";
  for (const auto& n : names_b) out << ',' << n;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < rows(); ++i) {
    out << names_a[i];
    for (std::size_t j = 0; j < cols(); ++j) out << ',' << at(i, j);
    out << '\n';
  }
  return out.str();
}

std::vector<std::uint8_t> CkaMatrix::to_pgm() const {
  const std::string header = "P5\n" + std::to_string(cols()) + " " + std::to_string(rows()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double v : values) out.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * v), 0L, 255L)));
  return out;
}

void CkaMatrix::write_csv(const std::filesystem::path& path) const {
  const std::string s = to_csv();
  binio::write_file(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

void CkaMatrix::write_pgm(const std::filesystem::path& path) const { binio::write_file(path, to_pgm()); }

CkaMatrix cka_matrix(std::span<const NamedActivation> a, std::span<const NamedActivation> b) {
  if (a.empty() || b.empty()) throw ContractError("cka_matrix: empty activation list");
  const std::size_t m = a[0].value.size(0);
  for (auto list : {a, b}) {
    for (const NamedActivation& x : list) {
      if (x.value.dim() != 2 || x.value.size(0) != m) {
        throw DimensionError("cka_matrix: activation '" + x.name + "' has shape " + shape_str(x.value.shape()) +
                             ", expected " + std::to_string(m) + " rows");
      }
    }
  }
  std::vector<CenteredGram> ga, gb;
  for (const NamedActivation& x : a) ga.push_back(centered_gram(x.value, x.name));
  for (const NamedActivation& x : b) gb.push_back(centered_gram(x.value, x.name));
  CkaMatrix out;
  for (const NamedActivation& x : a) out.names_a.push_back(x.name);
  for (const NamedActivation& x : b) out.names_b.push_back(x.name);
  for (const CenteredGram& x : ga) {
    for (const CenteredGram& y : gb) out.values.push_back(cka_from(x, y, m));
  }
  return out;
}

CkaMatrix cka_heatmap(const Model& a, const Model& b, const Tensor& probe) {
  if (probe.dim() != 4 || probe.size(0) < 16) {
    throw ContractError("cka_heatmap: probe batch must hold at least 16 images, got " + shape_str(probe.shape()));
  }
  const auto in = [&](const Model& m) { return m.dtype() == probe.dtype() ? probe : probe.to(m.dtype()); };
  const auto acts_a = a.forward_with_activations(in(a)).second;
  if (&a == &b) return cka_matrix(acts_a, acts_a);
  return cka_matrix(acts_a, b.forward_with_activations(in(b)).second);
}

// ---- disagreement ---------------------------------------------------------------

double disagreement_rate(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) {
    throw DimensionError("disagreement_rate: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                         " labels");
  }
  if (a.empty()) throw ContractError("disagreement_rate: empty label vectors");
  std::size_t differ = 0;
  for (std::size_t i = 0; i < a.size(); ++i) differ += a[i] != b[i];
  return static_cast<double>(differ) / static_cast<double>(a.size());
}

// ---- ensemble KL minimizer -----------------------------------------------------------

double ensemble_kl_objective(std::span<const std::vector<double>> q, std::span<const double> lambda,
                             std::span<const double> p) {
  double f = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (lambda[i] == 0.0) continue;
    double kl = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) {
      if (q[i][c] == 0.0) continue;
      if (p[c] == 0.0) return INFINITY;
      kl += q[i][c] * std::log(q[i][c] / p[c]);
    }
    f += lambda[i] * kl;
  }
  return f;
}

namespace {

void check_simplex_inputs(std::span<const std::vector<double>> q, std::span<const double> lambda) {
  if (q.empty()) throw ConfigError("ensemble_kl_minimizer: at least one distribution required");
  if (lambda.size() != q.size()) throw ConfigError("ensemble_kl_minimizer: one weight per distribution required");
  const std::size_t C = q[0].size();
  if (C == 0) throw ConfigError("ensemble_kl_minimizer: empty distribution");
  double total = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (!(lambda[i] >= 0.0)) throw ConfigError("ensemble_kl_minimizer: weights must be >= 0");
    total += lambda[i];
    if (q[i].size() != C) throw ConfigError("ensemble_kl_minimizer: distributions differ in length");
    double s = 0.0;
    for (double v : q[i]) {
      if (!(v >= 0.0)) throw ConfigError("ensemble_kl_minimizer: probabilities must be >= 0");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("ensemble_kl_minimizer: distribution does not sum to 1");
  }
  if (!(total > 0.0)) throw ConfigError("ensemble_kl_minimizer: weights must not all be zero");
}

double linf(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) d = std::max(d, std::abs(a[c] - b[c]));
  return d;
}

}  // namespace

KlMinimizerResult ensemble_kl_minimizer(std::span<const std::vector<double>> q, std::span<const double> lambda,
                                        const KlMinimizerOptions& opt) {
  check_simplex_inputs(q, lambda);
  const std::size_t C = q[0].size();
  const double total = std::accumulate(lambda.begin(), lambda.end(), 0.0);
  // The gradient only sees r = sum_i lambda_i q_i: df/dp_c = -r_c / p_c.
  std::vector<double> r(C, 0.0);
  for (std::size_t i = 0; i < q.size(); ++i) {
    for (std::size_t c = 0; c < C; ++c) r[c] += lambda[i] * q[i][c];
  }
  auto objective = [&](const std::vector<double>& p) { return ensemble_kl_objective(q, lambda, p); };
  // Frank-Wolfe gap <grad, p> - min_c grad_c = max_c r_c / p_c - total.
  auto fw_gap = [&](const std::vector<double>& p) {
    double mx = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      if (r[c] > 0.0) mx = std::max(mx, r[c] / p[c]);
    }
    return mx - total;
  };

  KlMinimizerResult res;
  std::vector<double> p(C, 1.0 / static_cast<double>(C)), next(C);
  double f = objective(p), eta = 1.0;
  // Classes with r_c = 0 get no push and may underflow to p_c = 0.
  auto step = [&](std::size_t c) { return r[c] == 0.0 ? 0.0 : eta * r[c] / (p[c] * total); };
  std::size_t it = 0;
  for (; it < opt.max_iterations && fw_gap(p) > opt.gap_tolerance; ++it) {
    // Mirror step on the entropy geometry with the gradient scaled by 1/total.
    for (;;) {
      double mx = -INFINITY;
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, step(c));
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += next[c] = p[c] * std::exp(step(c) - mx);
      for (double& v : next) v /= s;
      const double fn = objective(next);
      // Near the optimum the objective is flat to rounding, so a step that
      // ties within a few ulps is judged by the gap instead.
      const double slack = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f));
      if (fn < f || (fn <= f + slack && fw_gap(next) < fw_gap(p))) {
        p.swap(next);
        f = fn;
        eta = std::min(1.0, 2.0 * eta);
        break;
      }
      eta *= 0.5;
      if (eta < 1e-30) {
        throw NumericalError("ensemble_kl_minimizer: line search failed at iteration " + std::to_string(it));
      }
    }
  }
  res.gap = fw_gap(p);
  if (res.gap > opt.gap_tolerance) {
    throw NumericalError("ensemble_kl_minimizer: no convergence in " + std::to_string(opt.max_iterations) +
                         " iterations (gap " + std::to_string(res.gap) + ")");
  }
  res.probs = p;
  res.objective = f;
  res.iterations = it;

  res.arithmetic_mean.resize(C);
  for (std::size_t c = 0; c < C; ++c) res.arithmetic_mean[c] = r[c] / total;
  res.geometric_mean.assign(C, 0.0);
  double gs = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    double lg = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      if (lambda[i] == 0.0) continue;
      lg = q[i][c] == 0.0 ? -INFINITY : lg + lambda[i] / total * std::log(q[i][c]);
      if (lg == -INFINITY) break;
    }
    gs += res.geometric_mean[c] = std::exp(lg);
  }
  if (gs > 0.0) {
    for (double& v : res.geometric_mean) v /= gs;
  }
  res.objective_arithmetic = objective(res.arithmetic_mean);
  res.objective_geometric = gs > 0.0 ? objective(res.geometric_mean) : INFINITY;
  res.linf_to_arithmetic = linf(p, res.arithmetic_mean);
  res.linf_to_geometric = linf(p, res.geometric_mean);
  return res;
}

}  // namespace libkd
