// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <memory>

#include "libkd/ops.hpp"
#include "op_util.hpp"

namespace libkd {

using namespace opdetail;

namespace {

struct Split {
  std::size_t outer = 1, n = 1, inner = 1;
};

Split split_at(const Shape& s, std::size_t axis) {
  Split r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Row-wise log-softmax of a [B x C] block in double precision.
template <class T>
void log_softmax_rows(std::span<const T> z, std::size_t B, std::size_t C, std::vector<double>& out) {
  out.resize(B * C);
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = z.data() + b * C;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) out[b * C + c] = static_cast<double>(row[c]) - lse;
  }
}

void require_logits(const Tensor& logits, const char* op) {
  require_rank(logits, 2, op);
}

void check_smoothing(double s, const char* op) {
  if (!(s >= 0.0 && s < 1.0)) {
    throw RangeError(std::string(op) + ": label smoothing must be in [0, 1), got " + std::to_string(s));
  }
}

// Rows of a [B x C] tensor must be probability vectors.
void require_distribution_rows(const Tensor& p, const char* op) {
  const std::size_t C = p.size(1);
  const double tol = p.dtype() == DType::f32 ? 1e-4 : 1e-9;
  for (std::size_t b = 0; b < p.size(0); ++b) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double v = p.at(b * C + c);
      if (!(v >= 0.0)) throw ContractError(std::string(op) + ": negative or NaN probability");
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw ContractError(std::string(op) + ": row " + std::to_string(b) + " sums to " +
                          std::to_string(s));
    }
  }
}

}  // namespace

// ---- softmax family -------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  if (axis >= x.dim()) throw DimensionError("softmax: axis out of range");
  const Split s = split_at(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t p = 0; p < s.outer; ++p) {
      for (std::size_t q = 0; q < s.inner; ++q) {
        const std::size_t base = p * s.n * s.inner + q;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < s.n; ++c) mx = std::max(mx, static_cast<double>(xv[base + c * s.inner]));
        double z = 0.0;
        for (std::size_t c = 0; c < s.n; ++c) z += std::exp(static_cast<double>(xv[base + c * s.inner]) - mx);
        for (std::size_t c = 0; c < s.n; ++c) {
          o[base + c * s.inner] = static_cast<T>(std::exp(static_cast<double>(xv[base + c * s.inner]) - mx) / z);
        }
      }
    }
  });
  Tensor y = out.detach();
  record(recording_tape({&x}), {x},
         [y, s](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto yv = y.data<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t p = 0; p < s.outer; ++p) {
               for (std::size_t q = 0; q < s.inner; ++q) {
                 const std::size_t base = p * s.n * s.inner + q;
                 double dot = 0.0;
                 for (std::size_t c = 0; c < s.n; ++c) {
                   dot += static_cast<double>(go[base + c * s.inner]) * yv[base + c * s.inner];
                 }
                 for (std::size_t c = 0; c < s.n; ++c) {
                   const std::size_t i = base + c * s.inner;
                   d[i] += static_cast<T>(yv[i] * (go[i] - dot));
                 }
               }
             }
           });
         },
         out);
  return out;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "log_softmax");
  if (axis >= x.dim()) throw DimensionError("log_softmax: axis out of range");
  const Split s = split_at(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t p = 0; p < s.outer; ++p) {
      for (std::size_t q = 0; q < s.inner; ++q) {
        const std::size_t base = p * s.n * s.inner + q;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < s.n; ++c) mx = std::max(mx, static_cast<double>(xv[base + c * s.inner]));
        double z = 0.0;
        for (std::size_t c = 0; c < s.n; ++c) z += std::exp(static_cast<double>(xv[base + c * s.inner]) - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < s.n; ++c) {
          o[base + c * s.inner] = static_cast<T>(static_cast<double>(xv[base + c * s.inner]) - lse);
        }
      }
    }
  });
  Tensor y = out.detach();
  record(recording_tape({&x}), {x},
         [y, s](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto yv = y.data<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t p = 0; p < s.outer; ++p) {
               for (std::size_t q = 0; q < s.inner; ++q) {
                 const std::size_t base = p * s.n * s.inner + q;
                 double gs = 0.0;
                 for (std::size_t c = 0; c < s.n; ++c) gs += go[base + c * s.inner];
                 for (std::size_t c = 0; c < s.n; ++c) {
                   const std::size_t i = base + c * s.inner;
                   d[i] += static_cast<T>(go[i] - std::exp(static_cast<double>(yv[i])) * gs);
                 }
               }
             }
           });
         },
         out);
  return out;
}

// ---- losses ---------------------------------------------------------------

namespace {

// Shared tail of both cross-entropy variants: q holds the (smoothed) targets.
// `soft` is the unsmoothed soft-target tensor when targets are differentiable.
Tensor cross_entropy_with(const Tensor& logits, std::shared_ptr<std::vector<double>> q, const Tensor& soft,
                          double smoothing) {
  const std::size_t B = logits.size(0), C = logits.size(1);
  auto logp = std::make_shared<std::vector<double>>();
  double loss = 0.0;
  detail::dispatch(logits.dtype(), [&]<class T>(T) { log_softmax_rows<T>(logits.data<T>(), B, C, *logp); });
  for (std::size_t b = 0; b < B; ++b) {
    double row = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double t = (*q)[b * C + c];
      if (t != 0.0) row -= t * (*logp)[b * C + c];
    }
    loss += row;
  }
  loss /= static_cast<double>(B);
  Tensor out = Tensor::scalar(loss, logits.dtype());
  std::vector<Tensor> inputs{logits};
  if (soft.defined()) inputs.push_back(soft);
  record(recording_tape(inputs), inputs,
         [q, logp, B, C, smoothing](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             const double go = g.as<T>()[0] / static_cast<double>(B);
             if (gi.size() > 1) {
               auto dt = grad_of<T>(gi, 1);
               for (std::size_t i = 0; i < dt.size(); ++i) {
                 dt[i] -= static_cast<T>(go * (1.0 - smoothing) * (*logp)[i]);
               }
             }
             auto d = grad_of<T>(gi, 0);
             if (d.empty()) return;
             for (std::size_t b = 0; b < B; ++b) {
               double qs = 0.0;
               for (std::size_t c = 0; c < C; ++c) qs += (*q)[b * C + c];
               for (std::size_t c = 0; c < C; ++c) {
                 const std::size_t i = b * C + c;
                 d[i] += static_cast<T>(go * (std::exp((*logp)[i]) * qs - (*q)[i]));
               }
             }
           });
         },
         out);
  return out;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, double label_smoothing) {
  require_logits(logits, "cross_entropy");
  check_smoothing(label_smoothing, "cross_entropy");
  const std::size_t B = logits.size(0), C = logits.size(1);
  if (targets.size() != B) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for batch of " +
                         std::to_string(B));
  }
  auto q = std::make_shared<std::vector<double>>(B * C, label_smoothing / static_cast<double>(C));
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] >= C) {
      throw RangeError("cross_entropy: target " + std::to_string(targets[b]) + " out of range for " +
                       std::to_string(C) + " classes");
    }
    (*q)[b * C + targets[b]] += 1.0 - label_smoothing;
  }
  return cross_entropy_with(logits, std::move(q), Tensor(), label_smoothing);
}

Tensor cross_entropy(const Tensor& logits, const Tensor& target_probs, double label_smoothing) {
  require_logits(logits, "cross_entropy");
  check_smoothing(label_smoothing, "cross_entropy");
  require_defined(target_probs, "cross_entropy");
  require_dtype(logits, target_probs, "cross_entropy");
  if (target_probs.shape() != logits.shape()) {
    throw DimensionError("cross_entropy: targets " + shape_str(target_probs.shape()) + " for logits " +
                         shape_str(logits.shape()));
  }
  require_distribution_rows(target_probs, "cross_entropy");
  const std::size_t C = logits.size(1);
  auto q = std::make_shared<std::vector<double>>(target_probs.to_vector());
  for (double& v : *q) v = (1.0 - label_smoothing) * v + label_smoothing / static_cast<double>(C);
  return cross_entropy_with(logits, std::move(q), target_probs, label_smoothing);
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  require_same(p, q, "kl_divergence");
  require_rank(p, 2, "kl_divergence");
  require_distribution_rows(p, "kl_divergence");
  require_distribution_rows(q, "kl_divergence");
  const std::size_t B = p.size(0), C = p.size(1);
  const std::vector<double> pv = p.to_vector();
  const std::vector<double> qv = q.to_vector();
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double row = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = b * C + c;
      if (pv[i] == 0.0) continue;
      if (qv[i] == 0.0) {
        throw DivergenceError("kl_divergence: q is zero where p is positive (row " + std::to_string(b) +
                              ", class " + std::to_string(c) + ")");
      }
      row += pv[i] * std::log(pv[i] / qv[i]);
    }
    loss += row;
  }
  loss /= static_cast<double>(B);
  Tensor out = Tensor::scalar(loss, p.dtype());
  record(recording_tape({&p, &q}), {p, q},
         [pv, qv, B](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             const double go = g.as<T>()[0] / static_cast<double>(B);
             auto dp = grad_of<T>(gi, 0);
             auto dq = grad_of<T>(gi, 1);
             for (std::size_t i = 0; i < pv.size(); ++i) {
               // Zero-probability entries of p contribute nothing and get a zero subgradient.
               if (pv[i] == 0.0) continue;
               if (!dp.empty()) dp[i] += static_cast<T>(go * (std::log(pv[i] / qv[i]) + 1.0));
               if (!dq.empty()) dq[i] -= static_cast<T>(go * pv[i] / qv[i]);
             }
           });
         },
         out);
  return out;
}

Tensor kl_divergence_logits(const Tensor& p, const Tensor& logits) {
  require_same(p, logits, "kl_divergence_logits");
  require_rank(p, 2, "kl_divergence_logits");
  require_distribution_rows(p, "kl_divergence_logits");
  const std::size_t B = p.size(0), C = p.size(1);
  auto pv = std::make_shared<std::vector<double>>(p.to_vector());
  auto logq = std::make_shared<std::vector<double>>();
  detail::dispatch(logits.dtype(), [&]<class T>(T) { log_softmax_rows<T>(logits.data<T>(), B, C, *logq); });
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double row = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = b * C + c;
      if ((*pv)[i] > 0.0) row += (*pv)[i] * (std::log((*pv)[i]) - (*logq)[i]);
    }
    loss += row;
  }
  loss /= static_cast<double>(B);
  Tensor out = Tensor::scalar(loss, p.dtype());
  record(recording_tape({&p, &logits}), {p, logits},
         [pv, logq, B, C](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             const double go = g.as<T>()[0] / static_cast<double>(B);
             auto dp = grad_of<T>(gi, 0);
             auto dz = grad_of<T>(gi, 1);
             for (std::size_t b = 0; b < B; ++b) {
               double ps = 0.0;
               for (std::size_t c = 0; c < C; ++c) ps += (*pv)[b * C + c];
               for (std::size_t c = 0; c < C; ++c) {
                 const std::size_t i = b * C + c;
                 if (!dz.empty()) dz[i] += static_cast<T>(go * (std::exp((*logq)[i]) * ps - (*pv)[i]));
                 if (!dp.empty() && (*pv)[i] > 0.0) {
                   dp[i] += static_cast<T>(go * (std::log((*pv)[i]) - (*logq)[i] + 1.0));
                 }
               }
             }
           });
         },
         out);
  return out;
}

// ---- normalization --------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined(x, "layer_norm");
  require_same(gamma, beta, "layer_norm");
  require_dtype(x, gamma, "layer_norm");
  if (x.dim() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t D = x.size(x.dim() - 1);
  if (gamma.numel() != D) throw DimensionError("layer_norm: parameter size mismatch");
  const std::size_t R = x.numel() / D;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(R);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto gv = gamma.data<T>();
    auto bv = beta.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t r = 0; r < R; ++r) {
      const T* row = xv.data() + r * D;
      double mu = 0.0;
      for (std::size_t j = 0; j < D; ++j) mu += row[j];
      mu /= static_cast<double>(D);
      double var = 0.0;
      for (std::size_t j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<double>(D);
      const double rs = 1.0 / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (std::size_t j = 0; j < D; ++j) {
        const double h = (row[j] - mu) * rs;
        (*xhat)[r * D + j] = h;
        o[r * D + j] = static_cast<T>(h * gv[j] + bv[j]);
      }
    }
  });
  record(recording_tape({&x, &gamma, &beta}), {x, gamma, beta},
         [gamma, xhat, rstd, R, D](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto gv = gamma.data<T>();
             auto dx = grad_of<T>(gi, 0);
             auto dg = grad_of<T>(gi, 1);
             auto db = grad_of<T>(gi, 2);
             for (std::size_t r = 0; r < R; ++r) {
               const std::size_t base = r * D;
               if (!dx.empty()) {
                 double m1 = 0.0, m2 = 0.0;
                 for (std::size_t j = 0; j < D; ++j) {
                   const double dh = static_cast<double>(go[base + j]) * gv[j];
                   m1 += dh;
                   m2 += dh * (*xhat)[base + j];
                 }
                 m1 /= static_cast<double>(D);
                 m2 /= static_cast<double>(D);
                 for (std::size_t j = 0; j < D; ++j) {
                   const double dh = static_cast<double>(go[base + j]) * gv[j];
                   dx[base + j] += static_cast<T>((*rstd)[r] * (dh - m1 - (*xhat)[base + j] * m2));
                 }
               }
               for (std::size_t j = 0; j < D; ++j) {
                 if (!dg.empty()) dg[j] += static_cast<T>(go[base + j] * (*xhat)[base + j]);
                 if (!db.empty()) db[j] += go[base + j];
               }
             }
           });
         },
         out);
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double momentum, double eps) {
  require_defined(x, "batch_norm");
  require_same(gamma, beta, "batch_norm");
  require_same(running_mean, running_var, "batch_norm");
  require_dtype(x, gamma, "batch_norm");
  require_dtype(x, running_mean, "batch_norm");
  if (x.dim() < 2) throw DimensionError("batch_norm: expected [B x C x ...], got " + shape_str(x.shape()));
  const Split s = split_at(x.shape(), 1);
  const std::size_t C = s.n;
  if (gamma.numel() != C || running_mean.numel() != C) {
    throw DimensionError("batch_norm: parameter size mismatch for " + shape_str(x.shape()));
  }
  const std::size_t M = s.outer * s.inner;
  if (training && M < 2) throw DimensionError("batch_norm: training needs more than one value per channel");

  std::vector<double> mu(C), rs(C);
  if (training) {
    detail::dispatch(x.dtype(), [&]<class T>(T) {
      auto xv = x.data<T>();
      for (std::size_t c = 0; c < C; ++c) {
        double m = 0.0;
        for (std::size_t p = 0; p < s.outer; ++p) {
          const T* v = xv.data() + (p * C + c) * s.inner;
          for (std::size_t q = 0; q < s.inner; ++q) m += v[q];
        }
        m /= static_cast<double>(M);
        double var = 0.0;
        for (std::size_t p = 0; p < s.outer; ++p) {
          const T* v = xv.data() + (p * C + c) * s.inner;
          for (std::size_t q = 0; q < s.inner; ++q) var += (v[q] - m) * (v[q] - m);
        }
        var /= static_cast<double>(M);
        mu[c] = m;
        rs[c] = 1.0 / std::sqrt(var + eps);
        const double unbiased = var * static_cast<double>(M) / static_cast<double>(M - 1);
        running_mean.set(c, (1.0 - momentum) * running_mean.at(c) + momentum * m);
        running_var.set(c, (1.0 - momentum) * running_var.at(c) + momentum * unbiased);
      }
    });
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean.at(c);
      rs[c] = 1.0 / std::sqrt(running_var.at(c) + eps);
    }
  }

  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto gv = gamma.data<T>();
    auto bv = beta.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t p = 0; p < s.outer; ++p) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (p * C + c) * s.inner;
        for (std::size_t q = 0; q < s.inner; ++q) {
          const double h = (xv[base + q] - mu[c]) * rs[c];
          (*xhat)[base + q] = h;
          o[base + q] = static_cast<T>(h * gv[c] + bv[c]);
        }
      }
    }
  });
  record(recording_tape({&x, &gamma, &beta}), {x, gamma, beta},
         [gamma, xhat, rs, s, C, M, training](const detail::Buffer& g,
                                             std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto gv = gamma.data<T>();
             auto dx = grad_of<T>(gi, 0);
             auto dg = grad_of<T>(gi, 1);
             auto db = grad_of<T>(gi, 2);
             for (std::size_t c = 0; c < C; ++c) {
               double sg = 0.0, sgh = 0.0;
               for (std::size_t p = 0; p < s.outer; ++p) {
                 const std::size_t base = (p * C + c) * s.inner;
                 for (std::size_t q = 0; q < s.inner; ++q) {
                   sg += go[base + q];
                   sgh += go[base + q] * (*xhat)[base + q];
                 }
               }
               if (!dg.empty()) dg[c] += static_cast<T>(sgh);
               if (!db.empty()) db[c] += static_cast<T>(sg);
               if (dx.empty()) continue;
               const double k = gv[c] * rs[c];
               const double m1 = sg / static_cast<double>(M);
               const double m2 = sgh / static_cast<double>(M);
               for (std::size_t p = 0; p < s.outer; ++p) {
                 const std::size_t base = (p * C + c) * s.inner;
                 for (std::size_t q = 0; q < s.inner; ++q) {
                   const std::size_t i = base + q;
                   if (training) {
                     dx[i] += static_cast<T>(k * (go[i] - m1 - (*xhat)[i] * m2));
                   } else {
                     dx[i] += static_cast<T>(k * go[i]);
                   }
                 }
               }
             }
           });
         },
         out);
  return out;
}

}  // namespace libkd
