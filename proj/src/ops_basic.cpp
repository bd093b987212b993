// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>

#include "kernels.hpp"
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

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.dim()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  detail::dispatch(a.dtype(), [&]<class T>(T) {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  });
  record(recording_tape({&a, &b}), {a, b},
         [](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             for (std::size_t k = 0; k < 2; ++k) {
               auto d = grad_of<T>(gi, k);
               for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
             }
           });
         },
         out);
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  detail::dispatch(a.dtype(), [&]<class T>(T) {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  });
  record(recording_tape({&a, &b}), {a, b},
         [](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto da = grad_of<T>(gi, 0);
             for (std::size_t i = 0; i < da.size(); ++i) da[i] += go[i];
             auto db = grad_of<T>(gi, 1);
             for (std::size_t i = 0; i < db.size(); ++i) db[i] -= go[i];
           });
         },
         out);
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  detail::dispatch(a.dtype(), [&]<class T>(T) {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  });
  record(recording_tape({&a, &b}), {a, b},
         [a, b](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto x = a.data<T>();
             auto y = b.data<T>();
             auto da = grad_of<T>(gi, 0);
             for (std::size_t i = 0; i < da.size(); ++i) da[i] += go[i] * y[i];
             auto db = grad_of<T>(gi, 1);
             for (std::size_t i = 0; i < db.size(); ++i) db[i] += go[i] * x[i];
           });
         },
         out);
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  detail::dispatch(a.dtype(), [&]<class T>(T) {
    const T f = static_cast<T>(factor);
    auto x = a.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * f;
  });
  record(recording_tape({&a}), {a},
         [factor](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             const T f = static_cast<T>(factor);
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * f;
           });
         },
         out);
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias, std::size_t axis) {
  require_defined(x, "add_bias");
  require_defined(bias, "add_bias");
  require_dtype(x, bias, "add_bias");
  check_axis(x, axis, "add_bias");
  if (bias.numel() != x.size(axis)) {
    throw DimensionError("add_bias: bias of " + shape_str(bias.shape()) + " for axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const Split s = split_at(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto bv = bias.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t p = 0; p < s.outer; ++p) {
      for (std::size_t c = 0; c < s.n; ++c) {
        const std::size_t base = (p * s.n + c) * s.inner;
        for (std::size_t q = 0; q < s.inner; ++q) o[base + q] = xv[base + q] + bv[c];
      }
    }
  });
  record(recording_tape({&x, &bias}), {x, bias},
         [s](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto dx = grad_of<T>(gi, 0);
             for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += go[i];
             auto db = grad_of<T>(gi, 1);
             if (db.empty()) return;
             for (std::size_t p = 0; p < s.outer; ++p) {
               for (std::size_t c = 0; c < s.n; ++c) {
                 const std::size_t base = (p * s.n + c) * s.inner;
                 for (std::size_t q = 0; q < s.inner; ++q) db[c] += go[base + q];
               }
             }
           });
         },
         out);
  return out;
}

Tensor broadcast_batch(const Tensor& x, std::size_t batch) {
  require_defined(x, "broadcast_batch");
  if (x.dim() == 0 || x.size(0) != 1) {
    throw DimensionError("broadcast_batch: expected leading dimension 1, got " + shape_str(x.shape()));
  }
  if (batch == 0) throw DimensionError("broadcast_batch: batch must be positive");
  Shape shape = x.shape();
  shape[0] = batch;
  const std::size_t n = x.numel();
  Tensor out = Tensor::zeros(shape, x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t b = 0; b < batch; ++b) std::copy(xv.begin(), xv.end(), o.begin() + b * n);
  });
  record(recording_tape({&x}), {x},
         [n, batch](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t b = 0; b < batch; ++b) {
               for (std::size_t i = 0; i < n; ++i) d[i] += go[b * n + i];
             }
           });
         },
         out);
  return out;
}

Tensor scale_samples(const Tensor& x, std::span<const double> factors) {
  require_defined(x, "scale_samples");
  if (x.dim() == 0 || x.size(0) != factors.size()) {
    throw DimensionError("scale_samples: " + std::to_string(factors.size()) + " factors for " +
                         shape_str(x.shape()));
  }
  const std::size_t per = x.numel() / x.size(0);
  std::vector<double> f(factors.begin(), factors.end());
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t b = 0; b < f.size(); ++b) {
      const T s = static_cast<T>(f[b]);
      for (std::size_t i = 0; i < per; ++i) o[b * per + i] = xv[b * per + i] * s;
    }
  });
  record(recording_tape({&x}), {x},
         [f, per](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t b = 0; b < f.size(); ++b) {
               const T s = static_cast<T>(f[b]);
               for (std::size_t i = 0; i < per; ++i) d[b * per + i] += go[b * per + i] * s;
             }
           });
         },
         out);
  return out;
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
  });
  record(recording_tape({&x}), {x},
         [x](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto xv = x.data<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t i = 0; i < d.size(); ++i) {
               if (xv[i] > T(0)) d[i] += go[i];
             }
           });
         },
         out);
  return out;
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    const T r = static_cast<T>(1.0 / std::numbers::sqrt2);
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * r));
  });
  record(recording_tape({&x}), {x},
         [x](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             const T r = static_cast<T>(1.0 / std::numbers::sqrt2);
             const T c = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
             auto go = g.as<T>();
             auto xv = x.data<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t i = 0; i < d.size(); ++i) {
               const T v = xv[i];
               const T cdf = T(0.5) * (T(1) + std::erf(v * r));
               const T pdf = c * std::exp(T(-0.5) * v * v);
               d[i] += go[i] * (cdf + v * pdf);
             }
           });
         },
         out);
  return out;
}

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::zeros(std::move(shape), x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    std::copy(xv.begin(), xv.end(), out.mutable_data<T>().begin());
  });
  record(recording_tape({&x}), {x},
         [](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
           });
         },
         out);
  return out;
}

namespace {

// For each output flat index, the flat index of the source element.
std::vector<std::size_t> permute_map(const Shape& in, const std::vector<std::size_t>& axes) {
  const std::size_t nd = in.size();
  std::vector<std::size_t> in_stride(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) out[i] = in[axes[i]];
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    map[o] = src;
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      src += in_stride[axes[d]];
      if (idx[d] < out[d]) break;
      src -= in_stride[axes[d]] * out[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  require_defined(x, "permute");
  const std::size_t nd = x.dim();
  if (axes.size() != nd) throw DimensionError("permute: axis count does not match rank");
  std::vector<bool> seen(nd, false);
  for (std::size_t a : axes) {
    if (a >= nd || seen[a]) throw DimensionError("permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape shape(nd);
  for (std::size_t i = 0; i < nd; ++i) shape[i] = x.size(axes[i]);
  auto map = std::make_shared<std::vector<std::size_t>>(permute_map(x.shape(), axes));
  Tensor out = Tensor::zeros(shape, x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[(*map)[i]];
  });
  record(recording_tape({&x}), {x},
         [map](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t i = 0; i < go.size(); ++i) d[(*map)[i]] += go[i];
           });
         },
         out);
  return out;
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  require_defined(x, "transpose");
  check_axis(x, axis0, "transpose");
  check_axis(x, axis1, "transpose");
  std::vector<std::size_t> axes(x.dim());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axis0], axes[axis1]);
  return permute(x, axes);
}

Tensor concat(std::span<const Tensor> xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const Tensor& first = xs[0];
  require_defined(first, "concat");
  check_axis(first, axis, "concat");
  Shape shape = first.shape();
  shape[axis] = 0;
  for (const Tensor& t : xs) {
    require_defined(t, "concat");
    require_dtype(first, t, "concat");
    if (t.dim() != first.dim()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < t.dim(); ++d) {
      if (d != axis && t.size(d) != first.size(d)) {
        throw DimensionError("concat: shape mismatch " + shape_str(first.shape()) + " vs " +
                             shape_str(t.shape()));
      }
    }
    shape[axis] += t.size(axis);
  }
  const Split s = split_at(shape, axis);
  std::vector<std::size_t> widths;
  for (const Tensor& t : xs) widths.push_back(t.size(axis) * s.inner);
  const std::size_t row = s.n * s.inner;
  Tensor out = Tensor::zeros(shape, first.dtype());
  detail::dispatch(first.dtype(), [&]<class T>(T) {
    auto o = out.mutable_data<T>();
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      auto xv = xs[k].data<T>();
      for (std::size_t p = 0; p < s.outer; ++p) {
        std::copy_n(xv.begin() + p * widths[k], widths[k], o.begin() + p * row + off);
      }
      off += widths[k];
    }
  });
  record(recording_tape(xs), std::vector<Tensor>(xs.begin(), xs.end()),
         [widths, s, row](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             std::size_t off = 0;
             for (std::size_t k = 0; k < widths.size(); ++k) {
               auto d = grad_of<T>(gi, k);
               if (!d.empty()) {
                 for (std::size_t p = 0; p < s.outer; ++p) {
                   for (std::size_t i = 0; i < widths[k]; ++i) {
                     d[p * widths[k] + i] += go[p * row + off + i];
                   }
                 }
               }
               off += widths[k];
             }
           });
         },
         out);
  return out;
}

Tensor concat(std::initializer_list<Tensor> xs, std::size_t axis) {
  return concat(std::span<const Tensor>(xs.begin(), xs.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined(x, "slice");
  check_axis(x, axis, "slice");
  if (length == 0 || start + length > x.size(axis)) {
    throw RangeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis of size " + std::to_string(x.size(axis)));
  }
  const Split s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  Tensor out = Tensor::zeros(shape, x.dtype());
  const std::size_t w = length * s.inner;
  const std::size_t row = s.n * s.inner;
  const std::size_t off = start * s.inner;
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t p = 0; p < s.outer; ++p) {
      std::copy_n(xv.begin() + p * row + off, w, o.begin() + p * w);
    }
  });
  record(recording_tape({&x}), {x},
         [s, w, row, off](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t p = 0; p < s.outer; ++p) {
               for (std::size_t i = 0; i < w; ++i) d[p * row + off + i] += go[p * w + i];
             }
           });
         },
         out);
  return out;
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  Tensor out = Tensor::zeros({1}, x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    T acc = 0;
    for (T v : x.data<T>()) acc += v;
    out.mutable_data<T>()[0] = acc;
  });
  record(recording_tape({&x}), {x},
         [](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             const T go = g.as<T>()[0];
             auto d = grad_of<T>(gi, 0);
             for (std::size_t i = 0; i < d.size(); ++i) d[i] += go;
           });
         },
         out);
  return out;
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  require_defined(x, "sum");
  check_axis(x, axis, "sum");
  const Split s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (shape.empty()) shape = {1};
  }
  Tensor out = Tensor::zeros(shape, x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t p = 0; p < s.outer; ++p) {
      for (std::size_t c = 0; c < s.n; ++c) {
        const std::size_t base = (p * s.n + c) * s.inner;
        for (std::size_t q = 0; q < s.inner; ++q) o[p * s.inner + q] += xv[base + q];
      }
    }
  });
  record(recording_tape({&x}), {x},
         [s](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t p = 0; p < s.outer; ++p) {
               for (std::size_t c = 0; c < s.n; ++c) {
                 const std::size_t base = (p * s.n + c) * s.inner;
                 for (std::size_t q = 0; q < s.inner; ++q) d[base + q] += go[p * s.inner + q];
               }
             }
           });
         },
         out);
  return out;
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "mean");
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.size(axis)));
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_dtype(a, b, "matmul");
  const bool batched = a.dim() == 3;
  if (!((a.dim() == 2 && b.dim() == 2) || (a.dim() == 3 && b.dim() == 3))) {
    throw DimensionError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t B = batched ? a.size(0) : 1;
  const std::size_t m = a.size(a.dim() - 2), k = a.size(a.dim() - 1);
  const std::size_t k2 = b.size(b.dim() - 2), n = b.size(b.dim() - 1);
  if (k != k2 || (batched && b.size(0) != B)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Shape shape = batched ? Shape{B, m, n} : Shape{m, n};
  Tensor out = Tensor::zeros(shape, a.dtype());
  detail::dispatch(a.dtype(), [&]<class T>(T) {
    auto av = a.data<T>();
    auto bv = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t z = 0; z < B; ++z) {
      kernels::gemm<T>(m, n, k, av.data() + z * m * k, k, bv.data() + z * k * n, n,
                       o.data() + z * m * n, n, false);
    }
  });
  record(recording_tape({&a, &b}), {a, b},
         [a, b, B, m, n, k](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto av = a.data<T>();
             auto bv = b.data<T>();
             auto da = grad_of<T>(gi, 0);
             auto db = grad_of<T>(gi, 1);
             std::vector<T> tmp;
             for (std::size_t z = 0; z < B; ++z) {
               const T* gz = go.data() + z * m * n;
               if (!da.empty()) {
                 // dA = dC * B^T
                 tmp.resize(n * k);
                 kernels::transpose<T>(k, n, bv.data() + z * k * n, n, tmp.data(), k);
                 kernels::gemm<T>(m, k, n, gz, n, tmp.data(), k, da.data() + z * m * k, k, true);
               }
               if (!db.empty()) {
                 // dB = A^T * dC
                 tmp.resize(k * m);
                 kernels::transpose<T>(m, k, av.data() + z * m * k, k, tmp.data(), m);
                 kernels::gemm<T>(k, n, m, tmp.data(), m, gz, n, db.data() + z * k * n, n, true);
               }
             }
           });
         },
         out);
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_defined(x, "linear");
  require_rank(w, 2, "linear");
  require_dtype(x, w, "linear");
  const std::size_t out_f = w.size(0), in_f = w.size(1);
  if (x.dim() == 0 || x.size(x.dim() - 1) != in_f) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " for weight " +
                         shape_str(w.shape()));
  }
  if (bias.defined()) {
    require_dtype(x, bias, "linear");
    if (bias.numel() != out_f) throw DimensionError("linear: bias size mismatch");
  }
  const std::size_t N = x.numel() / in_f;
  Shape shape = x.shape();
  shape.back() = out_f;
  Tensor out = Tensor::zeros(shape, x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto wv = w.data<T>();
    auto o = out.mutable_data<T>();
    std::vector<T> wt(in_f * out_f);
    kernels::transpose<T>(out_f, in_f, wv.data(), in_f, wt.data(), out_f);
    kernels::gemm<T>(N, out_f, in_f, xv.data(), in_f, wt.data(), out_f, o.data(), out_f, false);
    if (bias.defined()) {
      auto bv = bias.data<T>();
      for (std::size_t r = 0; r < N; ++r) {
        for (std::size_t j = 0; j < out_f; ++j) o[r * out_f + j] += bv[j];
      }
    }
  });
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  record(recording_tape(inputs), inputs,
         [x, w, N, in_f, out_f](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto dx = grad_of<T>(gi, 0);
             auto dw = grad_of<T>(gi, 1);
             if (!dx.empty()) {
               kernels::gemm<T>(N, in_f, out_f, go.data(), out_f, w.data<T>().data(), in_f,
                                dx.data(), in_f, true);
             }
             if (!dw.empty()) {
               std::vector<T> gt(out_f * N);
               kernels::transpose<T>(N, out_f, go.data(), out_f, gt.data(), N);
               kernels::gemm<T>(out_f, in_f, N, gt.data(), N, x.data<T>().data(), in_f, dw.data(),
                                in_f, true);
             }
             if (gi.size() > 2) {
               auto db = grad_of<T>(gi, 2);
               for (std::size_t r = 0; r < N && !db.empty(); ++r) {
                 for (std::size_t j = 0; j < out_f; ++j) db[j] += go[r * out_f + j];
               }
             }
           });
         },
         out);
  return out;
}

}  // namespace libkd
