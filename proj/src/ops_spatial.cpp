// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include <memory>

#include "kernels.hpp"
#include "libkd/ops.hpp"
#include "op_util.hpp"

namespace libkd {

using namespace opdetail;

namespace {

struct ConvGeom {
  std::size_t B, Ci, H, W, Co, K, G, stride, pad, Ho, Wo;
  PadMode mode;
  std::size_t rows() const { return Ci * K * K; }
  std::size_t cols() const { return B * Ho * Wo; }
};

// Source index along one axis for output position o and kernel tap u, or -1 for padding.
inline long src_index(std::size_t o, std::size_t u, const ConvGeom& g, std::size_t extent) {
  long i = static_cast<long>(o * g.stride + u) - static_cast<long>(g.pad);
  const long n = static_cast<long>(extent);
  if (i >= 0 && i < n) return i;
  if (g.mode == PadMode::circular) return ((i % n) + n) % n;
  return -1;
}

// col[(c*K + u)*K + v][(b*Ho + oy)*Wo + ox] = x[b, c, oy*s + u - p, ox*s + v - p]
template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t N = g.cols();
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.Ci; ++c) {
    for (std::size_t u = 0; u < g.K; ++u) {
      for (std::size_t v = 0; v < g.K; ++v) {
        T* dst = col + ((c * g.K + u) * g.K + v) * N;
        for (std::size_t b = 0; b < g.B; ++b) {
          const T* src = x + (b * g.Ci + c) * g.H * g.W;
          for (std::size_t oy = 0; oy < g.Ho; ++oy) {
            const long iy = src_index(oy, u, g, g.H);
            T* d = dst + b * hw + oy * g.Wo;
            if (iy < 0) {
              std::fill(d, d + g.Wo, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(iy) * g.W;
            for (std::size_t ox = 0; ox < g.Wo; ++ox) {
              const long ix = src_index(ox, v, g, g.W);
              d[ox] = ix < 0 ? T(0) : srow[ix];
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  const std::size_t N = g.cols();
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.Ci; ++c) {
    for (std::size_t u = 0; u < g.K; ++u) {
      for (std::size_t v = 0; v < g.K; ++v) {
        const T* src = col + ((c * g.K + u) * g.K + v) * N;
        for (std::size_t b = 0; b < g.B; ++b) {
          T* dst = dx + (b * g.Ci + c) * g.H * g.W;
          for (std::size_t oy = 0; oy < g.Ho; ++oy) {
            const long iy = src_index(oy, u, g, g.H);
            if (iy < 0) continue;
            const T* s = src + b * hw + oy * g.Wo;
            T* drow = dst + static_cast<std::size_t>(iy) * g.W;
            for (std::size_t ox = 0; ox < g.Wo; ++ox) {
              const long ix = src_index(ox, v, g, g.W);
              if (ix >= 0) drow[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dOptions& opt) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  require_dtype(x, w, "conv2d");
  ConvGeom g{};
  g.B = x.size(0);
  g.Ci = x.size(1);
  g.H = x.size(2);
  g.W = x.size(3);
  g.Co = w.size(0);
  g.K = w.size(2);
  g.G = opt.groups;
  g.stride = opt.stride;
  g.mode = opt.pad_mode;
  g.pad = opt.padding.value_or(g.K / 2);
  if (w.size(3) != g.K) throw DimensionError("conv2d: only square kernels are supported");
  if (g.G == 0 || g.Ci % g.G != 0 || g.Co % g.G != 0 || w.size(1) * g.G != g.Ci) {
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()) + " and groups " + std::to_string(g.G));
  }
  if (g.stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (g.H + 2 * g.pad < g.K || g.W + 2 * g.pad < g.K) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  if (g.mode == PadMode::circular && (g.pad > g.H || g.pad > g.W)) {
    throw DimensionError("conv2d: circular padding larger than the input");
  }
  if (bias.defined()) {
    require_dtype(x, bias, "conv2d");
    if (bias.numel() != g.Co) throw DimensionError("conv2d: bias size mismatch");
  }
  g.Ho = (g.H + 2 * g.pad - g.K) / g.stride + 1;
  g.Wo = (g.W + 2 * g.pad - g.K) / g.stride + 1;

  const std::size_t N = g.cols();
  const std::size_t hw = g.Ho * g.Wo;
  const std::size_t Rg = g.rows() / g.G;
  const std::size_t Cog = g.Co / g.G;
  Tensor out = Tensor::zeros({g.B, g.Co, g.Ho, g.Wo}, x.dtype());
  Tape* tape = recording_tape({&x, &w, &bias});
  auto col = std::make_shared<detail::Buffer>(x.dtype(), g.rows() * N);

  detail::dispatch(x.dtype(), [&]<class T>(T) {
    T* cv = col->as<T>().data();
    im2col(x.data<T>().data(), g, cv);
    std::vector<T> tmp(g.Co * N);
    const T* wv = w.data<T>().data();
    for (std::size_t grp = 0; grp < g.G; ++grp) {
      kernels::gemm<T>(Cog, N, Rg, wv + grp * Cog * Rg, Rg, cv + grp * Rg * N, N,
                       tmp.data() + grp * Cog * N, N, false);
    }
    auto o = out.mutable_data<T>();
    for (std::size_t b = 0; b < g.B; ++b) {
      for (std::size_t co = 0; co < g.Co; ++co) {
        std::copy_n(tmp.data() + co * N + b * hw, hw, o.data() + (b * g.Co + co) * hw);
      }
    }
    if (bias.defined()) {
      auto bv = bias.data<T>();
      for (std::size_t b = 0; b < g.B; ++b) {
        for (std::size_t co = 0; co < g.Co; ++co) {
          T* row = o.data() + (b * g.Co + co) * hw;
          for (std::size_t i = 0; i < hw; ++i) row[i] += bv[co];
        }
      }
    }
  });
  if (!tape) return out;

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  tape->push(
      inputs,
      [g, w, col, N, hw, Rg, Cog](const detail::Buffer& gb, std::span<detail::Buffer* const> gi) {
        detail::dispatch(gb.dtype, [&]<class T>(T) {
          auto go = gb.as<T>();
          auto dx = grad_of<T>(gi, 0);
          auto dw = grad_of<T>(gi, 1);
          auto db = gi.size() > 2 ? grad_of<T>(gi, 2) : std::span<T>();
          // dT[co][b*hw + i]
          std::vector<T> dT(g.Co * N);
          for (std::size_t b = 0; b < g.B; ++b) {
            for (std::size_t co = 0; co < g.Co; ++co) {
              std::copy_n(go.data() + (b * g.Co + co) * hw, hw, dT.data() + co * N + b * hw);
            }
          }
          if (!db.empty()) {
            for (std::size_t co = 0; co < g.Co; ++co) {
              T acc = 0;
              for (std::size_t n = 0; n < N; ++n) acc += dT[co * N + n];
              db[co] += acc;
            }
          }
          const T* cv = col->as<T>().data();
          const std::size_t R = g.rows();
          if (!dw.empty()) {
            std::vector<T> colT(N * R);
            kernels::transpose<T>(R, N, cv, N, colT.data(), R);
            for (std::size_t grp = 0; grp < g.G; ++grp) {
              kernels::gemm<T>(Cog, Rg, N, dT.data() + grp * Cog * N, N, colT.data() + grp * Rg, R,
                               dw.data() + grp * Cog * Rg, Rg, true);
            }
          }
          if (!dx.empty()) {
            std::vector<T> dcol(R * N);
            std::vector<T> wt(Rg * Cog);
            const T* wv = w.data<T>().data();
            for (std::size_t grp = 0; grp < g.G; ++grp) {
              kernels::transpose<T>(Cog, Rg, wv + grp * Cog * Rg, Rg, wt.data(), Cog);
              kernels::gemm<T>(Rg, N, Cog, wt.data(), Cog, dT.data() + grp * Cog * N, N,
                               dcol.data() + grp * Rg * N, N, false);
            }
            col2im_add(dcol.data(), g, dx.data());
          }
        });
      },
      out);
  return out;
}

Tensor involution2d(const Tensor& x, const Tensor& kernels, std::size_t kernel_size, std::size_t groups,
                    std::size_t stride) {
  require_rank(x, 4, "involution2d");
  require_rank(kernels, 4, "involution2d");
  require_dtype(x, kernels, "involution2d");
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t K = kernel_size, G = groups;
  if (K == 0 || K % 2 == 0) throw ConfigError("involution2d: kernel size must be odd");
  if (G == 0 || C % G != 0) {
    throw DimensionError("involution2d: " + std::to_string(C) + " channels not divisible into " +
                         std::to_string(G) + " groups");
  }
  if (stride == 0) throw ConfigError("involution2d: stride must be positive");
  const std::size_t p = K / 2;
  const std::size_t Ho = (H + 2 * p - K) / stride + 1;
  const std::size_t Wo = (W + 2 * p - K) / stride + 1;
  const Shape expect{B, G * K * K, Ho, Wo};
  if (kernels.shape() != expect) {
    throw DimensionError("involution2d: kernels " + shape_str(kernels.shape()) + ", expected " +
                         shape_str(expect));
  }
  const std::size_t cpg = C / G;
  const std::size_t hw = Ho * Wo;

  // Visits every (output, tap, input) triple in the fixed summation order.
  auto for_each = [=](auto&& f) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t grp = c / cpg;
        const std::size_t xbase = (b * C + c) * H * W;
        const std::size_t ybase = (b * C + c) * hw;
        const std::size_t kbase = (b * G + grp) * K * K * hw;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          for (std::size_t u = 0; u < K; ++u) {
            const long iy = static_cast<long>(oy * stride + u) - static_cast<long>(p);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t v = 0; v < K; ++v) {
              const std::size_t krow = kbase + (u * K + v) * hw + oy * Wo;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const long ix = static_cast<long>(ox * stride + v) - static_cast<long>(p);
                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                f(ybase + oy * Wo + ox, krow + ox, xbase + static_cast<std::size_t>(iy) * W +
                                                       static_cast<std::size_t>(ix));
              }
            }
          }
        }
      }
    }
  };

  Tensor out = Tensor::zeros({B, C, Ho, Wo}, x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto kv = kernels.data<T>();
    auto o = out.mutable_data<T>();
    for_each([&](std::size_t yi, std::size_t ki, std::size_t xi) { o[yi] += kv[ki] * xv[xi]; });
  });
  record(recording_tape({&x, &kernels}), {x, kernels},
         [x, kernels, for_each](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto xv = x.data<T>();
             auto kv = kernels.data<T>();
             auto dx = grad_of<T>(gi, 0);
             auto dk = grad_of<T>(gi, 1);
             if (!dx.empty()) {
               for_each([&](std::size_t yi, std::size_t ki, std::size_t xi) { dx[xi] += go[yi] * kv[ki]; });
             }
             if (!dk.empty()) {
               for_each([&](std::size_t yi, std::size_t ki, std::size_t xi) { dk[ki] += go[yi] * xv[xi]; });
             }
           });
         },
         out);
  return out;
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  require_rank(x, 4, "avg_pool2d");
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (k == 0 || H % k != 0 || W % k != 0) {
    throw DimensionError("avg_pool2d: window " + std::to_string(k) + " does not tile " +
                         shape_str(x.shape()));
  }
  const std::size_t Ho = H / k, Wo = W / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out = Tensor::zeros({B, C, Ho, Wo}, x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          T acc = 0;
          for (std::size_t u = 0; u < k; ++u) {
            for (std::size_t v = 0; v < k; ++v) acc += xv[(bc * H + oy * k + u) * W + ox * k + v];
          }
          o[(bc * Ho + oy) * Wo + ox] = acc * static_cast<T>(inv);
        }
      }
    }
  });
  record(recording_tape({&x}), {x},
         [B, C, H, W, Ho, Wo, k, inv](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t bc = 0; bc < B * C; ++bc) {
               for (std::size_t oy = 0; oy < Ho; ++oy) {
                 for (std::size_t ox = 0; ox < Wo; ++ox) {
                   const T gv = go[(bc * Ho + oy) * Wo + ox] * static_cast<T>(inv);
                   for (std::size_t u = 0; u < k; ++u) {
                     for (std::size_t v = 0; v < k; ++v) d[(bc * H + oy * k + u) * W + ox * k + v] += gv;
                   }
                 }
               }
             }
           });
         },
         out);
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t B = x.size(0), C = x.size(1), hw = x.size(2) * x.size(3);
  Tensor out = Tensor::zeros({B, C}, x.dtype());
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      T acc = 0;
      for (std::size_t i = 0; i < hw; ++i) acc += xv[bc * hw + i];
      o[bc] = acc / static_cast<T>(hw);
    }
  });
  record(recording_tape({&x}), {x},
         [B, C, hw](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t bc = 0; bc < B * C; ++bc) {
               const T gv = go[bc] / static_cast<T>(hw);
               for (std::size_t i = 0; i < hw; ++i) d[bc * hw + i] += gv;
             }
           });
         },
         out);
  return out;
}

Tensor shortcut_pad(const Tensor& x, std::size_t stride, std::size_t out_channels) {
  require_rank(x, 4, "shortcut_pad");
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (stride == 0) throw ConfigError("shortcut_pad: stride must be positive");
  if (out_channels < C) throw DimensionError("shortcut_pad: cannot reduce channels");
  const std::size_t Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
  Tensor out = Tensor::zeros({B, out_channels, Ho, Wo}, x.dtype());
  auto index = [=](std::size_t b, std::size_t c, std::size_t oy, std::size_t ox) {
    return ((b * C + c) * H + oy * stride) * W + ox * stride;
  };
  detail::dispatch(x.dtype(), [&]<class T>(T) {
    auto xv = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            o[((b * out_channels + c) * Ho + oy) * Wo + ox] = xv[index(b, c, oy, ox)];
          }
        }
      }
    }
  });
  record(recording_tape({&x}), {x},
         [=](const detail::Buffer& g, std::span<detail::Buffer* const> gi) {
           detail::dispatch(g.dtype, [&]<class T>(T) {
             auto go = g.as<T>();
             auto d = grad_of<T>(gi, 0);
             for (std::size_t b = 0; b < B; ++b) {
               for (std::size_t c = 0; c < C; ++c) {
                 for (std::size_t oy = 0; oy < Ho; ++oy) {
                   for (std::size_t ox = 0; ox < Wo; ++ox) {
                     d[index(b, c, oy, ox)] += go[((b * out_channels + c) * Ho + oy) * Wo + ox];
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
