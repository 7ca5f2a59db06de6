// Copyright 2026 The RepSF Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "repsf/error.hpp"
#include "repsf/parallel.hpp"
#include "repsf/tensor.hpp"

namespace repsf {

struct Hw {
  int h = 1;
  int w = 1;
  bool operator==(const Hw&) const = default;
};

/// Convolution parameters. Weights are (out_ch, in_ch / groups, kh, kw);
/// the operator is cross-correlation with zero padding.
template <typename T>
struct ConvSpec {
  int in_ch = 1;
  int out_ch = 1;
  int groups = 1;
  Hw kernel{1, 1};
  Hw stride{1, 1};
  Hw dilation{1, 1};
  Hw padding{0, 0};
  Tensor4<T> weights;
  std::optional<std::vector<T>> bias;

  int in_per_group() const { return in_ch / groups; }
  int out_per_group() const { return out_ch / groups; }

  Shape4 weight_shape() const {
    return {static_cast<std::size_t>(out_ch), static_cast<std::size_t>(in_ch / groups),
            static_cast<std::size_t>(kernel.h), static_cast<std::size_t>(kernel.w)};
  }

  void validate() const {
    if (in_ch <= 0 || out_ch <= 0 || groups <= 0)
      throw ShapeError("conv channels and groups must be positive");
    if (in_ch % groups != 0 || out_ch % groups != 0)
      throw ShapeError("in_ch " + std::to_string(in_ch) + " and out_ch " + std::to_string(out_ch) +
                       " must be divisible by groups " + std::to_string(groups));
    if (kernel.h <= 0 || kernel.w <= 0 || stride.h <= 0 || stride.w <= 0 || dilation.h <= 0 ||
        dilation.w <= 0 || padding.h < 0 || padding.w < 0)
      throw GeometryError("conv kernel, stride and dilation must be positive, padding >= 0");
    if (!(weights.shape() == weight_shape()))
      throw ShapeError("conv weights " + weights.shape().str() + " expected " +
                       weight_shape().str());
    if (bias && bias->size() != static_cast<std::size_t>(out_ch))
      throw ShapeError("conv bias length " + std::to_string(bias->size()) + " expected " +
                       std::to_string(out_ch));
  }

  bool operator==(const ConvSpec&) const = default;
};

/// Inference-mode batch norm parameters.
template <typename T>
struct BatchNormSpec {
  std::vector<T> gamma, beta, running_mean, running_var;
  T eps = T(1e-5);

  std::size_t size() const { return gamma.size(); }

  void validate() const {
    const std::size_t n = gamma.size();
    if (beta.size() != n || running_mean.size() != n || running_var.size() != n)
      throw ShapeError("batch norm vectors must share one length");
    for (T v : running_var)
      if (!(v >= T(0))) throw NumericError("batch norm running_var must be >= 0");
  }

  static BatchNormSpec identity(std::size_t channels) {
    return {std::vector<T>(channels, T(1)), std::vector<T>(channels, T(0)),
            std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1)), T(0)};
  }

  bool operator==(const BatchNormSpec&) const = default;
};

inline Hw output_hw(Hw kernel, Hw stride, Hw dilation, Hw padding, int h, int w) {
  if (h <= 0 || w <= 0) throw GeometryError("input spatial dims must be positive");
  auto dim = [](int in, int k, int s, int d, int p) {
    const long num = static_cast<long>(in) + 2L * p - static_cast<long>(d) * (k - 1) - 1;
    // floor division, num may be negative
    const long q = num >= 0 ? num / s : -((-num + s - 1) / s);
    return q + 1;
  };
  const long oh = dim(h, kernel.h, stride.h, dilation.h, padding.h);
  const long ow = dim(w, kernel.w, stride.w, dilation.w, padding.w);
  if (oh <= 0 || ow <= 0)
    throw GeometryError("conv output would be " + std::to_string(oh) + "x" + std::to_string(ow) +
                        " for input " + std::to_string(h) + "x" + std::to_string(w));
  return {static_cast<int>(oh), static_cast<int>(ow)};
}

template <typename T>
Hw output_shape(const ConvSpec<T>& spec, int h, int w) {
  return output_hw(spec.kernel, spec.stride, spec.dilation, spec.padding, h, w);
}

namespace detail {

template <typename T>
Shape4 check_conv_input(const Tensor4<T>& x, const ConvSpec<T>& spec) {
  spec.validate();
  if (x.c() != static_cast<std::size_t>(spec.in_ch))
    throw ShapeError("input has " + std::to_string(x.c()) + " channels, conv expects " +
                     std::to_string(spec.in_ch));
  const Hw o = output_shape(spec, static_cast<int>(x.h()), static_cast<int>(x.w()));
  return {x.n(), static_cast<std::size_t>(spec.out_ch), static_cast<std::size_t>(o.h),
          static_cast<std::size_t>(o.w)};
}

}  // namespace detail

/// Reference convolution. Each output element is accumulated from zero in
/// the order (input channel, ky, kx), skipping padded taps, then the bias is
/// added. conv2d_gemm reproduces this order exactly.
template <typename T>
Tensor4<T> conv2d_naive(const Tensor4<T>& x, const ConvSpec<T>& spec) {
  const Shape4 os = detail::check_conv_input(x, spec);
  Tensor4<T> out(os);
  const int cin_g = spec.in_per_group(), cout_g = spec.out_per_group();
  const int H = static_cast<int>(x.h()), W = static_cast<int>(x.w());
  const int OH = static_cast<int>(os.h), OW = static_cast<int>(os.w);
  parallel_for(os.n * os.c, [&](std::size_t task) {
    const std::size_t n = task / os.c;
    const int o = static_cast<int>(task % os.c);
    const int g = o / cout_g;
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        T acc = T(0);
        for (int ci = 0; ci < cin_g; ++ci) {
          const std::size_t c = static_cast<std::size_t>(g * cin_g + ci);
          for (int ky = 0; ky < spec.kernel.h; ++ky) {
            const int iy = oy * spec.stride.h - spec.padding.h + ky * spec.dilation.h;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < spec.kernel.w; ++kx) {
              const int ix = ox * spec.stride.w - spec.padding.w + kx * spec.dilation.w;
              if (ix < 0 || ix >= W) continue;
              acc += spec.weights(o, ci, ky, kx) * x(n, c, iy, ix);
            }
          }
        }
        if (spec.bias) acc = acc + (*spec.bias)[o];
        out(n, o, oy, ox) = acc;
      }
    }
  });
  return out;
}

namespace detail {

#if defined(__AVX512F__)
inline constexpr int kVecBytes = 64;
inline constexpr int kGemmRows = 8;
#else
inline constexpr int kVecBytes = 32;
inline constexpr int kGemmRows = 4;
#endif
typedef float VecF32 __attribute__((vector_size(kVecBytes)));
typedef double VecF64 __attribute__((vector_size(kVecBytes)));

template <typename T>
struct GemmBlocking {
  using Vec = std::conditional_t<std::is_same_v<T, float>, VecF32, VecF64>;
  static constexpr int kLanes = static_cast<int>(kVecBytes / sizeof(T));
  static constexpr int kRows = kGemmRows;    // output channels per micro-tile
  static constexpr int kCols = 2 * kLanes;   // output pixels per micro-tile
  static constexpr std::size_t kTile = 256;  // output pixels per task
};

// Unit-stride variant over a zero-padded copy of the input plane. A padded
// tap adds w * 0 to an accumulator that is never -0, which leaves it
// unchanged, so results match the skipping loop for finite weights.
template <typename T>
void conv2d_single_input_channel_unit_stride(const Tensor4<T>& x, const ConvSpec<T>& spec,
                                             Tensor4<T>& out) {
  using B = GemmBlocking<T>;
  using V = typename B::Vec;
  constexpr int L = B::kLanes, NR = B::kCols;
  const int cout_g = spec.out_per_group();
  const int H = static_cast<int>(x.h()), W = static_cast<int>(x.w());
  const int OH = static_cast<int>(out.h()), OW = static_cast<int>(out.w());
  const int KH = spec.kernel.h, KW = spec.kernel.w;
  const int dh = spec.dilation.h, dw = spec.dilation.w;
  const int ph = spec.padding.h, pw = spec.padding.w;
  const int OWr = (OW + NR - 1) / NR * NR;
  const int PH = OH + (KH - 1) * dh;
  const int PW = OWr + (KW - 1) * dw;
  parallel_for(out.n() * out.c(), [&](std::size_t task) {
    const std::size_t n = task / out.c();
    const int o = static_cast<int>(task % out.c());
    const T* src = x.plane(n, static_cast<std::size_t>(o / cout_g)).data();
    T* dst = out.plane(n, static_cast<std::size_t>(o)).data();
    std::vector<T> pad(static_cast<std::size_t>(PH) * PW, T(0));
    for (int r = 0; r < PH; ++r) {
      const int iy = r - ph;
      if (iy < 0 || iy >= H) continue;
      for (int cidx = 0; cidx < PW; ++cidx) {
        const int ix = cidx - pw;
        if (ix >= 0 && ix < W) pad[static_cast<std::size_t>(r) * PW + cidx] = src[iy * W + ix];
      }
    }
    std::vector<T> wk(static_cast<std::size_t>(KH) * KW);
    for (int ky = 0; ky < KH; ++ky)
      for (int kx = 0; kx < KW; ++kx) wk[ky * KW + kx] = spec.weights(o, 0, ky, kx);
    const bool has_bias = spec.bias.has_value();
    const T b = has_bias ? (*spec.bias)[o] : T(0);
    alignas(64) T buf[NR];
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox0 = 0; ox0 < OW; ox0 += NR) {
        V lo{}, hi{};
        for (int ky = 0; ky < KH; ++ky) {
          const T* row = pad.data() + static_cast<std::size_t>(oy + ky * dh) * PW + ox0;
          for (int kx = 0; kx < KW; ++kx) {
            const V wv = V{} + wk[ky * KW + kx];
            V v0, v1;
            std::memcpy(&v0, row + kx * dw, sizeof(V));
            std::memcpy(&v1, row + kx * dw + L, sizeof(V));
            lo = lo + wv * v0;
            hi = hi + wv * v1;
          }
        }
        std::memcpy(buf, &lo, sizeof(V));
        std::memcpy(buf + L, &hi, sizeof(V));
        const int nc = std::min(NR, OW - ox0);
        T* d = dst + static_cast<std::size_t>(oy) * OW + ox0;
        if (has_bias) {
          for (int j = 0; j < nc; ++j) d[j] = buf[j] + b;
        } else {
          for (int j = 0; j < nc; ++j) d[j] = buf[j];
        }
      }
    }
  });
}

// Direct path for convs with one input channel per group (depthwise and
// depth-multiplier convs). Taps are accumulated in (ky, kx) order with
// out-of-range taps skipped, which is the reference order.
template <typename T>
void conv2d_single_input_channel(const Tensor4<T>& x, const ConvSpec<T>& spec, Tensor4<T>& out) {
  const int cout_g = spec.out_per_group();
  const int H = static_cast<int>(x.h()), W = static_cast<int>(x.w());
  const int OH = static_cast<int>(out.h()), OW = static_cast<int>(out.w());
  const int sh = spec.stride.h, sw = spec.stride.w;
  parallel_for(out.n() * out.c(), [&](std::size_t task) {
    const std::size_t n = task / out.c();
    const int o = static_cast<int>(task % out.c());
    const T* src = x.plane(n, static_cast<std::size_t>(o / cout_g)).data();
    T* dst = out.plane(n, static_cast<std::size_t>(o)).data();
    for (int ky = 0; ky < spec.kernel.h; ++ky) {
      for (int kx = 0; kx < spec.kernel.w; ++kx) {
        const T wv = spec.weights(o, 0, ky, kx);
        const int off_x = kx * spec.dilation.w - spec.padding.w;
        // ox range with 0 <= ox * sw + off_x < W
        int ox_lo = off_x >= 0 ? 0 : (-off_x + sw - 1) / sw;
        int ox_hi = W - 1 - off_x < 0 ? -1 : std::min(OW - 1, (W - 1 - off_x) / sw);
        if (ox_lo > ox_hi) continue;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * sh - spec.padding.h + ky * spec.dilation.h;
          if (iy < 0 || iy >= H) continue;
          const T* __restrict in_row = src + static_cast<std::size_t>(iy) * W + off_x;
          T* __restrict out_row = dst + static_cast<std::size_t>(oy) * OW;
          if (sw == 1) {
            for (int ox = ox_lo; ox <= ox_hi; ++ox) out_row[ox] += wv * in_row[ox];
          } else {
            for (int ox = ox_lo; ox <= ox_hi; ++ox) out_row[ox] += wv * in_row[ox * sw];
          }
        }
      }
    }
    if (spec.bias) {
      const T b = (*spec.bias)[o];
      for (int i = 0; i < OH * OW; ++i) dst[i] = dst[i] + b;
    }
  });
}

// acc[r][j] = sum_k a[k][r] * c[k][j], k ascending, starting from zero.
template <typename T>
inline void gemm_micro_kernel(const T* __restrict a, const T* __restrict c, std::size_t K,
                              T (&acc)[GemmBlocking<T>::kRows][GemmBlocking<T>::kCols]) {
  using B = GemmBlocking<T>;
  using V = typename B::Vec;
  constexpr int MR = B::kRows, L = B::kLanes;
  V lo[MR], hi[MR];
  for (int r = 0; r < MR; ++r) {
    lo[r] = V{};
    hi[r] = V{};
  }
  for (std::size_t k = 0; k < K; ++k) {
    V c0, c1;
    std::memcpy(&c0, c + k * B::kCols, sizeof(V));
    std::memcpy(&c1, c + k * B::kCols + L, sizeof(V));
    const T* ak = a + k * MR;
    for (int r = 0; r < MR; ++r) {
      const V ar = V{} + ak[r];
      lo[r] = lo[r] + ar * c0;
      hi[r] = hi[r] + ar * c1;
    }
  }
  for (int r = 0; r < MR; ++r) {
    std::memcpy(&acc[r][0], &lo[r], sizeof(V));
    std::memcpy(&acc[r][L], &hi[r], sizeof(V));
  }
}

}  // namespace detail

/// im2col + matrix multiply. Weights are packed into kRows-wide panels and
/// each task lowers a tile of output pixels into kCols-wide column panels.
/// The reduction for every output element runs over the im2col rows
/// (channel, ky, kx) in ascending order from zero, then adds the bias, so
/// results are bitwise equal to conv2d_naive. Convs with a single input
/// channel per group skip the lowering and accumulate taps directly.
template <typename T>
Tensor4<T> conv2d_gemm(const Tensor4<T>& x, const ConvSpec<T>& spec) {
  const Shape4 os = detail::check_conv_input(x, spec);
  Tensor4<T> out(os);
  if (spec.in_per_group() == 1) {
    if (spec.stride.h == 1 && spec.stride.w == 1)
      detail::conv2d_single_input_channel_unit_stride(x, spec, out);
    else
      detail::conv2d_single_input_channel(x, spec, out);
    return out;
  }
  using B = detail::GemmBlocking<T>;
  constexpr int MR = B::kRows, NR = B::kCols;
  const int G = spec.groups;
  const int cin_g = spec.in_per_group(), cout_g = spec.out_per_group();
  const int KH = spec.kernel.h, KW = spec.kernel.w;
  const std::size_t K = static_cast<std::size_t>(cin_g) * KH * KW;
  const int H = static_cast<int>(x.h()), W = static_cast<int>(x.w());
  const int OW = static_cast<int>(os.w);
  const std::size_t P = os.h * os.w;
  const std::size_t row_blocks = (static_cast<std::size_t>(cout_g) + MR - 1) / MR;

  // wpack[g][rb][k][r]
  std::vector<T> wpack(static_cast<std::size_t>(G) * row_blocks * K * MR, T(0));
  const std::span<const T> wdata = spec.weights.data();
  for (int g = 0; g < G; ++g)
    for (std::size_t rb = 0; rb < row_blocks; ++rb) {
      T* dst = wpack.data() + (static_cast<std::size_t>(g) * row_blocks + rb) * K * MR;
      for (int r = 0; r < MR; ++r) {
        const std::size_t ol = rb * MR + r;
        if (ol >= static_cast<std::size_t>(cout_g)) break;
        const T* src = wdata.data() + (static_cast<std::size_t>(g) * cout_g + ol) * K;
        for (std::size_t k = 0; k < K; ++k) dst[k * MR + r] = src[k];
      }
    }

  const std::size_t tiles = (P + B::kTile - 1) / B::kTile;
  const std::size_t tasks = os.n * static_cast<std::size_t>(G) * tiles;
  parallel_for(tasks, [&](std::size_t task) {
    const std::size_t t = task % tiles;
    const int g = static_cast<int>((task / tiles) % G);
    const std::size_t n = task / (tiles * G);
    const std::size_t p0 = t * B::kTile;
    const std::size_t pc = std::min(B::kTile, P - p0);
    const std::size_t panels = (pc + NR - 1) / NR;

    // col[panel][k][j]
    std::vector<T> col(panels * K * NR, T(0));
    std::size_t r = 0;
    for (int ci = 0; ci < cin_g; ++ci) {
      const T* src = x.plane(n, static_cast<std::size_t>(g * cin_g + ci)).data();
      for (int ky = 0; ky < KH; ++ky) {
        for (int kx = 0; kx < KW; ++kx, ++r) {
          int oy = static_cast<int>(p0 / OW), ox = static_cast<int>(p0 % OW);
          for (std::size_t j = 0; j < pc; ++j) {
            const int iy = oy * spec.stride.h - spec.padding.h + ky * spec.dilation.h;
            const int ix = ox * spec.stride.w - spec.padding.w + kx * spec.dilation.w;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W)
              col[((j / NR) * K + r) * NR + j % NR] = src[iy * W + ix];
            if (++ox == OW) {
              ox = 0;
              ++oy;
            }
          }
        }
      }
    }

    alignas(64) T acc[MR][NR];
    for (std::size_t pb = 0; pb < panels; ++pb) {
      const std::size_t j0 = pb * NR;
      const std::size_t nc = std::min<std::size_t>(NR, pc - j0);
      for (std::size_t rb = 0; rb < row_blocks; ++rb) {
        detail::gemm_micro_kernel<T>(
            wpack.data() + (static_cast<std::size_t>(g) * row_blocks + rb) * K * MR,
            col.data() + pb * K * NR, K, acc);
        for (int rr = 0; rr < MR; ++rr) {
          const std::size_t ol = rb * MR + rr;
          if (ol >= static_cast<std::size_t>(cout_g)) break;
          const std::size_t o = static_cast<std::size_t>(g) * cout_g + ol;
          T* dst = out.plane(n, o).data() + p0 + j0;
          if (spec.bias) {
            const T b = (*spec.bias)[o];
            for (std::size_t j = 0; j < nc; ++j) dst[j] = acc[rr][j] + b;
          } else {
            for (std::size_t j = 0; j < nc; ++j) dst[j] = acc[rr][j];
          }
        }
      }
    }
  });
  return out;
}

enum class ConvPath { kNaive, kGemm };

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const ConvSpec<T>& spec, ConvPath path = ConvPath::kGemm) {
  return path == ConvPath::kNaive ? conv2d_naive(x, spec) : conv2d_gemm(x, spec);
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
template <typename T>
Tensor4<T> batchnorm_infer(const Tensor4<T>& x, const BatchNormSpec<T>& bn) {
  bn.validate();
  if (bn.size() != x.c())
    throw ShapeError("batch norm has " + std::to_string(bn.size()) + " channels, input has " +
                     std::to_string(x.c()));
  Tensor4<T> y(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T denom = std::sqrt(bn.running_var[c] + bn.eps);
      auto src = x.plane(n, c);
      auto dst = y.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = bn.gamma[c] * (src[i] - bn.running_mean[c]) / denom + bn.beta[c];
    }
  }
  return y;
}

/// Convolution with an optional trailing batch norm.
template <typename T>
struct ConvBn {
  ConvSpec<T> conv;
  std::optional<BatchNormSpec<T>> bn;

  bool operator==(const ConvBn&) const = default;
};

template <typename T>
Tensor4<T> forward(const ConvBn<T>& unit, const Tensor4<T>& x, ConvPath path = ConvPath::kGemm) {
  Tensor4<T> y = conv2d(x, unit.conv, path);
  if (unit.bn) y = batchnorm_infer(y, *unit.bn);
  return y;
}

}  // namespace repsf
