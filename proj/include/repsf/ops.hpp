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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "repsf/error.hpp"
#include "repsf/tensor.hpp"

namespace repsf {

template <typename T>
Tensor4<T> relu(Tensor4<T> x) {
  for (auto& v : x.data()) v = v > T(0) ? v : T(0);
  return x;
}

template <typename T>
Tensor4<T> sigmoid(Tensor4<T> x) {
  for (auto& v : x.data()) v = T(1) / (T(1) + std::exp(-v));
  return x;
}

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (!(a.shape() == b.shape()))
    throw ShapeError("add: " + a.shape().str() + " vs " + b.shape().str());
  Tensor4<T> y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = y[i] + b[i];
  return y;
}

template <typename T>
Tensor4<T> sub(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (!(a.shape() == b.shape()))
    throw ShapeError("sub: " + a.shape().str() + " vs " + b.shape().str());
  Tensor4<T> y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = y[i] - b[i];
  return y;
}

/// Channel means, output (n, c, 1, 1).
template <typename T>
Tensor4<T> global_avg_pool(const Tensor4<T>& x) {
  if (x.h() == 0 || x.w() == 0) throw ShapeError("global_avg_pool of an empty plane");
  Tensor4<T> y(Shape4{x.n(), x.c(), 1, 1});
  const double count = static_cast<double>(x.h() * x.w());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      auto src = x.plane(n, c);
      // Shifted by the first element so a constant plane averages exactly.
      const double first = static_cast<double>(src[0]);
      double s = 0.0;
      for (T v : src) s += static_cast<double>(v) - first;
      y(n, c, 0, 0) = static_cast<T>(first + s / count);
    }
  return y;
}

/// Average over an out_h x out_w grid of bins; bin i spans
/// [floor(i*H/out_h), ceil((i+1)*H/out_h)).
template <typename T>
Tensor4<T> adaptive_avg_pool(const Tensor4<T>& x, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0 || x.h() == 0 || x.w() == 0)
    throw ShapeError("adaptive_avg_pool needs positive sizes");
  Tensor4<T> y(Shape4{x.n(), x.c(), out_h, out_w});
  const std::size_t H = x.h(), W = x.w();
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      auto src = x.plane(n, c);
      for (std::size_t i = 0; i < out_h; ++i) {
        const std::size_t y0 = i * H / out_h, y1 = ((i + 1) * H + out_h - 1) / out_h;
        for (std::size_t j = 0; j < out_w; ++j) {
          const std::size_t x0 = j * W / out_w, x1 = ((j + 1) * W + out_w - 1) / out_w;
          const double first = static_cast<double>(src[y0 * W + x0]);
          double s = 0.0;
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx)
              s += static_cast<double>(src[yy * W + xx]) - first;
          y(n, c, i, j) =
              static_cast<T>(first + s / static_cast<double>((y1 - y0) * (x1 - x0)));
        }
      }
    }
  return y;
}

/// Bilinear resize with half-pixel centers (align_corners = false).
template <typename T>
Tensor4<T> bilinear_upsample(const Tensor4<T>& x, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0 || x.h() == 0 || x.w() == 0)
    throw ShapeError("bilinear_upsample needs positive sizes");
  struct Tap {
    std::size_t i0, i1;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      if (src < 0.0) src = 0.0;
      std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
      std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(x.h(), out_h), tx = taps(x.w(), out_w);
  Tensor4<T> y(Shape4{x.n(), x.c(), out_h, out_w});
  const std::size_t W = x.w();
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      auto src = x.plane(n, c);
      auto dst = y.plane(n, c);
      for (std::size_t i = 0; i < out_h; ++i) {
        const Tap& a = ty[i];
        for (std::size_t j = 0; j < out_w; ++j) {
          const Tap& b = tx[j];
          // a + t * (b - a) reproduces constant regions exactly.
          const double tl = src[a.i0 * W + b.i0], tr = src[a.i0 * W + b.i1];
          const double bl = src[a.i1 * W + b.i0], br = src[a.i1 * W + b.i1];
          const double top = tl + b.frac * (tr - tl);
          const double bot = bl + b.frac * (br - bl);
          dst[i * out_w + j] = static_cast<T>(top + a.frac * (bot - top));
        }
      }
    }
  return y;
}

/// Stacks channels in argument order.
template <typename T>
Tensor4<T> concat_channels(std::span<const Tensor4<T>> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape4 s0 = parts[0].shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.n() != s0.n || p.h() != s0.h || p.w() != s0.w)
      throw ShapeError("concat parts disagree: " + s0.str() + " vs " + p.shape().str());
    channels += p.c();
  }
  Tensor4<T> y(Shape4{s0.n, channels, s0.h, s0.w});
  for (std::size_t n = 0; n < s0.n; ++n) {
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      for (std::size_t c = 0; c < p.c(); ++c) {
        auto src = p.plane(n, c);
        std::copy(src.begin(), src.end(), y.plane(n, c0 + c).begin());
      }
      c0 += p.c();
    }
  }
  return y;
}

template <typename T>
Tensor4<T> concat_channels(std::initializer_list<Tensor4<T>> parts) {
  return concat_channels(std::span<const Tensor4<T>>(parts.begin(), parts.size()));
}

/// Sums non-overlapping factor x factor blocks.
template <typename T>
Tensor4<T> sum_pool(const Tensor4<T>& x, std::size_t factor) {
  if (factor == 0 || x.h() % factor != 0 || x.w() % factor != 0)
    throw ShapeError("sum_pool: " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                     " is not divisible by " + std::to_string(factor));
  const std::size_t oh = x.h() / factor, ow = x.w() / factor, W = x.w();
  Tensor4<T> y(Shape4{x.n(), x.c(), oh, ow});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      auto src = x.plane(n, c);
      auto dst = y.plane(n, c);
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          T s = T(0);
          for (std::size_t a = 0; a < factor; ++a)
            for (std::size_t b = 0; b < factor; ++b) s += src[(i * factor + a) * W + j * factor + b];
          dst[i * ow + j] = s;
        }
    }
  return y;
}

}  // namespace repsf
