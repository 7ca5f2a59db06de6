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
#include <numbers>
#include <string>
#include <vector>

#include "repsf/error.hpp"
#include "repsf/exact_sum.hpp"
#include "repsf/tensor.hpp"

namespace repsf {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Head locations in pixel coordinates; (0, 0) is the top-left corner of
/// the top-left pixel.
struct PointAnnotations {
  std::string image;
  int width = 0;
  int height = 0;
  std::vector<Point> points;

  void validate() const {
    if (width <= 0 || height <= 0)
      throw ValidationError("annotation size " + std::to_string(width) + "x" +
                            std::to_string(height) + " must be positive");
    for (std::size_t i = 0; i < points.size(); ++i) {
      const Point& p = points[i];
      const std::string idx = "points[" + std::to_string(i) + "]";
      if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw ValidationError(idx + ": coordinates must be finite");
      if (p.x < 0.0 || p.x >= width)
        throw ValidationError(idx + ": x=" + std::to_string(p.x) + " outside [0, " +
                              std::to_string(width) + ")");
      if (p.y < 0.0 || p.y >= height)
        throw ValidationError(idx + ": y=" + std::to_string(p.y) + " outside [0, " +
                              std::to_string(height) + ")");
    }
  }
};

/// Non-negative h x w grid; count() is the correctly rounded sum.
struct DensityMap {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> values;

  DensityMap() = default;
  DensityMap(std::size_t rows, std::size_t cols) : h(rows), w(cols), values(rows * cols, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return values[r * w + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * w + c]; }
  double count() const { return exact_sum(values); }

  void validate() const {
    if (values.size() != h * w)
      throw ShapeError("density map holds " + std::to_string(values.size()) + " values for " +
                       std::to_string(h) + "x" + std::to_string(w));
    for (std::size_t i = 0; i < values.size(); ++i)
      if (!std::isfinite(values[i]) || values[i] < 0.0)
        throw ValidationError("density value " + std::to_string(i) +
                              " is negative or not finite");
  }

  bool operator==(const DensityMap&) const = default;
};

/// Accepts (1, 1, h, w) tensors.
template <typename T>
DensityMap to_density_map(const Tensor4<T>& t) {
  if (t.n() != 1 || t.c() != 1)
    throw ShapeError("density map tensor must be 1x1xHxW, got " + t.shape().str());
  DensityMap dm(t.h(), t.w());
  for (std::size_t i = 0; i < t.numel(); ++i) dm.values[i] = static_cast<double>(t[i]);
  return dm;
}

template <typename T>
Tensor4<T> to_tensor(const DensityMap& dm) {
  Tensor4<T> t(Shape4{1, 1, dm.h, dm.w});
  for (std::size_t i = 0; i < dm.values.size(); ++i) t[i] = static_cast<T>(dm.values[i]);
  return t;
}

enum class SigmaMode { kFixed, kAdaptive };

struct GaussianConfig {
  SigmaMode mode = SigmaMode::kFixed;
  double sigma = 4.0;
  double truncation = 4.0;  // window radius in sigmas
  int k_nn = 3;
  double beta = 0.3;
  bool renormalize = true;

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma: must be positive");
    if (!(truncation >= 1.0) || !std::isfinite(truncation))
      throw ConfigError("truncation: must be >= 1");
    if (k_nn < 1) throw ConfigError("k_nn: must be >= 1");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta: must be positive");
  }
};

struct AdaptiveSigmas {
  std::vector<double> sigmas;
  std::size_t fallbacks = 0;  // points that received the fixed sigma
};

/// sigma_i = beta * mean distance to the k nearest other points, with k
/// capped at n - 1. Fewer than two points, or a zero mean distance, gives
/// the fixed sigma.
inline AdaptiveSigmas adaptive_sigmas(const PointAnnotations& ann, int k_nn, double beta,
                                      double fixed_sigma = 4.0) {
  AdaptiveSigmas out;
  const std::size_t n = ann.points.size();
  out.sigmas.assign(n, fixed_sigma);
  if (n < 2) {
    out.fallbacks = n;
    return out;
  }
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(k_nn, 1)), n - 1);
  std::vector<double> d(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      d[m++] = std::hypot(ann.points[i].x - ann.points[j].x, ann.points[i].y - ann.points[j].y);
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += d[j];
    const double sigma = beta * s / static_cast<double>(k);
    if (sigma > 0.0 && std::isfinite(sigma))
      out.sigmas[i] = sigma;
    else
      ++out.fallbacks;
  }
  return out;
}

/// Adds one truncated isotropic Gaussian sampled at pixel centres. With
/// renormalize the contribution sums to one; if no pixel centre falls
/// inside the window the unit mass goes to the pixel containing the point.
inline void add_gaussian(DensityMap& dm, Point p, double sigma, double truncation,
                         bool renormalize) {
  const double r = truncation * sigma;
  const double r2 = r * r;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  const auto lo = [](double v) { return static_cast<long>(std::floor(v)) - 1; };
  const long r0 = std::max(0L, lo(p.y - r));
  const long r1 = std::min(static_cast<long>(dm.h) - 1, lo(p.y + r) + 2);
  const long c0 = std::max(0L, lo(p.x - r));
  const long c1 = std::min(static_cast<long>(dm.w) - 1, lo(p.x + r) + 2);
  double z = 0.0;
  if (renormalize) {
    for (long row = r0; row <= r1; ++row) {
      const double dy = (static_cast<double>(row) + 0.5) - p.y;
      for (long col = c0; col <= c1; ++col) {
        const double dx = (static_cast<double>(col) + 0.5) - p.x;
        const double d2 = dx * dx + dy * dy;
        if (d2 <= r2) z += std::exp(-d2 * inv);
      }
    }
    if (!(z > 0.0)) {
      const auto row = std::min(static_cast<std::size_t>(p.y), dm.h - 1);
      const auto col = std::min(static_cast<std::size_t>(p.x), dm.w - 1);
      dm.at(row, col) += 1.0;
      return;
    }
  } else {
    z = 2.0 * std::numbers::pi * sigma * sigma;
  }
  for (long row = r0; row <= r1; ++row) {
    const double dy = (static_cast<double>(row) + 0.5) - p.y;
    for (long col = c0; col <= c1; ++col) {
      const double dx = (static_cast<double>(col) + 0.5) - p.x;
      const double d2 = dx * dx + dy * dy;
      if (d2 <= r2) dm.at(static_cast<std::size_t>(row), static_cast<std::size_t>(col)) += std::exp(-d2 * inv) / z;
    }
  }
}

/// One Gaussian per point with the given per-point sigmas.
inline DensityMap generate_density(const PointAnnotations& ann, const std::vector<double>& sigmas,
                                   const GaussianConfig& cfg) {
  ann.validate();
  cfg.validate();
  if (sigmas.size() != ann.points.size())
    throw ShapeError("one sigma per point required");
  DensityMap dm(static_cast<std::size_t>(ann.height), static_cast<std::size_t>(ann.width));
  for (std::size_t i = 0; i < ann.points.size(); ++i)
    add_gaussian(dm, ann.points[i], sigmas[i], cfg.truncation, cfg.renormalize);
  return dm;
}

inline DensityMap generate_density(const PointAnnotations& ann, const GaussianConfig& cfg) {
  ann.validate();
  cfg.validate();
  const std::vector<double> sigmas =
      cfg.mode == SigmaMode::kAdaptive
          ? adaptive_sigmas(ann, cfg.k_nn, cfg.beta, cfg.sigma).sigmas
          : std::vector<double>(ann.points.size(), cfg.sigma);
  return generate_density(ann, sigmas, cfg);
}

/// Sum-pools stride x stride blocks. Block sums are correctly rounded; one
/// block then absorbs the residue left by rounding them, so count() of the
/// result equals count() of the input bit for bit.
inline DensityMap align_to_output(const DensityMap& dm, std::size_t stride) {
  dm.validate();
  if (stride == 0 || dm.h % stride != 0 || dm.w % stride != 0)
    throw GeometryError("density map " + std::to_string(dm.h) + "x" + std::to_string(dm.w) +
                        " is not divisible by stride " + std::to_string(stride));
  if (stride == 1) return dm;
  DensityMap out(dm.h / stride, dm.w / stride);
  for (std::size_t i = 0; i < out.h; ++i)
    for (std::size_t j = 0; j < out.w; ++j) {
      ExactSum s;
      for (std::size_t a = 0; a < stride; ++a)
        for (std::size_t b = 0; b < stride; ++b) s.add(dm.at(i * stride + a, j * stride + b));
      out.at(i, j) = s.value();
    }
  const double target = dm.count();
  if (out.count() == target) return out;
  // A block no larger than half the total has an ulp at most half the
  // total's, so stepping it one ulp at a time cannot skip the target.
  std::vector<std::size_t> order(out.values.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    const bool sx = out.values[x] <= target / 2, sy = out.values[y] <= target / 2;
    if (sx != sy) return sx;
    return out.values[x] > out.values[y];
  });
  for (std::size_t idx : order) {
    if (out.values[idx] == 0.0) continue;
    // Jump to the input total minus the other blocks, then walk by ulps.
    ExactSum rest;
    for (double v : dm.values) rest.add(v);
    for (std::size_t j = 0; j < out.values.size(); ++j)
      if (j != idx) rest.add(-out.values[j]);
    const double saved = out.values[idx];
    out.values[idx] = std::max(0.0, rest.value());
    for (int step = 0; step < 64; ++step) {
      const double cur = out.count();
      if (cur == target) return out;
      double& v = out.values[idx];
      const double next = std::nextafter(v, cur < target ? INFINITY : 0.0);
      if (next <= 0.0) break;
      v = next;
    }
    out.values[idx] = saved;
  }
  if (out.count() == target) return out;
  throw NumericError("align_to_output could not reconcile the count");
}

}  // namespace repsf
