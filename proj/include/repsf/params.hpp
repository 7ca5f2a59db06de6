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
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "repsf/conv.hpp"
#include "repsf/reparam.hpp"
#include "repsf/rng.hpp"

namespace repsf {

enum class ParamKind { kWeight, kBias, kBnGamma, kBnBeta, kBnMean, kBnVar };

/// A named view of one parameter array inside a model.
template <typename T>
struct ParamRef {
  std::string name;
  ParamKind kind;
  std::vector<std::size_t> shape;
  std::span<T> data;
  std::size_t fan_in = 1;
};

template <typename T>
using ParamVisitor = std::function<void(const ParamRef<T>&)>;

template <typename T>
void visit_params(const std::string& prefix, ConvSpec<T>& c, const ParamVisitor<T>& v) {
  const std::size_t fan_in =
      static_cast<std::size_t>(c.in_per_group()) * c.kernel.h * c.kernel.w;
  const Shape4 s = c.weights.shape();
  v({prefix + ".weight", ParamKind::kWeight, {s.n, s.c, s.h, s.w}, c.weights.data(), fan_in});
  if (c.bias) v({prefix + ".bias", ParamKind::kBias, {c.bias->size()}, *c.bias, fan_in});
}

template <typename T>
void visit_params(const std::string& prefix, BatchNormSpec<T>& bn, const ParamVisitor<T>& v) {
  const std::vector<std::size_t> shape{bn.size()};
  v({prefix + ".gamma", ParamKind::kBnGamma, shape, bn.gamma});
  v({prefix + ".beta", ParamKind::kBnBeta, shape, bn.beta});
  v({prefix + ".mean", ParamKind::kBnMean, shape, bn.running_mean});
  v({prefix + ".var", ParamKind::kBnVar, shape, bn.running_var});
}

template <typename T>
void visit_params(const std::string& prefix, ConvBn<T>& u, const ParamVisitor<T>& v) {
  visit_params(prefix + ".conv", u.conv, v);
  if (u.bn) visit_params(prefix + ".bn", *u.bn, v);
}

template <typename T>
void visit_params(const std::string& prefix, RepBlockSpec<T>& b, const ParamVisitor<T>& v) {
  if (b.large) visit_params(prefix + ".large", *b.large, v);
  if (b.small) visit_params(prefix + ".small", *b.small, v);
  if (b.identity) visit_params(prefix + ".identity", *b.identity, v);
  if (b.merged) visit_params(prefix + ".merged", *b.merged, v);
}

/// Deterministic initialization, applied in visit order:
///   weight, bias    U(-1/sqrt(fan_in), 1/sqrt(fan_in))
///   bn gamma        U(0.5, 1.5)     bn beta  U(-0.1, 0.1)
///   bn mean         U(-0.1, 0.1)    bn var   U(0.5, 1.5)
template <typename T>
ParamVisitor<T> uniform_initializer(SplitMix64& rng) {
  return [&rng](const ParamRef<T>& p) {
    double lo = -0.1, hi = 0.1;
    switch (p.kind) {
      case ParamKind::kWeight:
      case ParamKind::kBias:
        hi = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
        lo = -hi;
        break;
      case ParamKind::kBnGamma:
      case ParamKind::kBnVar:
        lo = 0.5;
        hi = 1.5;
        break;
      case ParamKind::kBnBeta:
      case ParamKind::kBnMean:
        break;
    }
    for (auto& x : p.data) x = static_cast<T>(rng.uniform(lo, hi));
  };
}

// Allocation helpers used by the model builders. Weights start at zero;
// values come from an initializer or a weight bundle.
template <typename T>
ConvSpec<T> make_conv(int in_ch, int out_ch, int groups, int k, int stride, int padding,
                      int dilation, bool bias) {
  ConvSpec<T> c;
  c.in_ch = in_ch;
  c.out_ch = out_ch;
  c.groups = groups;
  c.kernel = {k, k};
  c.stride = {stride, stride};
  c.dilation = {dilation, dilation};
  c.padding = {padding, padding};
  c.weights = Tensor4<T>(c.weight_shape());
  if (bias) c.bias = std::vector<T>(static_cast<std::size_t>(out_ch), T(0));
  return c;
}

template <typename T>
BatchNormSpec<T> make_bn(int channels, T eps = T(1e-5)) {
  const auto n = static_cast<std::size_t>(channels);
  return {std::vector<T>(n, T(1)), std::vector<T>(n, T(0)), std::vector<T>(n, T(0)),
          std::vector<T>(n, T(1)), eps};
}

template <typename T>
ConvBn<T> make_conv_bn(int in_ch, int out_ch, int groups, int k, int stride, int padding,
                       int dilation = 1) {
  return {make_conv<T>(in_ch, out_ch, groups, k, stride, padding, dilation, false),
          make_bn<T>(out_ch)};
}

/// Inference form of a conv+BN unit: BN folded, no separate normalization.
template <typename T>
ConvBn<T> fold_unit(const ConvBn<T>& u) {
  if (!u.bn) return u;
  return {fold_bn(u.conv, *u.bn), std::nullopt};
}

/// Inference form of a rep block: merged kernel only.
template <typename T>
RepBlockSpec<T> fold_block(const RepBlockSpec<T>& b) {
  RepBlockSpec<T> out;
  if (b.merged) {
    out.merged = b.merged;
  } else {
    RepBlockSpec<T> tmp = b;
    out.merged = merge_rep_block(tmp);
  }
  return out;
}

// Parameter and MAC accounting. Learnable parameters are conv weights and
// biases plus BN gamma and beta; running statistics are buffers.
template <typename T>
std::int64_t conv_params(const ConvSpec<T>& c) {
  return static_cast<std::int64_t>(c.weights.numel()) + (c.bias ? c.out_ch : 0);
}

template <typename T>
std::int64_t conv_macs(const ConvSpec<T>& c, Hw out) {
  return static_cast<std::int64_t>(c.out_ch) * out.h * out.w * c.in_per_group() * c.kernel.h *
         c.kernel.w;
}

/// Counts a conv+BN unit as stored (merged = false) or as it would be after
/// folding (merged = true: weights plus one bias per output channel).
template <typename T>
std::int64_t unit_params(const ConvBn<T>& u, bool merged) {
  if (merged && u.bn) return static_cast<std::int64_t>(u.conv.weights.numel()) + u.conv.out_ch;
  return conv_params(u.conv) + (u.bn ? 2 * static_cast<std::int64_t>(u.bn->size()) : 0);
}

template <typename T>
std::int64_t block_params(const RepBlockSpec<T>& b, bool merged) {
  if (merged) {
    const ConvSpec<T>& ref = b.reference_conv();
    return static_cast<std::int64_t>(ref.weights.numel()) + ref.out_ch;
  }
  if (!b.large) throw StateError("branch-form parameter count of a merged-only block");
  std::int64_t n = unit_params(*b.large, false);
  if (b.small) n += unit_params(*b.small, false);
  if (b.identity) n += 2 * static_cast<std::int64_t>(b.identity->size());
  return n;
}

template <typename T>
std::int64_t block_macs(const RepBlockSpec<T>& b, Hw out, bool merged) {
  if (merged) return conv_macs(b.reference_conv(), out);
  if (!b.large) throw StateError("branch-form MAC count of a merged-only block");
  std::int64_t n = conv_macs(b.large->conv, out);
  if (b.small) n += conv_macs(b.small->conv, out);
  return n;
}

}  // namespace repsf
