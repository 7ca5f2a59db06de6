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
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "repsf/conv.hpp"
#include "repsf/error.hpp"
#include "repsf/ops.hpp"
#include "repsf/rng.hpp"
#include "repsf/tensor.hpp"

namespace repsf {

/// Returns a conv computing bn(conv(x)) in one pass. The result always has
/// a bias.
template <typename T>
ConvSpec<T> fold_bn(const ConvSpec<T>& conv, const BatchNormSpec<T>& bn) {
  conv.validate();
  bn.validate();
  if (bn.size() != static_cast<std::size_t>(conv.out_ch))
    throw ShapeError("fold_bn: batch norm has " + std::to_string(bn.size()) +
                     " channels, conv has " + std::to_string(conv.out_ch));
  ConvSpec<T> out = conv;
  std::vector<T> bias(static_cast<std::size_t>(conv.out_ch));
  const std::size_t per_out = conv.weights.numel() / static_cast<std::size_t>(conv.out_ch);
  for (int o = 0; o < conv.out_ch; ++o) {
    const T var = bn.running_var[o] + bn.eps;
    if (!(var > T(0)))
      throw NumericError("fold_bn: running_var + eps must be positive (channel " +
                         std::to_string(o) + ")");
    const T scale = bn.gamma[o] / std::sqrt(var);
    auto w = out.weights.data().subspan(static_cast<std::size_t>(o) * per_out, per_out);
    for (auto& v : w) v = v * scale;
    const T b = conv.bias ? (*conv.bias)[o] : T(0);
    bias[o] = bn.beta[o] + (b - bn.running_mean[o]) * scale;
  }
  out.bias = std::move(bias);
  return out;
}

namespace detail {

inline void require_odd(int k, const char* what) {
  if (k <= 0 || k % 2 == 0)
    throw ParityError(std::string(what) + " must be a positive odd size, got " + std::to_string(k));
}

inline int same_padding(int dilation, int k) { return dilation * (k - 1) / 2; }

}  // namespace detail

/// Zero-pads a "same"-padded odd k x k kernel to K x K, centered.
template <typename T>
ConvSpec<T> embed_kernel(const ConvSpec<T>& conv, int K) {
  conv.validate();
  detail::require_odd(conv.kernel.h, "kernel height");
  detail::require_odd(conv.kernel.w, "kernel width");
  detail::require_odd(K, "target kernel");
  if (K < conv.kernel.h || K < conv.kernel.w)
    throw ShapeError("embed_kernel: target " + std::to_string(K) + " is smaller than kernel");
  if (conv.padding.h != detail::same_padding(conv.dilation.h, conv.kernel.h) ||
      conv.padding.w != detail::same_padding(conv.dilation.w, conv.kernel.w))
    throw GeometryError("embed_kernel requires same padding");
  if (conv.kernel == Hw{K, K}) return conv;

  ConvSpec<T> out = conv;
  out.kernel = {K, K};
  out.padding = {detail::same_padding(conv.dilation.h, K), detail::same_padding(conv.dilation.w, K)};
  out.weights = Tensor4<T>(out.weight_shape());
  const int oy = (K - conv.kernel.h) / 2, ox = (K - conv.kernel.w) / 2;
  for (std::size_t o = 0; o < conv.weights.n(); ++o)
    for (std::size_t i = 0; i < conv.weights.c(); ++i)
      for (int y = 0; y < conv.kernel.h; ++y)
        for (int x = 0; x < conv.kernel.w; ++x)
          out.weights(o, i, y + oy, x + ox) = conv.weights(o, i, y, x);
  return out;
}

/// K x K kernel whose output channel o copies input channel o.
template <typename T>
ConvSpec<T> identity_as_conv(int channels, int groups, int K, int dilation = 1) {
  detail::require_odd(K, "identity kernel");
  if (channels <= 0 || groups <= 0 || channels % groups != 0)
    throw ShapeError("identity_as_conv: channels " + std::to_string(channels) +
                     " not divisible by groups " + std::to_string(groups));
  ConvSpec<T> c;
  c.in_ch = c.out_ch = channels;
  c.groups = groups;
  c.kernel = {K, K};
  c.dilation = {dilation, dilation};
  c.padding = {detail::same_padding(dilation, K), detail::same_padding(dilation, K)};
  c.weights = Tensor4<T>(c.weight_shape());
  const int per_group = channels / groups;
  for (int o = 0; o < channels; ++o) c.weights(o, o % per_group, K / 2, K / 2) = T(1);
  return c;
}

/// Sums parallel convs of identical geometry into one. Branches are added in
/// list order, so a fixed order gives bitwise-reproducible weights.
template <typename T>
ConvSpec<T> merge_parallel(std::span<const ConvSpec<T>> convs) {
  if (convs.empty()) throw ShapeError("merge_parallel of zero convs");
  const ConvSpec<T>& first = convs[0];
  first.validate();
  bool any_bias = false;
  for (const auto& c : convs) {
    c.validate();
    if (c.in_ch != first.in_ch || c.out_ch != first.out_ch || c.groups != first.groups ||
        !(c.kernel == first.kernel) || !(c.stride == first.stride) ||
        !(c.dilation == first.dilation) || !(c.padding == first.padding))
      throw ShapeError("merge_parallel: branch geometries differ");
    any_bias = any_bias || c.bias.has_value();
  }
  ConvSpec<T> out = first;
  for (std::size_t i = 1; i < convs.size(); ++i) {
    auto dst = out.weights.data();
    auto src = convs[i].weights.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = dst[j] + src[j];
  }
  if (any_bias) {
    std::vector<T> bias(static_cast<std::size_t>(first.out_ch), T(0));
    for (const auto& c : convs)
      if (c.bias)
        for (std::size_t o = 0; o < bias.size(); ++o) bias[o] = bias[o] + (*c.bias)[o];
    out.bias = std::move(bias);
  } else {
    out.bias.reset();
  }
  return out;
}

template <typename T>
ConvSpec<T> merge_parallel(std::initializer_list<ConvSpec<T>> convs) {
  return merge_parallel(std::span<const ConvSpec<T>>(convs.begin(), convs.size()));
}

/// Multi-branch large-kernel block: K x K conv+BN, optional k x k conv+BN,
/// optional identity BN. `large` is absent only in blocks loaded in
/// merged-only form.
template <typename T>
struct RepBlockSpec {
  std::optional<ConvBn<T>> large;
  std::optional<ConvBn<T>> small;
  std::optional<BatchNormSpec<T>> identity;
  std::optional<ConvSpec<T>> merged;

  bool has_branches() const { return large.has_value(); }

  // Geometry of whichever form is present.
  const ConvSpec<T>& reference_conv() const {
    if (large) return large->conv;
    if (merged) return *merged;
    throw StateError("rep block holds neither branches nor a merged kernel");
  }

  void validate() const {
    if (!large) {
      if (!merged) throw StateError("rep block holds neither branches nor a merged kernel");
      merged->validate();
      return;
    }
    const ConvSpec<T>& L = large->conv;
    L.validate();
    if (!large->bn) throw StructureError("large branch needs a batch norm");
    detail::require_odd(L.kernel.h, "large kernel");
    if (L.kernel.h != L.kernel.w) throw StructureError("large kernel must be square");
    if (L.padding.h != detail::same_padding(L.dilation.h, L.kernel.h) ||
        L.padding.w != detail::same_padding(L.dilation.w, L.kernel.w))
      throw StructureError("large branch must use same padding");
    if (small) {
      const ConvSpec<T>& S = small->conv;
      S.validate();
      if (!small->bn) throw StructureError("small branch needs a batch norm");
      detail::require_odd(S.kernel.h, "small kernel");
      detail::require_odd(S.kernel.w, "small kernel");
      if (S.kernel.h > L.kernel.h || S.kernel.w > L.kernel.w)
        throw StructureError("small kernel larger than large kernel");
      if (S.in_ch != L.in_ch || S.out_ch != L.out_ch || S.groups != L.groups ||
          !(S.stride == L.stride) || !(S.dilation == L.dilation))
        throw StructureError("small branch geometry differs from large branch");
      if (S.padding.h != detail::same_padding(S.dilation.h, S.kernel.h) ||
          S.padding.w != detail::same_padding(S.dilation.w, S.kernel.w))
        throw StructureError("small branch must use same padding");
    }
    if (identity) {
      if (L.in_ch != L.out_ch)
        throw StructureError("identity branch needs in_ch == out_ch");
      if (!(L.stride == Hw{1, 1})) throw StructureError("identity branch needs stride 1");
      identity->validate();
      if (identity->size() != static_cast<std::size_t>(L.out_ch))
        throw ShapeError("identity batch norm length differs from channel count");
    }
  }
};

/// Folds every branch, embeds to the large kernel and sums in the order
/// (large, small, identity). Stores the result in block.merged.
template <typename T>
ConvSpec<T> merge_rep_block(RepBlockSpec<T>& block) {
  if (!block.large) throw StateError("merge_rep_block: branch weights absent");
  block.validate();
  const ConvSpec<T>& L = block.large->conv;
  const int K = L.kernel.h;
  std::vector<ConvSpec<T>> parts;
  parts.push_back(fold_bn(L, *block.large->bn));
  if (block.small) parts.push_back(embed_kernel(fold_bn(block.small->conv, *block.small->bn), K));
  if (block.identity) {
    ConvSpec<T> id = identity_as_conv<T>(L.in_ch, L.groups, K, L.dilation.h);
    id.dilation = L.dilation;
    id.padding = L.padding;
    parts.push_back(fold_bn(id, *block.identity));
  }
  block.merged = merge_parallel(std::span<const ConvSpec<T>>(parts));
  return *block.merged;
}

template <typename T>
Tensor4<T> rep_block_forward(const RepBlockSpec<T>& block, const Tensor4<T>& x, bool merged,
                             ConvPath path = ConvPath::kGemm) {
  if (merged) {
    if (!block.merged) throw StateError("merged forward requested but the block is not merged");
    return conv2d(x, *block.merged, path);
  }
  if (!block.large) throw StateError("branch forward requested but branch weights are absent");
  Tensor4<T> y = forward(*block.large, x, path);
  if (block.small) y = add(y, forward(*block.small, x, path));
  if (block.identity) y = add(y, batchnorm_infer(x, *block.identity));
  return y;
}

struct EquivalenceReport {
  int trials = 0;
  double max_abs_diff = 0.0;
  double max_rel_diff = 0.0;
  double tolerance = 0.0;
  bool passed = true;
  bool zero_trials = false;
};

/// Runs seeded random inputs through the branch form and the merged form
/// (both with the reference convolution) and records the largest deviation.
template <typename T>
EquivalenceReport equivalence_check(const RepBlockSpec<T>& block, int trials, double tol,
                                    std::uint64_t seed, int h = 12, int w = 12) {
  if (!block.merged) throw StateError("equivalence_check: block has no merged kernel");
  EquivalenceReport rep;
  rep.trials = std::max(trials, 0);
  rep.tolerance = tol;
  rep.zero_trials = rep.trials == 0;
  SplitMix64 rng(seed);
  const ConvSpec<T>& ref = block.reference_conv();
  for (int t = 0; t < rep.trials; ++t) {
    Tensor4<T> x = random_tensor<T>(
        {1, static_cast<std::size_t>(ref.in_ch), static_cast<std::size_t>(h),
         static_cast<std::size_t>(w)},
        rng);
    const Tensor4<T> a = rep_block_forward(block, x, false, ConvPath::kNaive);
    const Tensor4<T> b = rep_block_forward(block, x, true, ConvPath::kNaive);
    for (std::size_t i = 0; i < a.numel(); ++i) {
      const double d = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
      rep.max_abs_diff = std::max(rep.max_abs_diff, d);
      const double denom = std::max(std::abs(static_cast<double>(a[i])), 1e-30);
      rep.max_rel_diff = std::max(rep.max_rel_diff, d / denom);
    }
  }
  rep.passed = rep.max_abs_diff <= tol;
  return rep;
}

}  // namespace repsf
