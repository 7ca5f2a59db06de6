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

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "repsf/conv.hpp"
#include "repsf/error.hpp"
#include "repsf/ops.hpp"
#include "repsf/params.hpp"
#include "repsf/reparam.hpp"
#include "repsf/rng.hpp"

namespace repsf {

/// Hierarchy of the large-kernel backbone: a 4x4 stride-4 stem followed by
/// four stages of RepLK units.
struct BackboneConfig {
  int stem_out_ch = 64;
  std::array<int, 4> stage_channels{256, 256, 384, 512};
  std::array<int, 4> stage_depths{2, 2, 2, 2};
  std::array<int, 4> stage_kernels{13, 11, 9, 7};
  int small_kernel = 3;  // 0 disables the small branch
  std::array<bool, 4> downsample{false, true, true, true};
  int expansion = 2;
  bool identity_branch = true;

  static constexpr int kMinKernel = 7;
  static constexpr int kMaxKernel = 13;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError(field + ": " + why);
    };
    if (stem_out_ch <= 0) fail("stem_out_ch", "must be positive");
    if (expansion <= 0) fail("expansion", "must be positive");
    int downsamples = 0;
    for (int i = 0; i < 4; ++i) {
      const std::string idx = "[" + std::to_string(i) + "]";
      if (stage_channels[i] <= 0) fail("stage_channels" + idx, "must be positive");
      if (i > 0 && stage_channels[i] < stage_channels[i - 1])
        fail("stage_channels" + idx, "channels must be non-decreasing");
      if (stage_depths[i] <= 0) fail("stage_depths" + idx, "must be positive");
      const int k = stage_kernels[i];
      if (k < kMinKernel || k > kMaxKernel)
        fail("stage_kernels" + idx, std::to_string(k) + " outside [7, 13]");
      if (k % 2 == 0) fail("stage_kernels" + idx, std::to_string(k) + " is even");
      if (small_kernel > k) fail("small_kernel", "larger than stage_kernels" + idx);
      downsamples += downsample[i] ? 1 : 0;
    }
    if (downsample[0]) fail("downsample[0]", "stage 1 keeps the stem resolution");
    if (downsamples != 3) fail("downsample", "exactly three stages must downsample");
    if (small_kernel < 0 || (small_kernel > 0 && small_kernel % 2 == 0))
      fail("small_kernel", "must be 0 or a positive odd size");
  }

  int total_stride() const {
    int s = 4;
    for (bool d : downsample) s *= d ? 2 : 1;
    return s;
  }
};

/// expand (1x1 + BN) -> ReLU -> large-kernel depthwise rep block -> ReLU ->
/// project (1x1 + BN), added to the unit input.
template <typename T>
struct RepLKUnit {
  ConvBn<T> expand;
  RepBlockSpec<T> mixer;
  ConvBn<T> project;
};

template <typename T>
struct BackboneStage {
  std::optional<ConvBn<T>> transition;
  std::vector<RepLKUnit<T>> units;
};

template <typename T>
struct BackboneSpec {
  BackboneConfig cfg;
  ConvBn<T> stem;
  std::array<BackboneStage<T>, 4> stages;
};

/// Allocates a backbone with zero weights.
template <typename T>
BackboneSpec<T> backbone_skeleton(const BackboneConfig& cfg) {
  cfg.validate();
  BackboneSpec<T> s;
  s.cfg = cfg;
  s.stem = make_conv_bn<T>(3, cfg.stem_out_ch, 1, 4, 4, 0);
  int prev = cfg.stem_out_ch;
  for (int i = 0; i < 4; ++i) {
    const int ch = cfg.stage_channels[i];
    BackboneStage<T>& st = s.stages[i];
    if (cfg.downsample[i])
      st.transition = make_conv_bn<T>(prev, ch, 1, 3, 2, 1);
    else if (prev != ch)
      st.transition = make_conv_bn<T>(prev, ch, 1, 1, 1, 0);
    const int hidden = ch * cfg.expansion;
    const int K = cfg.stage_kernels[i];
    for (int d = 0; d < cfg.stage_depths[i]; ++d) {
      RepLKUnit<T> u;
      u.expand = make_conv_bn<T>(ch, hidden, 1, 1, 1, 0);
      u.mixer.large = make_conv_bn<T>(hidden, hidden, hidden, K, 1, K / 2);
      if (cfg.small_kernel > 0)
        u.mixer.small =
            make_conv_bn<T>(hidden, hidden, hidden, cfg.small_kernel, 1, cfg.small_kernel / 2);
      if (cfg.identity_branch) u.mixer.identity = make_bn<T>(hidden);
      u.project = make_conv_bn<T>(hidden, ch, 1, 1, 1, 0);
      st.units.push_back(std::move(u));
    }
    prev = ch;
  }
  return s;
}

template <typename T>
void visit_params(const std::string& prefix, BackboneSpec<T>& s, const ParamVisitor<T>& v) {
  visit_params(prefix + ".stem", s.stem, v);
  for (int i = 0; i < 4; ++i) {
    const std::string sp = prefix + ".stages." + std::to_string(i);
    if (s.stages[i].transition) visit_params(sp + ".transition", *s.stages[i].transition, v);
    for (std::size_t d = 0; d < s.stages[i].units.size(); ++d) {
      const std::string up = sp + ".units." + std::to_string(d);
      RepLKUnit<T>& u = s.stages[i].units[d];
      visit_params(up + ".expand", u.expand, v);
      visit_params(up + ".mixer", u.mixer, v);
      visit_params(up + ".project", u.project, v);
    }
  }
}

/// Builds and initializes a backbone from the seeded SplitMix64 stream in
/// parameter-visit order.
template <typename T>
BackboneSpec<T> build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  BackboneSpec<T> s = backbone_skeleton<T>(cfg);
  SplitMix64 rng(seed);
  visit_params<T>("backbone", s, uniform_initializer<T>(rng));
  return s;
}

/// Populates the merged kernel of every rep block, keeping the branches.
template <typename T>
void merge_backbone(BackboneSpec<T>& s) {
  for (auto& st : s.stages)
    for (auto& u : st.units) merge_rep_block(u.mixer);
}

/// Deployable form: every BN folded, every rep block reduced to its merged
/// kernel.
template <typename T>
BackboneSpec<T> backbone_inference_form(const BackboneSpec<T>& s) {
  BackboneSpec<T> out;
  out.cfg = s.cfg;
  out.stem = fold_unit(s.stem);
  for (int i = 0; i < 4; ++i) {
    if (s.stages[i].transition) out.stages[i].transition = fold_unit(*s.stages[i].transition);
    for (const auto& u : s.stages[i].units)
      out.stages[i].units.push_back({fold_unit(u.expand), fold_block(u.mixer), fold_unit(u.project)});
  }
  return out;
}

/// Returns the four stage outputs (strides 4, 8, 16, 32 by default).
template <typename T>
std::vector<Tensor4<T>> backbone_forward(const BackboneSpec<T>& s, const Tensor4<T>& x,
                                         bool merged, ConvPath path = ConvPath::kGemm) {
  const int stride = s.cfg.total_stride();
  if (x.c() != 3) throw ShapeError("backbone input must have 3 channels, got " + std::to_string(x.c()));
  if (x.h() == 0 || x.w() == 0 || x.h() % stride != 0 || x.w() % stride != 0)
    throw GeometryError("backbone input " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                        " is not divisible by " + std::to_string(stride));
  Tensor4<T> h = relu(forward(s.stem, x, path));
  std::vector<Tensor4<T>> features;
  for (const auto& st : s.stages) {
    if (st.transition) h = relu(forward(*st.transition, h, path));
    for (const auto& u : st.units) {
      Tensor4<T> y = relu(forward(u.expand, h, path));
      y = relu(rep_block_forward(u.mixer, y, merged, path));
      y = forward(u.project, y, path);
      h = add(h, y);
    }
    features.push_back(h);
  }
  return features;
}

template <typename T>
std::int64_t count_params(const BackboneSpec<T>& s, bool merged = false) {
  std::int64_t n = unit_params(s.stem, merged);
  for (const auto& st : s.stages) {
    if (st.transition) n += unit_params(*st.transition, merged);
    for (const auto& u : st.units)
      n += unit_params(u.expand, merged) + block_params(u.mixer, merged) +
           unit_params(u.project, merged);
  }
  return n;
}

/// Multiply-accumulates of one forward pass at input size h x w.
template <typename T>
std::int64_t count_macs(const BackboneSpec<T>& s, int h, int w, bool merged) {
  const int stride = s.cfg.total_stride();
  if (h <= 0 || w <= 0 || h % stride != 0 || w % stride != 0)
    throw GeometryError("MAC count needs sizes divisible by " + std::to_string(stride));
  Hw cur = output_shape(s.stem.conv, h, w);
  std::int64_t n = conv_macs(s.stem.conv, cur);
  for (const auto& st : s.stages) {
    if (st.transition) {
      cur = output_shape(st.transition->conv, cur.h, cur.w);
      n += conv_macs(st.transition->conv, cur);
    }
    for (const auto& u : st.units)
      n += conv_macs(u.expand.conv, cur) + block_macs(u.mixer, cur, merged) +
           conv_macs(u.project.conv, cur);
  }
  return n;
}

}  // namespace repsf
