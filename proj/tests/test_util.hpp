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

#include <optional>
#include <vector>

#include "repsf/conv.hpp"
#include "repsf/reparam.hpp"
#include "repsf/rng.hpp"

namespace repsf::testing {

template <typename T>
ConvSpec<T> random_conv(SplitMix64& rng, int in_ch, int out_ch, int groups, Hw k, Hw s, Hw d,
                        Hw p, bool bias) {
  ConvSpec<T> c;
  c.in_ch = in_ch;
  c.out_ch = out_ch;
  c.groups = groups;
  c.kernel = k;
  c.stride = s;
  c.dilation = d;
  c.padding = p;
  c.weights = random_tensor<T>(c.weight_shape(), rng);
  if (bias) {
    std::vector<T> b(out_ch);
    for (auto& v : b) v = static_cast<T>(rng.uniform(-1, 1));
    c.bias = b;
  }
  return c;
}

template <typename T>
BatchNormSpec<T> random_bn(SplitMix64& rng, int channels) {
  BatchNormSpec<T> bn;
  for (int c = 0; c < channels; ++c) {
    bn.gamma.push_back(static_cast<T>(rng.uniform(0.5, 1.5)));
    bn.beta.push_back(static_cast<T>(rng.uniform(-0.5, 0.5)));
    bn.running_mean.push_back(static_cast<T>(rng.uniform(-0.5, 0.5)));
    bn.running_var.push_back(static_cast<T>(rng.uniform(0.5, 2.0)));
  }
  bn.eps = T(1e-5);
  return bn;
}

template <typename T>
ConvBn<T> random_same_conv_bn(SplitMix64& rng, int in_ch, int out_ch, int groups, int k, int stride,
                              int dilation = 1) {
  const int p = dilation * (k - 1) / 2;
  return {random_conv<T>(rng, in_ch, out_ch, groups, {k, k}, {stride, stride},
                         {dilation, dilation}, {p, p}, false),
          random_bn<T>(rng, out_ch)};
}

struct BlockShape {
  int channels;
  int groups;
  int large_k;
  int small_k;  // 0 = no small branch
  int stride;
  bool identity;
};

template <typename T>
RepBlockSpec<T> random_rep_block(SplitMix64& rng, const BlockShape& s) {
  RepBlockSpec<T> b;
  b.large = random_same_conv_bn<T>(rng, s.channels, s.channels, s.groups, s.large_k, s.stride);
  if (s.small_k > 0)
    b.small = random_same_conv_bn<T>(rng, s.channels, s.channels, s.groups, s.small_k, s.stride);
  if (s.identity) b.identity = random_bn<T>(rng, s.channels);
  return b;
}

}  // namespace repsf::testing
