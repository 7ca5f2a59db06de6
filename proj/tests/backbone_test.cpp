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


#include <gtest/gtest.h>

#include <array>
#include <cstdint>

#include "repsf/backbone.hpp"

namespace repsf {
namespace {

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.stem_out_ch = 8;
  cfg.stage_channels = {8, 8, 8, 8};
  cfg.stage_depths = {1, 1, 1, 1};
  cfg.stage_kernels = {7, 7, 7, 7};
  return cfg;
}

BackboneConfig random_config(SplitMix64& rng) {
  BackboneConfig cfg;
  cfg.stem_out_ch = static_cast<int>(rng.range(2, 8));
  int ch = static_cast<int>(rng.range(2, 6));
  for (int i = 0; i < 4; ++i) {
    ch += static_cast<int>(rng.range(0, 3));
    cfg.stage_channels[i] = ch;
    cfg.stage_depths[i] = static_cast<int>(rng.range(1, 2));
    cfg.stage_kernels[i] = 7 + 2 * static_cast<int>(rng.range(0, 3));
  }
  const int smalls[] = {0, 3, 5};
  cfg.small_kernel = smalls[rng.range(0, 2)];
  cfg.expansion = static_cast<int>(rng.range(1, 2));
  cfg.identity_branch = rng.range(0, 1) == 1;
  return cfg;
}

// Independent MAC count from the configuration alone.
std::int64_t macs_oracle(const BackboneConfig& c, std::int64_t h, std::int64_t w, bool merged) {
  h /= 4;
  w /= 4;
  std::int64_t n = h * w * c.stem_out_ch * 3 * 16;
  int prev = c.stem_out_ch;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t ch = c.stage_channels[i];
    if (c.downsample[i]) {
      h /= 2;
      w /= 2;
      n += h * w * ch * prev * 9;
    } else if (prev != ch) {
      n += h * w * ch * prev;
    }
    const std::int64_t hid = ch * c.expansion;
    const std::int64_t k = c.stage_kernels[i];
    std::int64_t per_unit = 2 * h * w * hid * ch + h * w * hid * k * k;
    if (!merged && c.small_kernel > 0) per_unit += h * w * hid * c.small_kernel * c.small_kernel;
    n += c.stage_depths[i] * per_unit;
    prev = static_cast<int>(ch);
  }
  return n;
}

TEST(BackboneConfigTest, DefaultsValidate) {
  BackboneConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.total_stride(), 32);
  EXPECT_EQ(cfg.stage_channels, (std::array<int, 4>{256, 256, 384, 512}));
  EXPECT_EQ(cfg.stage_kernels, (std::array<int, 4>{13, 11, 9, 7}));
}

TEST(BackboneConfigTest, KernelBoundaryAccepted) {
  BackboneConfig cfg;
  cfg.stage_kernels = {7, 7, 7, 7};
  EXPECT_NO_THROW(cfg.validate());
  cfg.stage_kernels = {13, 13, 13, 13};
  EXPECT_NO_THROW(cfg.validate());
}

TEST(BackboneConfigTest, RejectionsNameTheField) {
  auto expect_field = [](BackboneConfig cfg, const std::string& field) {
    try {
      build_backbone<float>(cfg, 1);
      FAIL() << "accepted config, expected error on " << field;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  BackboneConfig c;
  c.stage_kernels = {15, 11, 9, 7};
  expect_field(c, "stage_kernels[0]");
  c = {};
  c.stage_kernels = {13, 5, 9, 7};
  expect_field(c, "stage_kernels[1]");
  c = {};
  c.stage_kernels = {13, 11, 10, 7};
  expect_field(c, "stage_kernels[2]");
  c = {};
  c.stage_channels = {256, 512, 384, 512};
  expect_field(c, "stage_channels[2]");
  c = {};
  c.downsample = {false, true, true, false};
  expect_field(c, "downsample");
  c = {};
  c.downsample = {true, true, true, false};
  expect_field(c, "downsample[0]");
  c = {};
  c.stage_depths = {2, 0, 2, 2};
  expect_field(c, "stage_depths[1]");
  c = {};
  c.small_kernel = 4;
  expect_field(c, "small_kernel");
}

TEST(BackboneForwardTest, DefaultStridesAndChannels) {
  const auto spec = build_backbone<float>(BackboneConfig{}, 7);
  SplitMix64 rng(3);
  const auto x = random_tensor<float>({1, 3, 64, 96}, rng);
  const auto f = backbone_forward(spec, x, false);
  ASSERT_EQ(f.size(), 4u);
  const std::size_t strides[] = {4, 8, 16, 32};
  const std::size_t channels[] = {256, 256, 384, 512};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(f[i].shape(), (Shape4{1, channels[i], 64 / strides[i], 96 / strides[i]}));
    EXPECT_TRUE(f[i].all_finite());
  }
}

TEST(BackboneForwardTest, MinimalDivisibleSize) {
  const auto spec = build_backbone<float>(BackboneConfig{}, 7);
  const Tensor4<float> x({1, 3, 32, 32}, 0.5f);
  const auto f = backbone_forward(spec, x, false);
  EXPECT_EQ(f[3].shape(), (Shape4{1, 512, 1, 1}));
}

TEST(BackboneForwardTest, StrideArithmeticProperty) {
  const auto spec = build_backbone<float>(tiny_config(), 2);
  const std::size_t sizes[][2] = {{32, 32}, {64, 32}, {32, 96}, {160, 64}, {96, 128}};
  for (const auto& hw : sizes) {
    const Tensor4<float> x({1, 3, hw[0], hw[1]}, 0.1f);
    const auto f = backbone_forward(spec, x, false);
    const std::size_t strides[] = {4, 8, 16, 32};
    for (int i = 0; i < 4; ++i) {
      EXPECT_EQ(f[i].h(), hw[0] / strides[i]);
      EXPECT_EQ(f[i].w(), hw[1] / strides[i]);
    }
  }
}

TEST(BackboneForwardTest, InputErrors) {
  auto spec = build_backbone<float>(tiny_config(), 2);
  EXPECT_THROW(backbone_forward(spec, Tensor4<float>({1, 3, 48, 32}), false), GeometryError);
  EXPECT_THROW(backbone_forward(spec, Tensor4<float>({1, 3, 32, 40}), false), GeometryError);
  EXPECT_THROW(backbone_forward(spec, Tensor4<float>({1, 1, 32, 32}), false), ShapeError);
  EXPECT_THROW(backbone_forward(spec, Tensor4<float>({1, 3, 32, 32}), true), StateError);
  merge_backbone(spec);
  EXPECT_NO_THROW(backbone_forward(spec, Tensor4<float>({1, 3, 32, 32}), true));
}

TEST(BackboneForwardTest, TinyMergedMatchesBranch) {
  auto spec = build_backbone<float>(tiny_config(), 5);
  merge_backbone(spec);
  SplitMix64 rng(9);
  const auto x = random_tensor<float>({1, 3, 64, 64}, rng);
  const auto a = backbone_forward(spec, x, false);
  const auto b = backbone_forward(spec, x, true);
  for (int i = 0; i < 4; ++i) EXPECT_LE(max_abs_diff(a[i], b[i]), 1e-4);
  const auto inference = backbone_inference_form(spec);
  const auto c = backbone_forward(inference, x, true);
  for (int i = 0; i < 4; ++i) EXPECT_LE(max_abs_diff(a[i], c[i]), 1e-4);
  EXPECT_THROW(backbone_forward(inference, x, false), StateError);
}

// Property: merged and branch agree for random configurations.
TEST(BackboneForwardTest, RandomConfigsMergedMatchesBranch) {
  SplitMix64 rng(21);
  for (int trial = 0; trial < 12; ++trial) {
    const BackboneConfig cfg = random_config(rng);
    auto spec = build_backbone<float>(cfg, rng.next());
    merge_backbone(spec);
    const auto x = random_tensor<float>({1, 3, static_cast<std::size_t>(32 * rng.range(1, 2)), static_cast<std::size_t>(32 * rng.range(1, 2))}, rng);
    const auto a = backbone_forward(spec, x, false);
    const auto b = backbone_forward(spec, x, true);
    for (int i = 0; i < 4; ++i) ASSERT_LE(max_abs_diff(a[i], b[i]), 1e-4) << "trial " << trial;
  }
}

TEST(BackboneBuildTest, ReproducibleFromSeed) {
  auto a = build_backbone<float>(tiny_config(), 42);
  auto b = build_backbone<float>(tiny_config(), 42);
  auto c = build_backbone<float>(tiny_config(), 43);
  std::vector<float> va, vb, vc;
  auto collect = [](std::vector<float>& out) {
    return [&out](const ParamRef<float>& p) { out.insert(out.end(), p.data.begin(), p.data.end()); };
  };
  visit_params<float>("backbone", a, collect(va));
  visit_params<float>("backbone", b, collect(vb));
  visit_params<float>("backbone", c, collect(vc));
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vc);
}

TEST(BackboneBuildTest, InitializationRanges) {
  auto spec = build_backbone<double>(tiny_config(), 8);
  int weights = 0;
  visit_params<double>("backbone", spec, [&](const ParamRef<double>& p) {
    for (double v : p.data) {
      switch (p.kind) {
        case ParamKind::kWeight:
        case ParamKind::kBias: {
          const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
          ASSERT_LE(std::abs(v), bound) << p.name;
          ++weights;
          break;
        }
        case ParamKind::kBnGamma:
        case ParamKind::kBnVar:
          ASSERT_GE(v, 0.5) << p.name;
          ASSERT_LE(v, 1.5) << p.name;
          break;
        case ParamKind::kBnBeta:
        case ParamKind::kBnMean:
          ASSERT_LE(std::abs(v), 0.1) << p.name;
          break;
      }
    }
  });
  EXPECT_GT(weights, 0);
}

TEST(BackboneCountTest, SingleConvArithmetic) {
  const auto c = make_conv<float>(1, 1, 1, 3, 1, 1, 1, true);
  EXPECT_EQ(conv_params(c), 10);
  EXPECT_EQ(conv_macs(c, output_shape(c, 4, 4)), 144);
}

TEST(BackboneCountTest, MacsMatchOracle) {
  SplitMix64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const BackboneConfig cfg = trial == 0 ? BackboneConfig{} : random_config(rng);
    const auto spec = backbone_skeleton<float>(cfg);
    const int h = 32 * static_cast<int>(rng.range(1, 20)), w = 32 * static_cast<int>(rng.range(1, 20));
    for (bool merged : {false, true})
      EXPECT_EQ(count_macs(spec, h, w, merged), macs_oracle(cfg, h, w, merged)) << trial;
  }
  const auto spec = backbone_skeleton<float>(tiny_config());
  EXPECT_THROW(count_macs(spec, 33, 32, false), GeometryError);
}

TEST(BackboneCountTest, ParamsMatchStorage) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const BackboneConfig cfg = random_config(rng);
    auto spec = build_backbone<double>(cfg, 1);
    std::int64_t stored = 0;
    visit_params<double>("backbone", spec, [&](const ParamRef<double>& p) {
      if (p.kind != ParamKind::kBnMean && p.kind != ParamKind::kBnVar)
        stored += static_cast<std::int64_t>(p.data.size());
    });
    EXPECT_EQ(count_params(spec, false), stored);

    const auto inference = backbone_inference_form(spec);
    std::int64_t folded = 0;
    auto copy = inference;
    visit_params<double>("backbone", copy, [&](const ParamRef<double>& p) {
      folded += static_cast<std::int64_t>(p.data.size());
    });
    EXPECT_EQ(count_params(spec, true), folded);
    EXPECT_EQ(count_params(inference, true), folded);
  }
}

TEST(BackboneCountTest, MergedNeverCostsMore) {
  SplitMix64 rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const BackboneConfig cfg = random_config(rng);
    const auto spec = backbone_skeleton<float>(cfg);
    EXPECT_LE(count_macs(spec, 64, 64, true), count_macs(spec, 64, 64, false));
    if (cfg.small_kernel > 0) {
      EXPECT_LT(count_params(spec, true), count_params(spec, false));
      EXPECT_LT(count_macs(spec, 64, 64, true), count_macs(spec, 64, 64, false));
    }
  }
}

}  // namespace
}  // namespace repsf
