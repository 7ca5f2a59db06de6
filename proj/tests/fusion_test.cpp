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

#include <cmath>
#include <cstdlib>
#include <vector>

#include "oracles.hpp"
#include "repsf/fusion.hpp"

namespace repsf {
namespace {

using testing::conv_loop_oracle;

// Independent reference pieces, written against the definitions rather than
// the library helpers.

template <typename T>
std::vector<double> plane_of(const Tensor4<T>& x, std::size_t c) {
  std::vector<double> p;
  for (std::size_t i = 0; i < x.h(); ++i)
    for (std::size_t j = 0; j < x.w(); ++j) p.push_back(static_cast<double>(x(0, c, i, j)));
  return p;
}

// Bin i of n over length L covers [floor(i L / n), ceil((i + 1) L / n)).
std::vector<double> adaptive_pool_oracle(const std::vector<double>& p, std::size_t H,
                                         std::size_t W, std::size_t s) {
  std::vector<double> out(s * s);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      const auto y0 = static_cast<std::size_t>(std::floor(double(i * H) / s));
      const auto y1 = static_cast<std::size_t>(std::ceil(double((i + 1) * H) / s));
      const auto x0 = static_cast<std::size_t>(std::floor(double(j * W) / s));
      const auto x1 = static_cast<std::size_t>(std::ceil(double((j + 1) * W) / s));
      double sum = 0;
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) sum += p[y * W + x];
      out[i * s + j] = sum / static_cast<double>((y1 - y0) * (x1 - x0));
    }
  return out;
}

// Bilinear resize, half-pixel centers, weights form.
std::vector<double> bilinear_oracle(const std::vector<double>& p, std::size_t h, std::size_t w,
                                    std::size_t H, std::size_t W) {
  std::vector<double> out(H * W);
  auto coord = [](std::size_t o, std::size_t in, std::size_t outn, std::size_t& i0,
                  std::size_t& i1, double& f) {
    double src = (o + 0.5) * double(in) / double(outn) - 0.5;
    if (src < 0) src = 0;
    i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    i1 = i0 + 1 < in ? i0 + 1 : in - 1;
    f = src - double(i0);
  };
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      std::size_t a0, a1, b0, b1;
      double fy, fx;
      coord(y, h, H, a0, a1, fy);
      coord(x, w, W, b0, b1, fx);
      out[y * W + x] = (1 - fy) * (1 - fx) * p[a0 * w + b0] + (1 - fy) * fx * p[a0 * w + b1] +
                       fy * (1 - fx) * p[a1 * w + b0] + fy * fx * p[a1 * w + b1];
    }
  return out;
}

template <typename T>
Tensor4<T> bn_relu_oracle(Tensor4<T> y, const std::optional<BatchNormSpec<T>>& bn) {
  for (std::size_t c = 0; c < y.c(); ++c)
    for (std::size_t i = 0; i < y.h(); ++i)
      for (std::size_t j = 0; j < y.w(); ++j) {
        double v = y(0, c, i, j);
        if (bn)
          v = (v - bn->running_mean[c]) / std::sqrt(double(bn->running_var[c]) + bn->eps) *
                  bn->gamma[c] +
              bn->beta[c];
        y(0, c, i, j) = static_cast<T>(v > 0 ? v : 0);
      }
  return y;
}

template <typename T>
Tensor4<T> unit_oracle(const ConvBn<T>& u, const Tensor4<T>& x) {
  return bn_relu_oracle(conv_loop_oracle(x, u.conv), u.bn);
}

// Channel-wise stacking by index.
template <typename T>
Tensor4<T> stack_oracle(const std::vector<Tensor4<T>>& parts) {
  std::size_t total = 0;
  for (const auto& p : parts) total += p.c();
  Tensor4<T> out(Shape4{1, total, parts[0].h(), parts[0].w()});
  std::size_t base = 0;
  for (const auto& p : parts) {
    for (std::size_t c = 0; c < p.c(); ++c)
      for (std::size_t i = 0; i < p.h(); ++i)
        for (std::size_t j = 0; j < p.w(); ++j) out(0, base + c, i, j) = p(0, c, i, j);
    base += p.c();
  }
  return out;
}

Tensor4<double> aspp_oracle(const Tensor4<double>& f, const AsppSpec<double>& a) {
  std::vector<Tensor4<double>> branches;
  branches.push_back(unit_oracle(a.pointwise, f));
  for (const auto& d : a.dilated) branches.push_back(unit_oracle(d, f));
  Tensor4<double> mean(Shape4{1, f.c(), 1, 1});
  for (std::size_t c = 0; c < f.c(); ++c) {
    double s = 0;
    for (double v : plane_of(f, c)) s += v;
    mean(0, c, 0, 0) = s / double(f.h() * f.w());
  }
  const auto pooled = unit_oracle(a.pooled, mean);
  Tensor4<double> wide(Shape4{1, pooled.c(), f.h(), f.w()});
  for (std::size_t c = 0; c < pooled.c(); ++c)
    for (std::size_t i = 0; i < f.h(); ++i)
      for (std::size_t j = 0; j < f.w(); ++j) wide(0, c, i, j) = pooled(0, c, 0, 0);
  branches.push_back(wide);
  return unit_oracle(a.project, stack_oracle(branches));
}

TEST(ReceptiveFieldTest, Examples) {
  EXPECT_EQ(effective_receptive_field(3, 6), 13);
  EXPECT_EQ(effective_receptive_field(3, 24), 49);
  for (int k = 1; k <= 13; ++k) EXPECT_EQ(effective_receptive_field(k, 1), k);
  static_assert(effective_receptive_field(3, 12) == 25);
}

TEST(ReceptiveFieldTest, StrictlyIncreasingInRate) {
  for (int k = 2; k <= 15; ++k)
    for (int r = 1; r < 40; ++r)
      EXPECT_LT(effective_receptive_field(k, r), effective_receptive_field(k, r + 1));
}

TEST(AsppTest, OutputShapeAtStride32) {
  const auto a = build_aspp<float>(512, AsppConfig{}, 3);
  EXPECT_EQ(a.branch_count(), 6u);
  SplitMix64 rng(1);
  const auto f = random_tensor<float>({1, 512, 20, 15}, rng);
  const auto y = aspp_forward(f, a);
  EXPECT_EQ(y.shape(), (Shape4{1, 128, 20, 15}));
}

TEST(AsppTest, ThreeRateVariant) {
  AsppConfig cfg;
  cfg.rates = {6, 12, 18};
  const auto a = build_aspp<float>(16, cfg, 3);
  EXPECT_EQ(a.branch_count(), 5u);
  EXPECT_EQ(a.project.conv.in_ch, 5 * 128);
}

TEST(AsppTest, ConstantInputGivesConstantOutput) {
  // Every rate exceeds the 5x5 extent, so only centre taps see data.
  AsppConfig cfg;
  cfg.branch_channels = 8;
  cfg.out_channels = 6;
  const auto a = build_aspp<double>(4, cfg, 9);
  Tensor4<double> f(Shape4{1, 4, 5, 5});
  for (std::size_t c = 0; c < 4; ++c)
    for (auto& v : f.plane(0, c)) v = 0.25 * static_cast<double>(c) - 0.4;
  const auto y = aspp_forward(f, a);
  for (std::size_t c = 0; c < y.c(); ++c)
    for (double v : y.plane(0, c)) EXPECT_EQ(v, y(0, c, 0, 0));
}

TEST(AsppTest, MatchesManualBranchComposition) {
  SplitMix64 rng(17);
  for (int trial = 0; trial < 4; ++trial) {
    AsppConfig cfg;
    cfg.rates = trial % 2 ? std::vector<int>{1, 2, 3} : std::vector<int>{6, 12, 18, 24};
    cfg.branch_channels = 5;
    cfg.out_channels = 7;
    const int in = static_cast<int>(rng.range(1, 6));
    const auto a = build_aspp<double>(in, cfg, rng.next());
    const auto f = random_tensor<double>(
        {1, static_cast<std::size_t>(in), static_cast<std::size_t>(rng.range(3, 12)), static_cast<std::size_t>(rng.range(3, 12))}, rng);
    EXPECT_LE(max_abs_diff(aspp_forward(f, a), aspp_oracle(f, a)), 1e-12);
    EXPECT_LE(max_abs_diff(aspp_forward(f, a, ConvPath::kNaive), aspp_oracle(f, a)), 1e-12);
  }
}

TEST(AsppTest, ChannelMismatch) {
  const auto a = build_aspp<float>(8, AsppConfig{}, 1);
  EXPECT_THROW(aspp_forward(Tensor4<float>(Shape4{1, 7, 4, 4}), a), ShapeError);
}

TEST(CanTest, HiddenAttentionWidth) {
  const auto c = build_can<float>(512, CanConfig{}, 1);
  EXPECT_EQ(c.reduce.out_ch, 32);
  EXPECT_EQ(c.restore.in_ch, 32);
  EXPECT_EQ(c.restore.out_ch, 512);
  EXPECT_EQ(c.scale_weights.size(), 4u);
}

TEST(CanTest, DivisibilityViolation) {
  EXPECT_THROW(build_can<float>(100, CanConfig{}, 1), ConfigError);
  const auto c = build_can<float>(32, CanConfig{}, 1);
  EXPECT_THROW(can_forward(Tensor4<float>(Shape4{1, 20, 6, 6}), c), ConfigError);
}

TEST(CanTest, ConstantInputHasZeroContrast) {
  const auto c = build_can<double>(16, CanConfig{}, 4);
  const std::size_t sizes[][2] = {{6, 6}, {7, 5}, {20, 15}, {1, 1}, {3, 11}};
  for (const auto& hw : sizes) {
    Tensor4<double> f(Shape4{1, 16, hw[0], hw[1]});
    for (std::size_t ch = 0; ch < 16; ++ch)
      for (auto& v : f.plane(0, ch)) v = std::sin(0.7 * static_cast<double>(ch)) * 3.1;
    for (const auto& con : can_contrast_features(f, c))
      for (double v : con.data()) ASSERT_EQ(v, 0.0);
  }
}

TEST(CanTest, ScaleWeightsSumToOne) {
  SplitMix64 rng(8);
  const auto c = build_can<double>(32, CanConfig{}, 5);
  const auto f = random_tensor<double>({1, 32, 9, 13}, rng, -3, 3);
  const auto w = can_scale_weights(f, c);
  ASSERT_EQ(w.size(), 4u);
  for (std::size_t i = 0; i < 9 * 13; ++i) {
    double s = 0;
    for (const auto& ws : w) {
      ASSERT_GT(ws[i], 0.0);
      s += ws[i];
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(CanTest, OutputShapeEqualsInput) {
  SplitMix64 rng(2);
  const auto c = build_can<float>(64, CanConfig{}, 5);
  const auto f = random_tensor<float>({1, 64, 20, 15}, rng);
  EXPECT_EQ(can_forward(f, c).shape(), f.shape());
}

template <typename T>
void saturated_gate_case(double tol) {
  auto c = build_can<T>(16, CanConfig{}, 6);
  for (auto& sw : c.scale_weights) {
    sw.weights = Tensor4<T>(sw.weights.shape());
    sw.bias = std::vector<T>(1, T(0.3));
  }
  c.restore.bias = std::vector<T>(16, T(60));
  SplitMix64 rng(12);
  const std::size_t H = 14, W = 10;
  const auto f = random_tensor<T>({1, 16, H, W}, rng, -2, 2);
  const auto y = can_forward(f, c);
  double worst = 0;
  for (std::size_t ch = 0; ch < 16; ++ch) {
    const auto p = plane_of(f, ch);
    std::vector<double> avg(H * W, 0.0);
    for (int s : c.scales) {
      const auto pooled = adaptive_pool_oracle(p, H, W, s);
      const auto up = bilinear_oracle(pooled, s, s, H, W);
      for (std::size_t i = 0; i < H * W; ++i) avg[i] += up[i] / double(c.scales.size());
    }
    for (std::size_t i = 0; i < H * W; ++i)
      worst = std::max(worst, std::abs(avg[i] - double(y(0, ch, i / W, i % W))));
  }
  EXPECT_LE(worst, tol);
}

TEST(CanTest, SaturatedGateMatchesUniformMultiScaleAverage) {
  saturated_gate_case<double>(1e-12);
  saturated_gate_case<float>(1e-6);
}

Tensor4<double> head_oracle(const Tensor4<double>& f4, const Tensor4<double>& a,
                            const Tensor4<double>& c, const DensityHeadSpec<double>& h) {
  const auto cat = stack_oracle<double>({f4, a, c});
  const auto hidden = bn_relu_oracle<double>(conv_loop_oracle(cat, h.fuse), std::nullopt);
  return bn_relu_oracle<double>(conv_loop_oracle(hidden, h.out), std::nullopt);
}

TEST(HeadTest, ShapeAndNonNegativity) {
  SplitMix64 rng(31);
  const auto h = build_head<float>(512 + 128 + 640, HeadConfig{}, 2);
  const auto f4 = random_tensor<float>({1, 512, 20, 15}, rng);
  const auto a = random_tensor<float>({1, 128, 20, 15}, rng);
  const auto c = random_tensor<float>({1, 640, 20, 15}, rng);
  const auto d = fusion_head(f4, a, c, h);
  EXPECT_EQ(d.shape(), (Shape4{1, 1, 20, 15}));
  for (float v : d.data()) EXPECT_GE(v, 0.0f);
}

TEST(HeadTest, ZeroInputsZeroBiases) {
  auto h = build_head<double>(12, HeadConfig{}, 2);
  h.fuse.bias = std::vector<double>(h.fuse.out_ch, 0.0);
  h.out.bias = std::vector<double>(1, 0.0);
  const Tensor4<double> z4(Shape4{1, 4, 5, 3}), z8(Shape4{1, 8, 5, 3}), z0(Shape4{1, 0, 5, 3});
  const auto d = fusion_head(z4, z8, z0, h);
  EXPECT_EQ(total_sum(d), 0.0);
  for (double v : d.data()) EXPECT_EQ(v, 0.0);
}

TEST(HeadTest, MatchesConcatConvOracle) {
  SplitMix64 rng(41);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t c1 = rng.range(1, 6), c2 = rng.range(1, 6), c3 = rng.range(1, 6);
    const std::size_t H = rng.range(1, 9), W = rng.range(1, 9);
    HeadConfig cfg;
    cfg.hidden = static_cast<int>(rng.range(1, 9));
    const auto h = build_head<double>(static_cast<int>(c1 + c2 + c3), cfg, rng.next());
    const auto f4 = random_tensor<double>({1, c1, H, W}, rng);
    const auto a = random_tensor<double>({1, c2, H, W}, rng);
    const auto c = random_tensor<double>({1, c3, H, W}, rng);
    EXPECT_LE(max_abs_diff(fusion_head(f4, a, c, h), head_oracle(f4, a, c, h)), 1e-12);
  }
}

TEST(HeadTest, SpatialMismatch) {
  const auto h = build_head<float>(3, HeadConfig{}, 2);
  EXPECT_THROW(fusion_head(Tensor4<float>(Shape4{1, 1, 4, 4}), Tensor4<float>(Shape4{1, 1, 4, 4}),
                           Tensor4<float>(Shape4{1, 1, 4, 5}), h),
               ShapeError);
}

ModelConfig small_model_config() {
  ModelConfig cfg;
  cfg.backbone.stem_out_ch = 8;
  cfg.backbone.stage_channels = {8, 8, 12, 16};
  cfg.backbone.stage_depths = {1, 1, 1, 1};
  cfg.backbone.stage_kernels = {13, 11, 9, 7};
  cfg.aspp.branch_channels = 8;
  cfg.aspp.out_channels = 8;
  cfg.can.reduction = 4;
  cfg.head.hidden = 8;
  return cfg;
}

TEST(ModelTest, ConfigRejectsBadReduction) {
  ModelConfig cfg = small_model_config();
  cfg.can.reduction = 5;
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("can.reduction"), std::string::npos);
  }
  EXPECT_NO_THROW(ModelConfig{}.validate());
}

TEST(ModelTest, MapShapeAndMergedAgreement) {
  auto m = build_model<float>(small_model_config(), 13);
  merge_model(m);
  SplitMix64 rng(5);
  const auto img = random_tensor<float>({1, 3, 96, 64}, rng);
  const auto a = repsfnet_forward(m, img, false);
  const auto b = repsfnet_forward(m, img, true);
  EXPECT_EQ(a.shape(), (Shape4{1, 1, 3, 2}));
  EXPECT_LE(max_abs_diff(a, b), 1e-4);
  const auto inf = model_inference_form(m);
  EXPECT_TRUE(is_merged_only(inf));
  EXPECT_FALSE(is_merged_only(m));
  EXPECT_LE(max_abs_diff(a, repsfnet_forward(inf, img, true)), 1e-4);
  const auto la = repsfnet_logits(m, img, false);
  EXPECT_GT(max_abs_diff(la, Tensor4<float>(la.shape())), 1e-3);
  EXPECT_LE(max_abs_diff(la, repsfnet_logits(inf, img, true)), 1e-4);
  EXPECT_TRUE(relu(la) == a);
  EXPECT_THROW(repsfnet_forward(inf, img, false), StateError);
  EXPECT_THROW(repsfnet_forward(m, Tensor4<float>(Shape4{2, 3, 32, 32}), false), ShapeError);
  EXPECT_THROW(repsfnet_forward(m, Tensor4<float>(Shape4{1, 3, 48, 32}), false), GeometryError);
}

// Property: merged/branch agreement and non-negativity over seeds.
TEST(ModelTest, RandomSeedsAgreeAndStayNonNegative) {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 6; ++trial) {
    auto m = build_model<float>(small_model_config(), rng.next());
    merge_model(m);
    const auto img = random_tensor<float>({1, 3, 64, 64}, rng, -2, 2);
    const auto a = repsfnet_forward(m, img, false);
    const auto b = repsfnet_forward(m, img, true);
    ASSERT_LE(max_abs_diff(a, b), 1e-4);
    ASSERT_LE(max_abs_diff(repsfnet_logits(m, img, false), repsfnet_logits(m, img, true)), 1e-4);
    for (float v : b.data()) ASSERT_GE(v, 0.0f);
  }
}

TEST(ModelTest, ZeroImageDeterministic) {
  auto m = build_model<float>(small_model_config(), 3);
  m.backbone.stem.conv.bias = std::vector<float>(8, 0.0f);
  const Tensor4<float> img(Shape4{1, 3, 64, 96});
  const auto a = repsfnet_forward(m, img, false);
  setenv("REPSF_THREADS", "3", 1);
  const auto b = repsfnet_forward(m, img, false);
  unsetenv("REPSF_THREADS");
  EXPECT_TRUE(a == b);
  auto m2 = build_model<float>(small_model_config(), 3);
  m2.backbone.stem.conv.bias = std::vector<float>(8, 0.0f);
  EXPECT_TRUE(a == repsfnet_forward(m2, img, false));
}

TEST(ModelTest, CountsAreConsistent) {
  auto m = build_model<double>(small_model_config(), 1);
  std::int64_t stored = 0;
  visit_params<double>(m, [&](const ParamRef<double>& p) {
    if (p.kind != ParamKind::kBnMean && p.kind != ParamKind::kBnVar) stored += p.data.size();
  });
  EXPECT_EQ(count_params(m, false), stored);
  auto inf = model_inference_form(m);
  std::int64_t folded = 0;
  visit_params<double>(inf, [&](const ParamRef<double>& p) { folded += p.data.size(); });
  EXPECT_EQ(count_params(m, true), folded);
  EXPECT_LT(count_params(m, true), count_params(m, false));
  EXPECT_LT(count_macs(m, 64, 64, true), count_macs(m, 64, 64, false));
}

}  // namespace
}  // namespace repsf
