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

#include <cstdint>
#include <string>
#include <vector>

#include "repsf/backbone.hpp"
#include "repsf/conv.hpp"
#include "repsf/error.hpp"
#include "repsf/ops.hpp"
#include "repsf/params.hpp"

namespace repsf {

/// Dilated convolution with kernel k and dilation rate covers
/// k + (k - 1)(rate - 1) input pixels per side.
constexpr int effective_receptive_field(int k, int rate) { return k + (k - 1) * (rate - 1); }

struct AsppConfig {
  std::vector<int> rates{6, 12, 18, 24};
  int branch_channels = 128;
  int out_channels = 128;
};

struct CanConfig {
  std::vector<int> scales{1, 2, 3, 6};
  int reduction = 16;
};

struct HeadConfig {
  int hidden = 64;
};

struct ModelConfig {
  BackboneConfig backbone;
  AsppConfig aspp;
  CanConfig can;
  HeadConfig head;

  int f4_channels() const { return backbone.stage_channels[3]; }
  int can_channels() const { return f4_channels() + aspp.out_channels; }

  void validate() const {
    backbone.validate();
    if (aspp.rates.empty()) throw ConfigError("aspp.rates: at least one rate required");
    for (std::size_t i = 0; i < aspp.rates.size(); ++i)
      if (aspp.rates[i] < 1)
        throw ConfigError("aspp.rates[" + std::to_string(i) + "]: must be >= 1");
    if (aspp.branch_channels <= 0) throw ConfigError("aspp.branch_channels: must be positive");
    if (aspp.out_channels <= 0) throw ConfigError("aspp.out_channels: must be positive");
    if (can.scales.empty()) throw ConfigError("can.scales: at least one scale required");
    for (std::size_t i = 0; i < can.scales.size(); ++i)
      if (can.scales[i] < 1)
        throw ConfigError("can.scales[" + std::to_string(i) + "]: must be >= 1");
    if (can.reduction <= 0 || can_channels() % can.reduction != 0)
      throw ConfigError("can.reduction: " + std::to_string(can.reduction) +
                        " must divide the CAN width " + std::to_string(can_channels()));
    if (head.hidden <= 0) throw ConfigError("head.hidden: must be positive");
  }
};

/// Atrous spatial pyramid pooling: a 1x1 branch, one dilated 3x3 branch per
/// rate and an image-pooling branch, concatenated in that order and
/// projected by a 1x1 conv. Every conv is followed by BN and ReLU.
template <typename T>
struct AsppSpec {
  std::vector<int> rates;
  ConvBn<T> pointwise;
  std::vector<ConvBn<T>> dilated;
  ConvBn<T> pooled;
  ConvBn<T> project;

  std::size_t branch_count() const { return rates.size() + 2; }
};

/// Context-aware multi-scale weighting followed by a channel gate.
template <typename T>
struct CanSpec {
  std::vector<int> scales;
  std::vector<ConvSpec<T>> scale_weights;  // C -> 1 per scale
  int reduction = 16;
  ConvSpec<T> reduce;   // C -> C / r
  ConvSpec<T> restore;  // C / r -> C
};

/// concat(f4, aspp, can) -> 1x1 -> ReLU -> 1x1 to one channel -> ReLU.
template <typename T>
struct DensityHeadSpec {
  ConvSpec<T> fuse;
  ConvSpec<T> out;
};

template <typename T>
Tensor4<T> aspp_forward(const Tensor4<T>& f, const AsppSpec<T>& spec,
                        ConvPath path = ConvPath::kGemm) {
  if (f.c() != static_cast<std::size_t>(spec.pointwise.conv.in_ch))
    throw ShapeError("aspp expects " + std::to_string(spec.pointwise.conv.in_ch) +
                     " channels, got " + std::to_string(f.c()));
  std::vector<Tensor4<T>> branches;
  branches.reserve(spec.branch_count());
  branches.push_back(relu(forward(spec.pointwise, f, path)));
  for (const auto& d : spec.dilated) branches.push_back(relu(forward(d, f, path)));
  const Tensor4<T> pooled = relu(forward(spec.pooled, global_avg_pool(f), path));
  branches.push_back(bilinear_upsample(pooled, f.h(), f.w()));
  return relu(forward(spec.project, concat_channels(std::span<const Tensor4<T>>(branches)), path));
}

namespace detail {

// Per-scale context features upsample(avg_pool_s(f)).
template <typename T>
std::vector<Tensor4<T>> can_scale_features(const Tensor4<T>& f, const CanSpec<T>& spec) {
  std::vector<Tensor4<T>> out;
  for (int s : spec.scales)
    out.push_back(bilinear_upsample(
        adaptive_avg_pool(f, static_cast<std::size_t>(s), static_cast<std::size_t>(s)), f.h(),
        f.w()));
  return out;
}

template <typename T>
void check_can_input(const Tensor4<T>& f, const CanSpec<T>& spec) {
  if (spec.reduction <= 0 || f.c() % static_cast<std::size_t>(spec.reduction) != 0)
    throw ConfigError("can: " + std::to_string(f.c()) + " channels not divisible by r=" +
                      std::to_string(spec.reduction));
  if (spec.scale_weights.size() != spec.scales.size())
    throw ShapeError("can: one weight conv per scale required");
}

template <typename T>
std::vector<Tensor4<T>> can_normalized_weights(const Tensor4<T>& f, const CanSpec<T>& spec,
                                               const std::vector<Tensor4<T>>& ctx, ConvPath path) {
  std::vector<Tensor4<T>> w;
  for (std::size_t i = 0; i < ctx.size(); ++i)
    w.push_back(sigmoid(conv2d(sub(f, ctx[i]), spec.scale_weights[i], path)));
  Tensor4<T> total = w[0];
  for (std::size_t i = 1; i < w.size(); ++i) total = add(total, w[i]);
  for (auto& wi : w)
    for (std::size_t j = 0; j < wi.numel(); ++j) wi[j] = wi[j] / total[j];
  return w;
}

}  // namespace detail

/// Contrast features f - upsample(avg_pool_s(f)), one per scale.
template <typename T>
std::vector<Tensor4<T>> can_contrast_features(const Tensor4<T>& f, const CanSpec<T>& spec) {
  detail::check_can_input(f, spec);
  auto ctx = detail::can_scale_features(f, spec);
  for (auto& c : ctx) c = sub(f, c);
  return ctx;
}

/// Per-pixel scale weights after normalization; they sum to one at every
/// pixel. Shape (n, 1, h, w) each.
template <typename T>
std::vector<Tensor4<T>> can_scale_weights(const Tensor4<T>& f, const CanSpec<T>& spec,
                                          ConvPath path = ConvPath::kGemm) {
  detail::check_can_input(f, spec);
  return detail::can_normalized_weights(f, spec, detail::can_scale_features(f, spec), path);
}

template <typename T>
Tensor4<T> can_forward(const Tensor4<T>& f, const CanSpec<T>& spec,
                       ConvPath path = ConvPath::kGemm) {
  detail::check_can_input(f, spec);
  const auto ctx = detail::can_scale_features(f, spec);
  const auto w = detail::can_normalized_weights(f, spec, ctx, path);
  Tensor4<T> mixed(f.shape());
  for (std::size_t n = 0; n < f.n(); ++n)
    for (std::size_t c = 0; c < f.c(); ++c) {
      auto dst = mixed.plane(n, c);
      for (std::size_t s = 0; s < ctx.size(); ++s) {
        auto src = ctx[s].plane(n, c);
        auto ws = w[s].plane(n, 0);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = dst[j] + ws[j] * src[j];
      }
    }
  const Tensor4<T> gate =
      sigmoid(conv2d(relu(conv2d(global_avg_pool(mixed), spec.reduce, path)), spec.restore, path));
  for (std::size_t n = 0; n < f.n(); ++n)
    for (std::size_t c = 0; c < f.c(); ++c) {
      const T g = gate(n, c, 0, 0);
      for (auto& v : mixed.plane(n, c)) v = v * g;
    }
  return mixed;
}

/// Head output before the final ReLU.
template <typename T>
Tensor4<T> fusion_head_logits(const Tensor4<T>& f4, const Tensor4<T>& aspp_out, const Tensor4<T>& can_out,
                              const DensityHeadSpec<T>& spec, ConvPath path = ConvPath::kGemm) {
  if (f4.h() != aspp_out.h() || f4.w() != aspp_out.w() || f4.h() != can_out.h() ||
      f4.w() != can_out.w())
    throw ShapeError("fusion head inputs disagree spatially: " + f4.shape().str() + ", " +
                     aspp_out.shape().str() + ", " + can_out.shape().str());
  const Tensor4<T> cat = concat_channels<T>({f4, aspp_out, can_out});
  return conv2d(relu(conv2d(cat, spec.fuse, path)), spec.out, path);
}

template <typename T>
Tensor4<T> fusion_head(const Tensor4<T>& f4, const Tensor4<T>& aspp_out, const Tensor4<T>& can_out,
                       const DensityHeadSpec<T>& spec, ConvPath path = ConvPath::kGemm) {
  return relu(fusion_head_logits(f4, aspp_out, can_out, spec, path));
}

/// Full network: backbone, ASPP on the last stage, CAN over
/// concat(f4, ASPP), and the concatenation head.
template <typename T>
struct Model {
  ModelConfig cfg;
  BackboneSpec<T> backbone;
  AsppSpec<T> aspp;
  CanSpec<T> can;
  DensityHeadSpec<T> head;
};

template <typename T>
AsppSpec<T> aspp_skeleton(int in_ch, const AsppConfig& cfg) {
  AsppSpec<T> a;
  const int bc = cfg.branch_channels;
  a.rates = cfg.rates;
  a.pointwise = make_conv_bn<T>(in_ch, bc, 1, 1, 1, 0);
  for (int r : cfg.rates) a.dilated.push_back(make_conv_bn<T>(in_ch, bc, 1, 3, 1, r, r));
  a.pooled = make_conv_bn<T>(in_ch, bc, 1, 1, 1, 0);
  a.project = make_conv_bn<T>(bc * static_cast<int>(a.branch_count()), cfg.out_channels, 1, 1, 1, 0);
  return a;
}

template <typename T>
CanSpec<T> can_skeleton(int channels, const CanConfig& cfg) {
  if (cfg.reduction <= 0 || channels % cfg.reduction != 0)
    throw ConfigError("can.reduction: " + std::to_string(cfg.reduction) +
                      " must divide the CAN width " + std::to_string(channels));
  CanSpec<T> c;
  c.scales = cfg.scales;
  c.reduction = cfg.reduction;
  for (std::size_t i = 0; i < cfg.scales.size(); ++i)
    c.scale_weights.push_back(make_conv<T>(channels, 1, 1, 1, 1, 0, 1, true));
  c.reduce = make_conv<T>(channels, channels / cfg.reduction, 1, 1, 1, 0, 1, true);
  c.restore = make_conv<T>(channels / cfg.reduction, channels, 1, 1, 1, 0, 1, true);
  return c;
}

template <typename T>
DensityHeadSpec<T> head_skeleton(int in_ch, const HeadConfig& cfg) {
  return {make_conv<T>(in_ch, cfg.hidden, 1, 1, 1, 0, 1, true),
          make_conv<T>(cfg.hidden, 1, 1, 1, 1, 0, 1, true)};
}

template <typename T>
Model<T> model_skeleton(const ModelConfig& cfg) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  m.backbone = backbone_skeleton<T>(cfg.backbone);
  const int f4 = cfg.f4_channels();
  m.aspp = aspp_skeleton<T>(f4, cfg.aspp);
  m.can = can_skeleton<T>(cfg.can_channels(), cfg.can);
  m.head = head_skeleton<T>(f4 + cfg.aspp.out_channels + cfg.can_channels(), cfg.head);
  return m;
}

template <typename T>
void visit_params(const std::string& prefix, AsppSpec<T>& a, const ParamVisitor<T>& v) {
  visit_params(prefix + ".pointwise", a.pointwise, v);
  for (std::size_t i = 0; i < a.dilated.size(); ++i)
    visit_params(prefix + ".dilated." + std::to_string(i), a.dilated[i], v);
  visit_params(prefix + ".pooled", a.pooled, v);
  visit_params(prefix + ".project", a.project, v);
}

template <typename T>
void visit_params(const std::string& prefix, CanSpec<T>& c, const ParamVisitor<T>& v) {
  for (std::size_t i = 0; i < c.scale_weights.size(); ++i)
    visit_params(prefix + ".scale." + std::to_string(i), c.scale_weights[i], v);
  visit_params(prefix + ".reduce", c.reduce, v);
  visit_params(prefix + ".restore", c.restore, v);
}

template <typename T>
void visit_params(const std::string& prefix, DensityHeadSpec<T>& h, const ParamVisitor<T>& v) {
  visit_params(prefix + ".fuse", h.fuse, v);
  visit_params(prefix + ".out", h.out, v);
}

template <typename T>
void visit_params(const std::string& prefix, Model<T>& m, const ParamVisitor<T>& v) {
  visit_params(prefix + "backbone", m.backbone, v);
  visit_params(prefix + "aspp", m.aspp, v);
  visit_params(prefix + "can", m.can, v);
  visit_params(prefix + "head", m.head, v);
}

template <typename T>
void visit_params(Model<T>& m, const ParamVisitor<T>& v) {
  visit_params(std::string(), m, v);
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model<T> m = model_skeleton<T>(cfg);
  SplitMix64 rng(seed);
  visit_params<T>(m, uniform_initializer<T>(rng));
  return m;
}

template <typename T>
AsppSpec<T> build_aspp(int in_ch, const AsppConfig& cfg, std::uint64_t seed) {
  AsppSpec<T> a = aspp_skeleton<T>(in_ch, cfg);
  SplitMix64 rng(seed);
  visit_params<T>("aspp", a, uniform_initializer<T>(rng));
  return a;
}

template <typename T>
CanSpec<T> build_can(int channels, const CanConfig& cfg, std::uint64_t seed) {
  CanSpec<T> c = can_skeleton<T>(channels, cfg);
  SplitMix64 rng(seed);
  visit_params<T>("can", c, uniform_initializer<T>(rng));
  return c;
}

template <typename T>
DensityHeadSpec<T> build_head(int in_ch, const HeadConfig& cfg, std::uint64_t seed) {
  DensityHeadSpec<T> h = head_skeleton<T>(in_ch, cfg);
  SplitMix64 rng(seed);
  visit_params<T>("head", h, uniform_initializer<T>(rng));
  return h;
}

template <typename T>
void merge_model(Model<T>& m) {
  merge_backbone(m.backbone);
}

template <typename T>
bool is_merged_only(const Model<T>& m) {
  for (const auto& st : m.backbone.stages)
    for (const auto& u : st.units)
      if (!u.mixer.large) return true;
  return false;
}

/// Deployable form: every BN folded and every rep block merged; the
/// branch weights are dropped.
template <typename T>
Model<T> model_inference_form(const Model<T>& m) {
  Model<T> out = m;
  out.backbone = backbone_inference_form(m.backbone);
  out.aspp.pointwise = fold_unit(m.aspp.pointwise);
  for (auto& d : out.aspp.dilated) d = fold_unit(d);
  out.aspp.pooled = fold_unit(m.aspp.pooled);
  out.aspp.project = fold_unit(m.aspp.project);
  return out;
}

/// Network output before the final ReLU, shape (1, 1, H/32, W/32).
template <typename T>
Tensor4<T> repsfnet_logits(const Model<T>& m, const Tensor4<T>& image, bool merged,
                           ConvPath path = ConvPath::kGemm) {
  if (image.n() != 1) throw ShapeError("repsfnet_forward expects a single image (n = 1)");
  const auto features = backbone_forward(m.backbone, image, merged, path);
  const Tensor4<T>& f4 = features.back();
  const Tensor4<T> a = aspp_forward(f4, m.aspp, path);
  const Tensor4<T> c = can_forward(concat_channels<T>({f4, a}), m.can, path);
  return fusion_head_logits(f4, a, c, m.head, path);
}

/// Returns the (1, 1, H/32, W/32) density map.
template <typename T>
Tensor4<T> repsfnet_forward(const Model<T>& m, const Tensor4<T>& image, bool merged,
                            ConvPath path = ConvPath::kGemm) {
  return relu(repsfnet_logits(m, image, merged, path));
}

template <typename T>
std::int64_t count_params(const Model<T>& m, bool merged = false) {
  std::int64_t n = count_params(m.backbone, merged);
  n += unit_params(m.aspp.pointwise, merged) + unit_params(m.aspp.pooled, merged) +
       unit_params(m.aspp.project, merged);
  for (const auto& d : m.aspp.dilated) n += unit_params(d, merged);
  for (const auto& s : m.can.scale_weights) n += conv_params(s);
  n += conv_params(m.can.reduce) + conv_params(m.can.restore);
  n += conv_params(m.head.fuse) + conv_params(m.head.out);
  return n;
}

template <typename T>
std::int64_t count_macs(const Model<T>& m, int h, int w, bool merged) {
  std::int64_t n = count_macs(m.backbone, h, w, merged);
  const int s = m.backbone.cfg.total_stride();
  const Hw f{h / s, w / s};
  n += conv_macs(m.aspp.pointwise.conv, f) + conv_macs(m.aspp.pooled.conv, Hw{1, 1}) +
       conv_macs(m.aspp.project.conv, f);
  for (const auto& d : m.aspp.dilated) n += conv_macs(d.conv, f);
  for (const auto& sw : m.can.scale_weights) n += conv_macs(sw, f);
  n += conv_macs(m.can.reduce, Hw{1, 1}) + conv_macs(m.can.restore, Hw{1, 1});
  n += conv_macs(m.head.fuse, f) + conv_macs(m.head.out, f);
  return n;
}

}  // namespace repsf
