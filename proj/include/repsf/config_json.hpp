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
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "repsf/density.hpp"
#include "repsf/error.hpp"
#include "repsf/fusion.hpp"

namespace repsf {

using Json = nlohmann::json;

namespace detail {

inline void reject_unknown_keys(const Json& obj, const std::string& path,
                                std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) throw ConfigError(path + it.key() + ": unknown field");
  }
}

inline const Json& require_object(const Json& j, const std::string& field) {
  if (!j.is_object()) throw ConfigError(field + ": expected an object");
  return j;
}

inline int json_int(const Json& v, const std::string& field) {
  if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
  const auto x = v.get<std::int64_t>();
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
    throw ConfigError(field + ": out of range");
  return static_cast<int>(x);
}

inline bool json_bool(const Json& v, const std::string& field) {
  if (!v.is_boolean()) throw ConfigError(field + ": expected true or false");
  return v.get<bool>();
}

inline std::vector<int> json_int_list(const Json& v, const std::string& field) {
  if (!v.is_array()) throw ConfigError(field + ": expected an array of integers");
  std::vector<int> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(json_int(v[i], field + "[" + std::to_string(i) + "]"));
  return out;
}

template <typename T, std::size_t N>
std::array<T, N> fixed_list(const Json& v, const std::string& field) {
  if (!v.is_array() || v.size() != N)
    throw ConfigError(field + ": expected an array of " + std::to_string(N) + " entries");
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    const std::string f = field + "[" + std::to_string(i) + "]";
    if constexpr (std::is_same_v<T, bool>)
      out[i] = json_bool(v[i], f);
    else
      out[i] = json_int(v[i], f);
  }
  return out;
}

}  // namespace detail

/// Reads a model config document. Absent fields keep their defaults,
/// unknown fields are rejected and the result is validated.
inline ModelConfig config_from_json(const Json& doc) {
  using namespace detail;
  require_object(doc, "config");
  reject_unknown_keys(doc, "", {"backbone", "aspp", "can", "head"});
  ModelConfig cfg;
  if (doc.contains("backbone")) {
    const Json& b = require_object(doc["backbone"], "backbone");
    reject_unknown_keys(b, "backbone.",
                        {"stem_out_ch", "stage_channels", "stage_depths", "stage_kernels",
                         "small_kernel", "downsample", "expansion", "identity_branch"});
    BackboneConfig& bc = cfg.backbone;
    if (b.contains("stem_out_ch")) bc.stem_out_ch = json_int(b["stem_out_ch"], "backbone.stem_out_ch");
    if (b.contains("stage_channels"))
      bc.stage_channels = fixed_list<int, 4>(b["stage_channels"], "backbone.stage_channels");
    if (b.contains("stage_depths"))
      bc.stage_depths = fixed_list<int, 4>(b["stage_depths"], "backbone.stage_depths");
    if (b.contains("stage_kernels"))
      bc.stage_kernels = fixed_list<int, 4>(b["stage_kernels"], "backbone.stage_kernels");
    if (b.contains("small_kernel")) bc.small_kernel = json_int(b["small_kernel"], "backbone.small_kernel");
    if (b.contains("downsample"))
      bc.downsample = fixed_list<bool, 4>(b["downsample"], "backbone.downsample");
    if (b.contains("expansion")) bc.expansion = json_int(b["expansion"], "backbone.expansion");
    if (b.contains("identity_branch"))
      bc.identity_branch = json_bool(b["identity_branch"], "backbone.identity_branch");
  }
  if (doc.contains("aspp")) {
    const Json& a = require_object(doc["aspp"], "aspp");
    reject_unknown_keys(a, "aspp.", {"rates", "branch_channels", "out_channels"});
    if (a.contains("rates")) cfg.aspp.rates = json_int_list(a["rates"], "aspp.rates");
    if (a.contains("branch_channels"))
      cfg.aspp.branch_channels = json_int(a["branch_channels"], "aspp.branch_channels");
    if (a.contains("out_channels")) cfg.aspp.out_channels = json_int(a["out_channels"], "aspp.out_channels");
  }
  if (doc.contains("can")) {
    const Json& c = require_object(doc["can"], "can");
    reject_unknown_keys(c, "can.", {"scales", "reduction"});
    if (c.contains("scales")) cfg.can.scales = json_int_list(c["scales"], "can.scales");
    if (c.contains("reduction")) cfg.can.reduction = json_int(c["reduction"], "can.reduction");
  }
  if (doc.contains("head")) {
    const Json& h = require_object(doc["head"], "head");
    reject_unknown_keys(h, "head.", {"hidden"});
    if (h.contains("hidden")) cfg.head.hidden = json_int(h["hidden"], "head.hidden");
  }
  try {
    cfg.backbone.validate();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    throw ConfigError("backbone." + msg.substr(msg.find(": ") + 2));
  }
  cfg.validate();
  return cfg;
}

/// Full document with every field spelled out.
inline Json config_to_json(const ModelConfig& cfg) {
  const BackboneConfig& b = cfg.backbone;
  Json doc;
  doc["backbone"] = {{"stem_out_ch", b.stem_out_ch},
                     {"stage_channels", b.stage_channels},
                     {"stage_depths", b.stage_depths},
                     {"stage_kernels", b.stage_kernels},
                     {"small_kernel", b.small_kernel},
                     {"downsample", b.downsample},
                     {"expansion", b.expansion},
                     {"identity_branch", b.identity_branch}};
  doc["aspp"] = {{"rates", cfg.aspp.rates},
                 {"branch_channels", cfg.aspp.branch_channels},
                 {"out_channels", cfg.aspp.out_channels}};
  doc["can"] = {{"scales", cfg.can.scales}, {"reduction", cfg.can.reduction}};
  doc["head"] = {{"hidden", cfg.head.hidden}};
  return doc;
}

/// Parses JSON text; syntax errors become format errors at the failing byte.
inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError(what + ": malformed JSON", e.byte > 0 ? e.byte - 1 : 0);
  }
}

inline ModelConfig parse_config(const std::string& text) {
  return config_from_json(parse_json(text, "config"));
}

/// {"image": str, "width": int, "height": int, "points": [[x, y], ...]}.
/// Structural problems are format errors; out-of-range points are
/// validation errors.
inline PointAnnotations annotations_from_json(const Json& doc) {
  auto bad = [](const std::string& why) { throw FormatError("annotation document: " + why); };
  if (!doc.is_object()) bad("expected an object");
  PointAnnotations ann;
  if (doc.contains("image")) {
    if (!doc["image"].is_string()) bad("image: expected a string");
    ann.image = doc["image"].get<std::string>();
  }
  for (const char* key : {"width", "height", "points"})
    if (!doc.contains(key)) bad(std::string(key) + ": missing");
  for (const char* key : {"width", "height"}) {
    const Json& v = doc[key];
    if (!v.is_number_integer()) bad(std::string(key) + ": expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
      bad(std::string(key) + ": out of range");
    (std::string(key) == "width" ? ann.width : ann.height) = static_cast<int>(x);
  }
  const Json& pts = doc["points"];
  if (!pts.is_array()) bad("points: expected an array");
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Json& p = pts[i];
    const std::string idx = "points[" + std::to_string(i) + "]";
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
      bad(idx + ": expected [x, y]");
    ann.points.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  ann.validate();
  return ann;
}

inline Json annotations_to_json(const PointAnnotations& ann) {
  Json pts = Json::array();
  for (const Point& p : ann.points) pts.push_back({p.x, p.y});
  return {{"image", ann.image}, {"width", ann.width}, {"height", ann.height}, {"points", pts}};
}

}  // namespace repsf
