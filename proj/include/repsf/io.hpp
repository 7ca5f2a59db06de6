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

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "repsf/config_json.hpp"
#include "repsf/density.hpp"
#include "repsf/error.hpp"
#include "repsf/fusion.hpp"
#include "repsf/tensor.hpp"

namespace repsf {

using Bytes = std::vector<unsigned char>;

inline const char* to_string(DType d) { return d == DType::kFloat32 ? "float32" : "float64"; }
inline std::size_t scalar_size(DType d) { return d == DType::kFloat32 ? 4 : 8; }

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void scalar(T v) {
    if constexpr (std::is_same_v<T, float>)
      u32(std::bit_cast<std::uint32_t>(v));
    else
      u64(std::bit_cast<std::uint64_t>(v));
  }

 private:
  Bytes& out_;
};

// Bounds-checked little-endian reader; `base` is added to reported offsets.
class ByteReader {
 public:
  ByteReader(std::span<const unsigned char> data, std::size_t base = 0) : data_(data), base_(base) {}

  std::size_t pos() const { return pos_; }
  std::size_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  [[noreturn]] void fail(const std::string& what) const { throw FormatError(what, offset()); }
  [[noreturn]] void fail_at(const std::string& what, std::size_t local) const {
    throw FormatError(what, base_ + local);
  }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) fail(std::string("truncated ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return data_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{data_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{data_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  std::span<const unsigned char> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const unsigned char> data_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

template <typename T>
T load_scalar(const unsigned char* p) {
  if constexpr (std::is_same_v<T, float>) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{p[i]} << (8 * i);
    return std::bit_cast<float>(v);
  } else {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
    return std::bit_cast<double>(v);
  }
}

inline std::uint32_t crc32_of(std::span<const unsigned char> data) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < data.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(data.size() - done, 1u << 30));
    crc = ::crc32(crc, data.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

/// In-memory form of a tensor file: dtype, dims and the little-endian
/// payload exactly as stored.
struct TensorFile {
  DType dtype = DType::kFloat64;
  std::vector<std::uint64_t> dims;
  Bytes payload;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  /// Values converted to T (binary64 to binary32 rounds to nearest).
  template <typename T>
  std::vector<T> values() const {
    const std::size_t n = static_cast<std::size_t>(numel());
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned char* p = payload.data() + i * scalar_size(dtype);
      out[i] = dtype == DType::kFloat32 ? static_cast<T>(detail::load_scalar<float>(p))
                                        : static_cast<T>(detail::load_scalar<double>(p));
    }
    return out;
  }
};

template <typename T>
TensorFile to_tensor_file(std::span<const T> data, std::vector<std::uint64_t> dims) {
  TensorFile f;
  f.dtype = dtype_of<T>();
  f.dims = std::move(dims);
  if (f.numel() != data.size()) throw ShapeError("tensor dims do not match the value count");
  f.payload.reserve(data.size() * sizeof(T));
  detail::ByteWriter w(f.payload);
  for (T v : data) w.scalar(v);
  return f;
}

template <typename T>
TensorFile to_tensor_file(const Tensor4<T>& t) {
  const Shape4 s = t.shape();
  return to_tensor_file<T>(std::span<const T>(t.data().data(), t.numel()), {s.n, s.c, s.h, s.w});
}

inline TensorFile to_tensor_file(const DensityMap& dm) {
  dm.validate();
  return to_tensor_file<double>(dm.values, {1, 1, dm.h, dm.w});
}

/// "RSFT", version 1, dtype, ndim, reserved 0, ndim x u64 dims, payload.
inline Bytes encode_tensor(const TensorFile& f) {
  if (f.dims.size() > 255) throw ShapeError("tensor files hold at most 255 dimensions");
  if (f.payload.size() != f.numel() * scalar_size(f.dtype))
    throw ShapeError("tensor payload length does not match its dims");
  Bytes out;
  out.reserve(8 + 8 * f.dims.size() + f.payload.size());
  detail::ByteWriter w(out);
  w.bytes("RSFT", 4);
  w.u8(1);
  w.u8(static_cast<std::uint8_t>(f.dtype));
  w.u8(static_cast<std::uint8_t>(f.dims.size()));
  w.u8(0);
  for (auto d : f.dims) w.u64(d);
  w.bytes(f.payload.data(), f.payload.size());
  return out;
}

/// Decodes exactly one tensor occupying all of `bytes`. Offsets in errors
/// are reported relative to the enclosing file via `base`.
inline TensorFile decode_tensor(std::span<const unsigned char> bytes, std::size_t base = 0) {
  detail::ByteReader r(bytes, base);
  const auto magic = r.take(4, "tensor magic");
  if (std::memcmp(magic.data(), "RSFT", 4) != 0) r.fail_at("bad tensor magic", 0);
  if (r.u8("tensor version") != 1) r.fail_at("unsupported tensor version", 4);
  TensorFile f;
  const std::uint8_t dt = r.u8("tensor dtype");
  if (dt != 1 && dt != 2) r.fail_at("unknown tensor dtype " + std::to_string(dt), 5);
  f.dtype = static_cast<DType>(dt);
  const std::uint8_t ndim = r.u8("tensor ndim");
  if (r.u8("tensor header") != 0) r.fail_at("reserved tensor byte is not zero", 7);
  r.need(8 * std::size_t{ndim}, "tensor dims");
  // Every size check is made against the bytes actually present, so no
  // allocation can exceed the input.
  const std::uint64_t limit = r.remaining();
  std::uint64_t numel = 1;
  for (std::uint8_t i = 0; i < ndim; ++i) {
    const std::size_t at = r.pos();
    const std::uint64_t d = r.u64("tensor dims");
    if (d != 0 && numel > limit / d) r.fail_at("tensor dims exceed the file size", at);
    numel *= d;
    f.dims.push_back(d);
  }
  const std::uint64_t size = scalar_size(f.dtype);
  if (numel > r.remaining() / size) r.fail("truncated tensor payload");
  const auto payload = r.take(static_cast<std::size_t>(numel * size), "tensor payload");
  if (r.remaining() != 0) r.fail("trailing bytes after tensor payload");
  f.payload.assign(payload.begin(), payload.end());
  return f;
}

/// Accepts (N, C, H, W) or (H, W) files.
template <typename T>
Tensor4<T> to_tensor4(const TensorFile& f) {
  Shape4 s;
  if (f.dims.size() == 4)
    s = {f.dims[0], f.dims[1], f.dims[2], f.dims[3]};
  else if (f.dims.size() == 2)
    s = {1, 1, f.dims[0], f.dims[1]};
  else
    throw ShapeError("expected a 4-d (N, C, H, W) or 2-d (H, W) tensor, got " +
                     std::to_string(f.dims.size()) + " dims");
  return Tensor4<T>(s, f.values<T>());
}

/// Maps a (1, 1, H, W) or (H, W) tensor to a density map.
inline DensityMap to_density(const TensorFile& f) {
  const Tensor4<double> t = to_tensor4<double>(f);
  if (t.n() != 1 || t.c() != 1)
    throw ShapeError("density maps are (1, 1, H, W) tensors, got " + std::to_string(t.n()) + "x" +
                     std::to_string(t.c()) + "x" + std::to_string(t.h()) + "x" +
                     std::to_string(t.w()));
  DensityMap dm(t.h(), t.w());
  std::copy(t.data().begin(), t.data().end(), dm.values.begin());
  return dm;
}

// ---------------------------------------------------------------------------
// Files

inline Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw ValidationError("cannot read " + path);
  return data;
}

inline std::string read_text_file(const std::string& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

/// Writes through a sibling temporary file and renames it into place.
inline void write_file(const std::string& path, std::span<const unsigned char> data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw ValidationError("cannot write " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw ValidationError("cannot write " + path);
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor4<T>& t) {
  write_file(path, encode_tensor(to_tensor_file(t)));
}

inline void save_density(const std::string& path, const DensityMap& dm) {
  write_file(path, encode_tensor(to_tensor_file(dm)));
}

inline TensorFile load_tensor_file(const std::string& path) { return decode_tensor(read_file(path)); }

template <typename T>
Tensor4<T> load_tensor(const std::string& path) {
  return to_tensor4<T>(load_tensor_file(path));
}

inline DensityMap load_density(const std::string& path) { return to_density(load_tensor_file(path)); }

inline ModelConfig load_config(const std::string& path) { return parse_config(read_text_file(path)); }

inline PointAnnotations load_annotations(const std::string& path) {
  return annotations_from_json(parse_json(read_text_file(path), "annotation document"));
}

// ---------------------------------------------------------------------------
// Weight bundles
//
//   "RSFW" | u8 version 1 | 3 reserved zero bytes | u64 manifest length |
//   manifest JSON | u64 tensor count | count x u64 absolute offsets |
//   tensor files | u32 CRC-32 of every preceding byte
//
// The manifest holds format_version, merged, seed, dtype, config and
// params: [{"name", "shape"}] in visit order.

struct BundleInfo {
  int format_version = 1;
  bool merged = false;
  std::uint64_t seed = 0;
  DType dtype = DType::kFloat32;
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<std::vector<std::uint64_t>> shapes;
};

template <typename T>
struct Bundle {
  BundleInfo info;
  Model<T> model;
};

/// Parameter layout of a model in bundle form: branch weights when not
/// merged, the inference form (BN folded, merged kernels) otherwise.
template <typename T>
Model<T> bundle_skeleton(const ModelConfig& cfg, bool merged) {
  Model<T> m = model_skeleton<T>(cfg);
  return merged ? model_inference_form(m) : m;
}

template <typename T>
Bytes encode_bundle(const Model<T>& model, bool merged, std::uint64_t seed) {
  if (merged && !is_merged_only(model))
    throw StateError("encode_bundle: merged bundles hold the inference form");
  if (!merged && is_merged_only(model))
    throw StateError("encode_bundle: model holds merged kernels only");
  // The visitor only reads.
  Model<T>& m = const_cast<Model<T>&>(model);
  std::vector<TensorFile> blocks;
  Json params = Json::array();
  visit_params<T>(m, [&](const ParamRef<T>& p) {
    std::vector<std::uint64_t> dims(p.shape.begin(), p.shape.end());
    params.push_back({{"name", p.name}, {"shape", dims}});
    blocks.push_back(to_tensor_file<T>(std::span<const T>(p.data.data(), p.data.size()), dims));
  });
  Json manifest = {{"format_version", 1},     {"merged", merged},
                   {"seed", seed},            {"dtype", to_string(dtype_of<T>())},
                   {"config", config_to_json(model.cfg)}, {"params", params}};
  const std::string text = manifest.dump();

  Bytes out;
  detail::ByteWriter w(out);
  w.bytes("RSFW", 4);
  w.u8(1);
  w.u8(0);
  w.u8(0);
  w.u8(0);
  w.u64(text.size());
  w.bytes(text.data(), text.size());
  w.u64(blocks.size());
  std::uint64_t offset = out.size() + 8 * blocks.size();
  std::vector<Bytes> encoded;
  for (const auto& b : blocks) {
    encoded.push_back(encode_tensor(b));
    w.u64(offset);
    offset += encoded.back().size();
  }
  for (const auto& e : encoded) w.bytes(e.data(), e.size());
  w.u32(detail::crc32_of(out));
  return out;
}

namespace detail {

struct BundleLayout {
  BundleInfo info;
  std::vector<std::uint64_t> offsets;
  std::size_t payload_end = 0;  // start of the checksum
};

inline BundleLayout parse_bundle_layout(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  const auto magic = r.take(4, "bundle magic");
  if (std::memcmp(magic.data(), "RSFW", 4) != 0) r.fail_at("bad bundle magic", 0);
  if (r.u8("bundle version") != 1) r.fail_at("unsupported bundle version", 4);
  for (int i = 0; i < 3; ++i)
    if (r.u8("bundle header") != 0) r.fail_at("reserved bundle byte is not zero", 5 + i);
  if (bytes.size() < 4 + r.pos()) r.fail("truncated bundle");
  const std::size_t end = bytes.size() - 4;
  const std::size_t len_at = r.pos();
  const std::uint64_t mlen = r.u64("manifest length");
  if (mlen > end - r.pos()) r.fail_at("manifest length exceeds the file", len_at);
  const std::size_t mstart = r.pos();
  const auto mbytes = r.take(static_cast<std::size_t>(mlen), "manifest");

  BundleLayout layout;
  BundleInfo& info = layout.info;
  Json doc;
  try {
    doc = Json::parse(mbytes.begin(), mbytes.end());
  } catch (const Json::parse_error& e) {
    r.fail_at("malformed manifest JSON", mstart + (e.byte > 0 ? e.byte - 1 : 0));
  }
  auto bad = [&](const std::string& why) { r.fail_at("manifest " + why, mstart); };
  if (!doc.is_object()) bad("is not an object");
  for (const char* key : {"format_version", "merged", "seed", "dtype", "config", "params"})
    if (!doc.contains(key)) bad(std::string(key) + ": missing");
  if (!doc["format_version"].is_number_integer() || doc["format_version"].get<std::int64_t>() != 1)
    bad("format_version: unsupported");
  if (!doc["merged"].is_boolean()) bad("merged: expected true or false");
  info.merged = doc["merged"].get<bool>();
  if (!doc["seed"].is_number_unsigned()) bad("seed: expected a non-negative integer");
  info.seed = doc["seed"].get<std::uint64_t>();
  if (doc["dtype"] == "float32")
    info.dtype = DType::kFloat32;
  else if (doc["dtype"] == "float64")
    info.dtype = DType::kFloat64;
  else
    bad("dtype: expected float32 or float64");
  try {
    info.config = config_from_json(doc["config"]);
  } catch (const ConfigError& e) {
    bad(std::string("config: ") + e.what());
  }
  const Json& params = doc["params"];
  if (!params.is_array()) bad("params: expected an array");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Json& p = params[i];
    const std::string idx = "params[" + std::to_string(i) + "]";
    if (!p.is_object() || !p.contains("name") || !p["name"].is_string() || !p.contains("shape") ||
        !p["shape"].is_array())
      bad(idx + ": expected {name, shape}");
    std::vector<std::uint64_t> shape;
    for (const Json& d : p["shape"]) {
      if (!d.is_number_unsigned()) bad(idx + ".shape: expected non-negative integers");
      shape.push_back(d.get<std::uint64_t>());
    }
    info.names.push_back(p["name"].get<std::string>());
    info.shapes.push_back(std::move(shape));
  }

  const std::size_t count_at = r.pos();
  const std::uint64_t count = r.u64("tensor count");
  if (count != info.names.size())
    r.fail_at("tensor count " + std::to_string(count) + " differs from the manifest (" +
                  std::to_string(info.names.size()) + ")",
              count_at);
  if (count > (end - std::min(end, r.pos())) / 8) r.fail_at("offset table exceeds the file", count_at);
  // Offsets start right after the table and never decrease; exact
  // contiguity is checked block by block while decoding.
  const std::uint64_t table_end = r.pos() + 8 * count;
  std::uint64_t prev = table_end;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const std::uint64_t off = r.u64("offset table");
    if ((i == 0 && off != table_end) || off < prev || off > end)
      r.fail_at("tensor offset " + std::to_string(i) + " is inconsistent", at);
    layout.offsets.push_back(off);
    prev = off;
  }
  layout.payload_end = end;
  return layout;
}

}  // namespace detail

/// Reads only the manifest (validated) of a bundle.
inline BundleInfo read_bundle_info(std::span<const unsigned char> bytes) {
  return detail::parse_bundle_layout(bytes).info;
}

template <typename T>
Bundle<T> decode_bundle(std::span<const unsigned char> bytes) {
  detail::BundleLayout layout = detail::parse_bundle_layout(bytes);
  BundleInfo& info = layout.info;
  if (info.dtype != dtype_of<T>())
    throw ValidationError(std::string("bundle holds ") + to_string(info.dtype) + " weights, requested " +
                          to_string(dtype_of<T>()));
  Bundle<T> b{info, bundle_skeleton<T>(info.config, info.merged)};
  const std::size_t count = layout.offsets.size();
  const std::size_t manifest_at = 16;
  std::size_t k = 0;
  std::uint64_t cursor = count ? layout.offsets[0] : layout.payload_end;
  visit_params<T>(b.model, [&](const ParamRef<T>& p) {
    if (k >= count) throw FormatError("manifest lists fewer parameters than the model holds", manifest_at);
    const std::vector<std::uint64_t> shape(p.shape.begin(), p.shape.end());
    if (info.names[k] != p.name || info.shapes[k] != shape)
      throw FormatError("manifest entry " + std::to_string(k) + " (" + info.names[k] +
                            ") does not match the model parameter " + p.name,
                        manifest_at);
    const std::uint64_t start = layout.offsets[k];
    if (start != cursor) throw FormatError("tensor blocks are not contiguous", static_cast<std::size_t>(start));
    // Blocks are contiguous, so each ends where the next begins.
    const std::uint64_t stop = k + 1 < count ? layout.offsets[k + 1] : layout.payload_end;
    if (stop < start || stop > layout.payload_end)
      throw FormatError("tensor block " + std::to_string(k) + " overruns the file",
                        static_cast<std::size_t>(start));
    const TensorFile f = decode_tensor(bytes.subspan(start, stop - start), start);
    if (f.dtype != info.dtype || f.dims != shape)
      throw FormatError("tensor block " + std::to_string(k) + " header does not match the manifest",
                        static_cast<std::size_t>(start));
    const std::vector<T> v = f.values<T>();
    std::copy(v.begin(), v.end(), p.data.begin());
    cursor = stop;
    ++k;
  });
  if (k != count) throw FormatError("manifest lists more parameters than the model holds", manifest_at);
  const std::size_t end = layout.payload_end;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t{bytes[end + i]} << (8 * i);
  if (stored != detail::crc32_of(bytes.first(end))) throw FormatError("bundle checksum mismatch", end);
  return b;
}

template <typename T>
void save_bundle(const std::string& path, const Model<T>& model, bool merged, std::uint64_t seed) {
  write_file(path, encode_bundle(model, merged, seed));
}

template <typename T>
Bundle<T> load_bundle(const std::string& path) {
  return decode_bundle<T>(read_file(path));
}

// ---------------------------------------------------------------------------
// PGM export

struct PgmScale {
  enum class Mode { kAuto, kFixed };
  Mode mode = Mode::kAuto;
  double cap = 1.0;

  static PgmScale automatic() { return {}; }
  static PgmScale fixed(double cap) { return {Mode::kFixed, cap}; }
};

/// Binary 16-bit PGM ("P5 W H 65535\n", big-endian samples). Auto scaling
/// maps [min, max] to [0, 65535]; fixed scaling maps [0, cap], clamped.
inline Bytes encode_pgm(const DensityMap& dm, PgmScale scale = {}) {
  dm.validate();
  for (double v : dm.values)
    if (!std::isfinite(v)) throw ValidationError("PGM export needs finite values");
  if (scale.mode == PgmScale::Mode::kFixed && !(scale.cap > 0.0 && std::isfinite(scale.cap)))
    throw ConfigError("pgm cap: must be positive");
  double lo = 0.0, range = scale.cap;
  if (scale.mode == PgmScale::Mode::kAuto && !dm.values.empty()) {
    const auto [mn, mx] = std::minmax_element(dm.values.begin(), dm.values.end());
    lo = *mn;
    range = *mx - *mn;
  }
  const std::string header = "P5 " + std::to_string(dm.w) + " " + std::to_string(dm.h) + " 65535\n";
  Bytes out(header.begin(), header.end());
  out.reserve(header.size() + 2 * dm.values.size());
  for (double v : dm.values) {
    double s = range > 0.0 ? (v - lo) / range * 65535.0 : 0.0;
    s = std::clamp(std::nearbyint(s), 0.0, 65535.0);
    const auto q = static_cast<std::uint16_t>(s);
    out.push_back(static_cast<unsigned char>(q >> 8));
    out.push_back(static_cast<unsigned char>(q & 0xff));
  }
  return out;
}

inline void export_pgm(const DensityMap& dm, const std::string& path, PgmScale scale = {}) {
  write_file(path, encode_pgm(dm, scale));
}

}  // namespace repsf
