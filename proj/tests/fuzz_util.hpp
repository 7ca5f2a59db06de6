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


// Byte-level mutators shared by the serialization fuzz tests.
#pragma once

#include <algorithm>
#include <cstdint>
#include <span>

#include "repsf/io.hpp"
#include "repsf/rng.hpp"

namespace repsf::testing::fuzz {

inline void reseal(Bytes& b) {
  const std::uint32_t crc = detail::crc32_of(std::span<const unsigned char>(b).first(b.size() - 4));
  for (int i = 0; i < 4; ++i) b[b.size() - 4 + i] = static_cast<unsigned char>(crc >> (8 * i));
}

enum class Outcome { kLoaded, kFormatError, kOther };

inline Outcome try_bundle(const Bytes& b) {
  try {
    const BundleInfo info = read_bundle_info(b);
    if (info.dtype == DType::kFloat32)
      decode_bundle<float>(b);
    else
      decode_bundle<double>(b);
    return Outcome::kLoaded;
  } catch (const FormatError&) {
    return Outcome::kFormatError;
  } catch (...) {
    return Outcome::kOther;
  }
}

inline Outcome try_tensor(const Bytes& b) {
  try {
    decode_tensor(b);
    return Outcome::kLoaded;
  } catch (const FormatError&) {
    return Outcome::kFormatError;
  } catch (...) {
    return Outcome::kOther;
  }
}

inline Bytes mutate(const Bytes& good, SplitMix64& rng, std::size_t lo, std::size_t hi) {
  Bytes b = good;
  switch (rng.range(0, 3)) {
    case 0: {  // flip 1 to 4 bytes in [lo, hi)
      const std::size_t n = rng.range(1, 4);
      for (std::size_t i = 0; i < n; ++i) b[rng.range(lo, hi - 1)] ^= static_cast<unsigned char>(rng.range(1, 255));
      break;
    }
    case 1:  // truncate
      b.resize(rng.range(0, good.size() - 1));
      break;
    case 2: {  // insert junk
      const std::size_t at = rng.range(0, good.size());
      const std::size_t n = rng.range(1, 16);
      for (std::size_t i = 0; i < n; ++i) b.insert(b.begin() + at, static_cast<unsigned char>(rng.range(0, 255)));
      break;
    }
    default:  // overwrite a run with one byte value
    {
      const std::size_t at = rng.range(lo, hi - 1);
      const std::size_t n = std::min<std::size_t>(rng.range(1, 12), hi - at);
      const auto v = static_cast<unsigned char>(rng.range(0, 255));
      for (std::size_t i = 0; i < n; ++i) b[at + i] = v;
      break;
    }
  }
  return b;
}

}  // namespace repsf::testing::fuzz
