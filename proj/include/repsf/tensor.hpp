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
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "repsf/error.hpp"
#include "repsf/rng.hpp"

namespace repsf {

enum class DType : unsigned char { kFloat32 = 1, kFloat64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold binary32 or binary64 scalars");
  return std::is_same_v<T, float> ? DType::kFloat32 : DType::kFloat64;
}

inline const char* dtype_name(DType d) { return d == DType::kFloat32 ? "f32" : "f64"; }

struct Shape4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t numel() const { return n * c * h * w; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

/// Dense 4-D array in (n, c, h, w) row-major order.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  const Shape4& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Contiguous h*w plane of (n, c).
  std::span<T> plane(std::size_t n, std::size_t c) {
    return std::span<T>(data_).subspan(index(n, c, 0, 0), shape_.h * shape_.w);
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    return std::span<const T>(data_).subspan(index(n, c, 0, 0), shape_.h * shape_.w);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor4<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor4<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor4&) const = default;

 private:
  Shape4 shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor4<T> random_tensor(Shape4 shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor4<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (!(a.shape() == b.shape()))
    throw ShapeError("cannot compare " + a.shape().str() + " with " + b.shape().str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
double total_sum(const Tensor4<T>& t) {
  double s = 0.0;
  for (T v : t.data()) s += static_cast<double>(v);
  return s;
}

}  // namespace repsf
