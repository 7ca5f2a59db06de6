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

#include <stdexcept>
#include <string>

namespace repsf {

// Every failure raised by the library derives from Error. The CLI maps the
// categories onto exit codes (see ExitCode in tools/).
enum class ErrorKind {
  kShape,
  kGeometry,
  kParity,
  kStructure,
  kConfig,
  kState,
  kValidation,
  kFormat,
  kNumeric,
  kDegenerateInput,
  kUnsupportedInstance,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kGeometry: return "geometry error";
    case ErrorKind::kParity: return "parity error";
    case ErrorKind::kStructure: return "structure error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kState: return "state error";
    case ErrorKind::kValidation: return "validation error";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kDegenerateInput: return "degenerate input";
    case ErrorKind::kUnsupportedInstance: return "unsupported instance";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define REPSF_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

REPSF_DEFINE_ERROR(ShapeError, kShape)
REPSF_DEFINE_ERROR(GeometryError, kGeometry)
REPSF_DEFINE_ERROR(ParityError, kParity)
REPSF_DEFINE_ERROR(StructureError, kStructure)
REPSF_DEFINE_ERROR(ConfigError, kConfig)
REPSF_DEFINE_ERROR(StateError, kState)
REPSF_DEFINE_ERROR(ValidationError, kValidation)
REPSF_DEFINE_ERROR(NumericError, kNumeric)
REPSF_DEFINE_ERROR(DegenerateInputError, kDegenerateInput)
REPSF_DEFINE_ERROR(UnsupportedInstanceError, kUnsupportedInstance)

#undef REPSF_DEFINE_ERROR

// Format errors carry the byte offset at which decoding gave up, when one
// is known.
class FormatError : public Error {
 public:
  static constexpr std::size_t kNoOffset = static_cast<std::size_t>(-1);

  explicit FormatError(const std::string& what) : Error(ErrorKind::kFormat, what) {}
  FormatError(const std::string& what, std::size_t offset)
      : Error(ErrorKind::kFormat, what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }
  bool has_offset() const noexcept { return offset_ != kNoOffset; }

 private:
  std::size_t offset_ = kNoOffset;
};

}  // namespace repsf
