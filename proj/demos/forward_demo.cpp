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

// Builds the default network, merges it and compares the two forward
// passes on a random image.
//
//   forward_demo [height width]
#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "repsf/fusion.hpp"

int main(int argc, char** argv) {
  const int h = argc > 2 ? std::atoi(argv[1]) : 320;
  const int w = argc > 2 ? std::atoi(argv[2]) : 320;
  repsf::ModelConfig cfg;
  auto model = repsf::build_model<float>(cfg, 42);
  repsf::merge_model(model);
  repsf::SplitMix64 rng(7);
  const auto image = repsf::random_tensor<float>(
      {1, 3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, rng, 0.0, 1.0);

  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  const auto branch = repsf::repsfnet_forward(model, image, false);
  auto t1 = clock::now();
  const auto merged = repsf::repsfnet_forward(model, image, true);
  auto t2 = clock::now();

  auto ms = [](auto d) { return std::chrono::duration<double, std::milli>(d).count(); };
  std::printf("input %dx%d -> density %zux%zu\n", h, w, merged.h(), merged.w());
  std::printf("count (branch) %.6f  count (merged) %.6f\n", repsf::total_sum(branch),
              repsf::total_sum(merged));
  std::printf("max |branch - merged| = %.3g\n", repsf::max_abs_diff(branch, merged));
  std::printf("params %lld branch / %lld merged\n",
              static_cast<long long>(repsf::count_params(model, false)),
              static_cast<long long>(repsf::count_params(model, true)));
  std::printf("GMACs  %.3f branch / %.3f merged\n", repsf::count_macs(model, h, w, false) / 1e9,
              repsf::count_macs(model, h, w, true) / 1e9);
  std::printf("time   %.1f ms branch / %.1f ms merged\n", ms(t1 - t0), ms(t2 - t1));
  return 0;
}
