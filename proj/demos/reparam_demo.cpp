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

// Merges one 13x13 + 3x3 + identity block and certifies the result.
#include <cstdio>

#include "repsf/params.hpp"
#include "repsf/reparam.hpp"

int main() {
  using repsf::RepBlockSpec;
  repsf::SplitMix64 rng(1);
  RepBlockSpec<double> block;
  block.large = repsf::make_conv_bn<double>(8, 8, 8, 13, 1, 6);
  block.small = repsf::make_conv_bn<double>(8, 8, 8, 3, 1, 1);
  block.identity = repsf::make_bn<double>(8);
  repsf::visit_params<double>("block", block, repsf::uniform_initializer<double>(rng));

  repsf::merge_rep_block(block);
  const auto rep = repsf::equivalence_check(block, 10, 1e-10, 3, 24, 24);
  std::printf("branch params %lld -> merged params %lld\n",
              static_cast<long long>(repsf::block_params(block, false)),
              static_cast<long long>(repsf::block_params(block, true)));
  std::printf("trials %d  max abs diff %.3g  max rel diff %.3g  %s\n", rep.trials,
              rep.max_abs_diff, rep.max_rel_diff, rep.passed ? "PASS" : "FAIL");
  return rep.passed ? 0 : 1;
}
