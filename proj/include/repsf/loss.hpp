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
#include <string>
#include <vector>

#include "repsf/density.hpp"
#include "repsf/error.hpp"
#include "repsf/exact_sum.hpp"
#include "repsf/ot.hpp"

namespace repsf {

enum class CountLossMode { kL1, kL2 };

inline double count_loss(double pred, double gt, CountLossMode mode = CountLossMode::kL1) {
  if (!std::isfinite(pred) || !std::isfinite(gt)) throw ValidationError("counts must be finite");
  const double d = pred - gt;
  return mode == CountLossMode::kL1 ? std::abs(d) : d * d;
}

struct LossWeights {
  double count = 1.0;
  double ot = 1.0;
};

inline double combine_loss(double count_term, double ot_term, LossWeights weights = {}) {
  return weights.count * count_term + weights.ot * ot_term;
}

struct LossReport {
  double pred_count = 0.0;
  double gt_count = 0.0;
  double count_loss = 0.0;
  double ot_loss = 0.0;
  double total = 0.0;
  int iterations = 0;
  double violation = 0.0;
  bool converged = false;
};

/// weights.count * count_loss(sum pred, sum gt) + weights.ot * ot_loss.
inline LossReport total_loss(const DensityMap& pred, const DensityMap& gt, const SinkhornConfig& cfg,
                             LossWeights weights = {}, CountLossMode mode = CountLossMode::kL1) {
  LossReport r;
  const OtResult ot = ot_loss(pred, gt, cfg);
  r.pred_count = pred.count();
  r.gt_count = gt.count();
  r.count_loss = count_loss(r.pred_count, r.gt_count, mode);
  r.ot_loss = ot.value;
  r.total = combine_loss(r.count_loss, r.ot_loss, weights);
  r.iterations = ot.iterations;
  r.violation = ot.violation;
  r.converged = ot.converged;
  return r;
}

/// mae = mean |pred - gt|; mse is the root of the mean squared error, as
/// crowd-counting tables report it.
struct MetricsReport {
  double mae = 0.0;
  double mse = 0.0;
  std::size_t n = 0;
};

inline MetricsReport eval_metrics(const std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.empty()) throw ValidationError("eval_metrics needs at least one sample");
  if (pred.size() != gt.size())
    throw ValidationError("eval_metrics got " + std::to_string(pred.size()) + " predictions and " +
                          std::to_string(gt.size()) + " ground-truth counts");
  ExactSum abs_sum, sq_sum;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!std::isfinite(pred[i]) || !std::isfinite(gt[i]))
      throw ValidationError("sample " + std::to_string(i) + " is not finite");
    const double d = pred[i] - gt[i];
    abs_sum.add(std::abs(d));
    sq_sum.add(d * d);
  }
  const double n = static_cast<double>(pred.size());
  const double mae = abs_sum.value() / n;
  // The root mean square never falls below the mean; clamp away rounding.
  return {mae, std::max(mae, std::sqrt(sq_sum.value() / n)), pred.size()};
}

}  // namespace repsf
