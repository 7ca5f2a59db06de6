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

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "repsf/error.hpp"

namespace repsf {

struct Assignment {
  std::vector<std::size_t> row_to_col;
  double cost = 0.0;
};

/// Minimum-cost assignment of every row to a distinct column (rows <= cols)
/// by the Hungarian method with potentials, O(rows^2 cols). cost is
/// row-major rows x cols.
inline Assignment solve_assignment(const std::vector<double>& cost, std::size_t rows,
                                   std::size_t cols) {
  if (cost.size() != rows * cols)
    throw ShapeError("assignment cost holds " + std::to_string(cost.size()) + " entries for " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  if (rows > cols) throw ShapeError("assignment needs rows <= cols");
  for (double c : cost)
    if (!std::isfinite(c)) throw ValidationError("assignment costs must be finite");
  Assignment out;
  if (rows == 0) return out;
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is the virtual start.
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> match(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<bool> used(cols + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  out.row_to_col.assign(rows, 0);
  for (std::size_t j = 1; j <= cols; ++j)
    if (match[j] != 0) out.row_to_col[match[j] - 1] = j - 1;
  for (std::size_t i = 0; i < rows; ++i) out.cost += cost[i * cols + out.row_to_col[i]];
  return out;
}

}  // namespace repsf
